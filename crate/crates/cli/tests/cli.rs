use std::path::Path;
use std::process::Command;

fn opr(args: &[&str]) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_opr")).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "opr {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn desk_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("desk");
    opr(&[
        "make-desk-data",
        "--out",
        s(&data),
        "--seed",
        "3",
        "--train-identities",
        "4",
        "--test-identities",
        "2",
        "--videos-per-identity",
        "2",
        "--frames-per-video",
        "2",
    ]);
    let manifest = data.join("manifest.json");
    assert!(manifest.exists());

    let quads = dir.path().join("quads");
    opr(&[
        "synth",
        "--manifest",
        s(&manifest),
        "--out",
        s(&quads),
        "--pool-size",
        "6",
        "--failure-policy",
        "substitute_sbi",
    ]);
    let qm: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(quads.join("quads.json")).unwrap()).unwrap();
    assert_eq!(qm["quads"].as_array().unwrap().len(), 16);

    let run = dir.path().join("run");
    opr(&[
        "train",
        "--out",
        s(&run),
        "--quad-manifest",
        s(&quads.join("quads.json")),
        "--epochs",
        "1",
        "--toy",
        "--batch-quads",
        "4",
    ]);
    opr(&["resume", "--run", s(&run), "--epochs", "3"]);
    let steps = std::fs::read_to_string(run.join("steps.jsonl")).unwrap();
    assert_eq!(steps.lines().count(), 12);
    let epochs = std::fs::read_to_string(run.join("epochs.csv")).unwrap();
    assert_eq!(epochs.lines().count(), 4, "{epochs}");
    // A second train into the same directory is refused.
    let again = Command::new(env!("CARGO_BIN_EXE_opr"))
        .args(["train", "--out", s(&run), "--manifest", s(&manifest)])
        .output()
        .unwrap();
    assert!(!again.status.success());

    let ckpt = run.join("checkpoint.ckpt");
    let metrics = dir.path().join("metrics.json");
    opr(&[
        "evaluate",
        "--checkpoint",
        s(&ckpt),
        "--manifest",
        &format!("desk={}", s(&manifest)),
        "--out",
        s(&metrics),
    ]);
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&metrics).unwrap()).unwrap();
    let auc = m["desk"]["auc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&auc));
    assert_eq!(m["desk"]["frames"].as_u64(), Some(16));

    let emb = dir.path().join("emb.txt");
    opr(&["export-embeddings", "--checkpoint", s(&ckpt), "--manifest", s(&manifest), "--out", s(&emb)]);
    let dump = opr_core::eval::EmbeddingDump::read(&emb).unwrap();
    assert_eq!((dump.d, dump.len()), (2, 32));

    let latent = dir.path().join("latent");
    opr(&["analyze-latent", "--checkpoint", s(&ckpt), "--manifest", s(&manifest), "--out", s(&latent)]);
    for f in ["embeddings.txt", "report.json", "points.csv", "scatter.png", "pd_heatmap.png"] {
        assert!(latent.join(f).exists(), "missing {f}");
    }
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(latent.join("report.json")).unwrap()).unwrap();
    assert!(report["mpd"].as_f64().unwrap() > 0.0);
    assert_eq!(report["items"].as_u64(), Some(32));
}

#[test]
fn bad_names_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_opr"))
        .args(["train", "--out", s(dir.path()), "--variant", "nonsense"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown variant"));
}
