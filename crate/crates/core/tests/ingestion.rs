use std::collections::BTreeSet;
use std::fs;
use std::path::PathBuf;

use image::RgbImage;
use opr_core::eval::{auc, ScoreSet};
use opr_core::ingestion::{
    load_frames, split_quads, validate_records, ArtifactStyle, CueSet, CueStrengths, DeskDataset, DeskSpec,
    FrameRecord, Split,
};
use opr_core::blendfake::{BlendConfig, CbiFailurePolicy};
use opr_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn missing_files_are_all_reported() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut records = Vec::new();
    let mut want = BTreeSet::new();
    for i in 0..1000 {
        let r = FrameRecord {
            frame_id: format!("f{i:04}"),
            video_id: format!("v{}", i / 10),
            identity_id: format!("id{}", i / 40),
            real_path: dir.path().join(format!("r{i}.png")),
            deepfake_path: dir.path().join(format!("d{i}.png")),
            landmark_path: dir.path().join(format!("l{i}.txt")),
            split: if i < 800 { Split::Train } else { Split::Test },
        };
        for p in [&r.real_path, &r.deepfake_path, &r.landmark_path] {
            if rng.gen_bool(0.97) {
                fs::write(p, b"").unwrap();
            } else {
                want.insert(p.clone());
            }
        }
        records.push(r);
    }
    assert!(!want.is_empty());
    match validate_records(&records) {
        Err(Error::MissingFiles { missing }) => {
            assert_eq!(missing, want.into_iter().collect::<Vec<PathBuf>>());
        }
        other => panic!("expected missing files, got {other:?}"),
    }
}

fn spec(seed: u64) -> DeskSpec {
    DeskSpec {
        seed,
        train_identities: 4,
        test_identities: 2,
        videos_per_identity: 2,
        frames_per_video: 3,
        ..Default::default()
    }
}

#[test]
fn desk_is_deterministic_and_round_trips_through_disk() {
    let a = DeskDataset::generate(&spec(4));
    let b = DeskDataset::generate(&spec(4));
    let c = DeskDataset::generate(&spec(5));
    assert_eq!(a.frames.len(), 36);
    for (x, y) in a.frames.iter().zip(&b.frames) {
        assert_eq!(x.real, y.real);
        assert_eq!(x.deepfake, y.deepfake);
        assert_eq!(x.landmarks, y.landmarks);
    }
    assert!(a.frames.iter().zip(&c.frames).any(|(x, y)| x.real != y.real));

    let dir = tempfile::tempdir().unwrap();
    let path = a.write(dir.path()).unwrap();
    let back = load_frames(&path).unwrap();
    assert_eq!(back.len(), a.frames.len());
    for (x, y) in a.frames.iter().zip(&back) {
        assert_eq!(x.real, y.real);
        assert_eq!(x.deepfake, y.deepfake);
        assert_eq!(x.record.frame_id, y.record.frame_id);
        assert_eq!(x.record.split, y.record.split);
        for (p, q) in x.landmarks.points().iter().zip(y.landmarks.points()) {
            assert!((p[0] - q[0]).abs() < 1e-9 && (p[1] - q[1]).abs() < 1e-9);
        }
    }
    let train_videos: BTreeSet<_> = back.iter().filter(|f| f.record.split == Split::Train).map(|f| &f.record.video_id).collect();
    assert!(back.iter().filter(|f| f.record.split == Split::Test).all(|f| !train_videos.contains(&f.record.video_id)));
}

#[test]
fn pool_size_limits_donors() {
    let ds = DeskDataset::generate(&spec(6));
    let cfg = BlendConfig::default();
    let (quads, stats) = split_quads(&ds.frames, Split::Train, Some(6), &cfg, CbiFailurePolicy::Drop, 0).unwrap();
    // The first six frames by id belong to one identity, which cannot donate
    // to itself.
    let donors: BTreeSet<_> = quads.iter().filter_map(|q| q.meta.cbi_source.clone()).collect();
    assert!(donors.len() <= 6);
    assert_eq!(stats.built + stats.dropped, 24);
    assert_eq!(stats.dropped, 6);
}

/// Mean absolute 4-neighbour Laplacian: a plain high-frequency energy score.
fn hf_energy(img: &RgbImage) -> f64 {
    let (w, h) = img.dimensions();
    let mut total = 0.0;
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            for c in 0..3 {
                let v = |dx: i32, dy: i32| f64::from(img.get_pixel((x as i32 + dx) as u32, (y as i32 + dy) as u32)[c]);
                total += (4.0 * v(0, 0) - v(1, 0) - v(-1, 0) - v(0, 1) - v(0, -1)).abs();
            }
        }
    }
    total / f64::from((w - 2) * (h - 2) * 3)
}

#[test]
fn artifact_cue_sweep_is_monotone_for_a_pixel_baseline() {
    let mut prev = 0.0;
    for strength in [0.0, 0.05, 0.2, 0.5, 1.0] {
        let cues = CueSet {
            strengths: CueStrengths {
                artifact: strength,
                ..CueStrengths::ZERO
            },
            style: ArtifactStyle::Checkerboard,
        };
        let ds = DeskDataset::generate(&DeskSpec {
            train_cues: cues,
            ..spec(7)
        });
        let frames: Vec<_> = ds.split(Split::Train).collect();
        let scores: Vec<f64> = frames.iter().flat_map(|f| [hf_energy(&f.real), hf_energy(&f.deepfake)]).collect();
        let labels: Vec<u8> = frames.iter().flat_map(|_| [0, 1]).collect();
        let a = auc(&ScoreSet::from_pairs(&scores, &labels)).unwrap();
        if strength == 0.0 {
            assert_eq!(a, 0.5, "no cue must mean identical pairs");
        }
        assert!(a >= prev, "AUC fell to {a} at strength {strength}");
        prev = a;
    }
    assert!(prev > 0.95, "full-strength artifact still hard to see: {prev}");
}
