use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use opr_core::blendfake::{AlignedQuad, BlendConfig, CbiFailurePolicy};
use opr_core::eval::{
    analyze_latent, default_suite, detection_metrics, embed_items, heatmap_plot, scatter_plot, write_points_csv,
    PdForm, ScoreSet, ScoredItem,
};
use opr_core::ingestion::{load_frames, split_quads, synth_desk_dataset, write_quad_manifest, DeskSpec, LoadedFrame, Split};
use opr_core::model::OprModel;
use opr_core::trainer::{model_from_checkpoint, quad_items, training_quads, Checkpoint, RunConfig, RunLogger, Trainer};
use serde::de::DeserializeOwned;

#[derive(Parser)]
#[command(name = "opr", version, about = "Hybrid deepfake/blendfake detector training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build aligned real/SBI/CBI/deepfake quads from a frame manifest.
    Synth(SynthArgs),
    /// Generate the procedural desk-scale dataset.
    MakeDeskData(DeskArgs),
    /// Train a detector from a config file.
    Train(TrainArgs),
    /// Continue a run from its checkpoint.
    Resume(ResumeArgs),
    /// Write analysis embeddings for a manifest split.
    ExportEmbeddings(ExportArgs),
    /// Frame AUC, EER and video AUC on real vs deepfake frames.
    Evaluate(EvaluateArgs),
    /// Embeddings, mPD report, ordering statistic and plots.
    AnalyzeLatent(AnalyzeArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Split to build quads for.
    #[arg(long, default_value = "train")]
    split: String,
    /// Keep only this many training frames as CBI donors.
    #[arg(long)]
    pool_size: Option<usize>,
    /// `drop` or `substitute_sbi`.
    #[arg(long, default_value = "drop")]
    failure_policy: String,
    /// Blend configuration as JSON; defaults apply to missing fields.
    #[arg(long)]
    blend_config: Option<PathBuf>,
}

#[derive(Args)]
struct DeskArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    train_identities: Option<usize>,
    #[arg(long)]
    test_identities: Option<usize>,
    #[arg(long)]
    videos_per_identity: Option<usize>,
    #[arg(long)]
    frames_per_video: Option<usize>,
    /// Full desk spec as JSON; flags override it.
    #[arg(long)]
    spec: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML run config. Without one the desk preset is used.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory for logs, the resolved config and the checkpoint.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args, Default)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// full, bf_only, df_only or vht.
    #[arg(long)]
    variant: Option<String>,
    /// triplet_binary, multi_label or multi_class.
    #[arg(long)]
    strategy: Option<String>,
    /// r2b2d, r2d2b or surround.
    #[arg(long)]
    organization: Option<String>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_quads: Option<usize>,
    #[arg(long)]
    warmup_epochs: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    /// Route features through the 2-channel analysis tap.
    #[arg(long)]
    toy: bool,
    #[arg(long)]
    parallel: bool,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    quad_manifest: Option<PathBuf>,
}

#[derive(Args)]
struct ResumeArgs {
    #[arg(long)]
    run: PathBuf,
    /// New total epoch budget.
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ExportArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// `[TAG=]PATH`; repeat for several datasets. The tag defaults to the
    /// manifest's directory name.
    #[arg(long, required = true)]
    manifest: Vec<String>,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: PathBuf,
    /// Use the literal printed PD expression instead of the distance.
    #[arg(long)]
    printed_pd: bool,
    #[arg(long, default_value_t = 512)]
    plot_size: u32,
}

fn parse_name<T: DeserializeOwned>(what: &str, s: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).with_context(|| format!("unknown {what} `{s}`"))
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

fn apply(cfg: &mut RunConfig, o: &Overrides) -> Result<()> {
    if let Some(v) = o.seed {
        cfg.seed = v;
    }
    if let Some(v) = o.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = &o.variant {
        cfg.variant = parse_name("variant", v)?;
    }
    if let Some(v) = &o.strategy {
        cfg.strategy = parse_name("strategy", v)?;
    }
    if let Some(v) = &o.organization {
        cfg.organization = parse_name("organization", v)?;
    }
    if let Some(v) = o.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = o.batch_quads {
        cfg.batch_quads = v;
    }
    if let Some(v) = o.warmup_epochs {
        cfg.warmup_epochs = v;
    }
    if let Some(v) = o.beta {
        cfg.weights.beta = v;
    }
    if let Some(v) = o.gamma {
        cfg.weights.gamma = v;
    }
    cfg.backbone.toy_mode |= o.toy;
    cfg.parallel |= o.parallel;
    if o.manifest.is_some() {
        cfg.data.manifest = o.manifest.clone();
    }
    if o.quad_manifest.is_some() {
        cfg.data.quad_manifest = o.quad_manifest.clone();
    }
    cfg.validate()?;
    Ok(())
}

fn absolute(p: &Path) -> Result<PathBuf> {
    Ok(std::path::absolute(p)?)
}

fn run_training(mut trainer: Trainer, run: &Path) -> Result<()> {
    let quads = training_quads(&trainer.config).context("loading training data")?;
    eprintln!("{} training quads, variant {}", quads.len(), trainer.config.variant.name());
    let mut logger = RunLogger::open(run)?;
    let ckpt = run.join("checkpoint.ckpt");
    while trainer.epoch < trainer.config.epochs {
        let epoch = trainer.epoch;
        let logs = trainer.train_epoch(&quads)?;
        let summary = opr_core::trainer::EpochSummary::from_steps(epoch, &logs);
        for s in &logs {
            logger.log_step(s)?;
        }
        logger.log_epoch(&summary)?;
        trainer.checkpoint().save(&ckpt)?;
        eprintln!(
            "epoch {epoch}: l_overall {:.4} (l_d {:.4}, l_o {:.4}, l_t {:.4}), bridged {}",
            summary.mean_l_overall, summary.mean_l_d, summary.mean_l_o, summary.mean_l_t, summary.bridged
        );
    }
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => {
            let mut cfg = RunConfig::load(p).with_context(|| format!("reading {}", p.display()))?;
            let base = p.parent().unwrap_or(Path::new("."));
            resolve(base, &mut cfg.data.manifest);
            resolve(base, &mut cfg.data.quad_manifest);
            cfg
        }
        None => RunConfig::desk(),
    };
    let mut o = args.overrides;
    for p in [&mut o.manifest, &mut o.quad_manifest].into_iter().flatten() {
        *p = absolute(p)?;
    }
    apply(&mut cfg, &o)?;
    fs::create_dir_all(&args.out)?;
    if args.out.join("checkpoint.ckpt").exists() {
        bail!("{} already holds a run; use `opr resume`", args.out.display());
    }
    fs::write(args.out.join("config.toml"), cfg.to_toml()?)?;
    run_training(Trainer::new(cfg)?, &args.out)
}

fn resume(args: ResumeArgs) -> Result<()> {
    let cfg_path = args.run.join("config.toml");
    let mut cfg = RunConfig::load(&cfg_path).with_context(|| format!("reading {}", cfg_path.display()))?;
    if let Some(e) = args.epochs {
        cfg.epochs = e;
        fs::write(&cfg_path, cfg.to_toml()?)?;
    }
    let trainer = Trainer::restore_from(&args.run.join("checkpoint.ckpt"), cfg)?;
    eprintln!("resuming at epoch {}, step {}", trainer.epoch, trainer.step);
    run_training(trainer, &args.run)
}

fn synth(args: SynthArgs) -> Result<()> {
    let policy: CbiFailurePolicy = parse_name("failure policy", &args.failure_policy)?;
    let split: Split = parse_name("split", &args.split)?;
    let blend: BlendConfig = match &args.blend_config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
        None => BlendConfig::default(),
    };
    let frames = load_frames(&args.manifest)?;
    let (quads, stats) = split_quads(&frames, split, args.pool_size, &blend, policy, args.seed)?;
    let path = write_quad_manifest(&quads, stats, &args.out)?;
    eprintln!(
        "{} quads ({} dropped, {} substituted) -> {}",
        stats.built,
        stats.dropped,
        stats.substituted,
        path.display()
    );
    Ok(())
}

fn make_desk(args: DeskArgs) -> Result<()> {
    let mut spec: DeskSpec = match &args.spec {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
        None => DeskSpec::default(),
    };
    spec.seed = args.seed;
    let fields = [
        (args.train_identities, &mut spec.train_identities),
        (args.test_identities, &mut spec.test_identities),
        (args.videos_per_identity, &mut spec.videos_per_identity),
        (args.frames_per_video, &mut spec.frames_per_video),
    ];
    for (flag, field) in fields {
        if let Some(v) = flag {
            *field = v;
        }
    }
    let path = synth_desk_dataset(&spec, &args.out)?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn load_model(path: &Path) -> Result<(Checkpoint, OprModel)> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("reading {}", path.display()))?;
    let model = model_from_checkpoint(&ckpt)?;
    Ok((ckpt, model))
}

fn eval_quads(data: &DataArgs, ckpt: &Checkpoint) -> Result<Vec<AlignedQuad>> {
    let split: Split = parse_name("split", &data.split)?;
    let frames = load_frames(&data.manifest)?;
    let d = &ckpt.config.data;
    // Evaluation keeps every frame; a missing donor falls back to SBI.
    let (quads, _) = split_quads(&frames, split, None, &d.blend, CbiFailurePolicy::SubstituteSbi, data.seed)?;
    if quads.is_empty() {
        bail!("no {} frames in {}", data.split, data.manifest.display());
    }
    Ok(quads)
}

fn export(args: ExportArgs) -> Result<()> {
    let (ckpt, model) = load_model(&args.data.checkpoint)?;
    let quads = eval_quads(&args.data, &ckpt)?;
    let dump = embed_items(&model, &quad_items(&quads), ckpt.config.variant.uses_heads())?;
    dump.write(&args.out)?;
    eprintln!("{} embeddings of dimension {} -> {}", dump.len(), dump.d, args.out.display());
    Ok(())
}

fn real_fake_scores(model: &OprModel, frames: &[LoadedFrame], heads: bool) -> Result<ScoreSet> {
    let images: Vec<_> = frames.iter().flat_map(|f| [&f.real, &f.deepfake]).collect();
    let scores = model.predict(&images, heads, 64)?;
    let items = frames
        .iter()
        .zip(scores.chunks(2))
        .flat_map(|(f, s)| {
            let id = &f.record.frame_id;
            let video = &f.record.video_id;
            [
                ScoredItem {
                    item_id: format!("{id}:real"),
                    video_id: format!("{video}:real"),
                    score: s[0],
                    label: 0,
                },
                ScoredItem {
                    item_id: format!("{id}:deepfake"),
                    video_id: format!("{video}:deepfake"),
                    score: s[1],
                    label: 1,
                },
            ]
        })
        .collect();
    Ok(ScoreSet::new(items))
}

fn evaluate(args: EvaluateArgs) -> Result<()> {
    let (ckpt, model) = load_model(&args.checkpoint)?;
    let split: Split = parse_name("split", &args.split)?;
    let mut out = BTreeMap::new();
    for spec in &args.manifest {
        let (tag, path) = match spec.split_once('=') {
            Some((t, p)) => (t.to_string(), PathBuf::from(p)),
            None => {
                let p = PathBuf::from(spec);
                let tag = absolute(&p)?
                    .parent()
                    .and_then(|d| d.file_name())
                    .map_or("data".into(), |n| n.to_string_lossy().into_owned());
                (tag, p)
            }
        };
        let frames: Vec<LoadedFrame> =
            load_frames(&path)?.into_iter().filter(|f| f.record.split == split).collect();
        if frames.is_empty() {
            bail!("no {} frames in {}", args.split, path.display());
        }
        let scores = real_fake_scores(&model, &frames, ckpt.config.variant.uses_heads())?;
        let m = detection_metrics(&tag, &scores)?;
        eprintln!("{tag}: auc {:.4} eer {:.4} video auc {:.4}", m.auc, m.eer, m.video_auc);
        out.insert(tag, m);
    }
    fs::write(&args.out, serde_json::to_string_pretty(&out)?)?;
    Ok(())
}

fn analyze(args: AnalyzeArgs) -> Result<()> {
    let (ckpt, model) = load_model(&args.data.checkpoint)?;
    let quads = eval_quads(&args.data, &ckpt)?;
    let items = quad_items(&quads);
    let form = if args.printed_pd { PdForm::Printed } else { PdForm::Difference };
    let scheme = ckpt.config.scheme();
    let heads = ckpt.config.variant.uses_heads();
    let (dump, report) = analyze_latent(&model, &items, heads, &default_suite(), form, args.data.seed, |k| {
        scheme.rank(k)
    })?;
    fs::create_dir_all(&args.out)?;
    dump.write(&args.out.join("embeddings.txt"))?;
    fs::write(args.out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    write_points_csv(&args.out.join("points.csv"), &dump, &report.item_pd)?;
    scatter_plot(&dump, args.plot_size).save(args.out.join("scatter.png"))?;
    heatmap_plot(&dump, &report.item_pd, args.plot_size).save(args.out.join("pd_heatmap.png"))?;
    eprintln!("{} items: mPD {:.4}, ordering {:.4}", report.items, report.mpd, report.ordering);
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Synth(a) => synth(a),
        Command::MakeDeskData(a) => make_desk(a),
        Command::Train(a) => train(a),
        Command::Resume(a) => resume(a),
        Command::ExportEmbeddings(a) => export(a),
        Command::Evaluate(a) => evaluate(a),
        Command::AnalyzeLatent(a) => analyze(a),
    }
}
