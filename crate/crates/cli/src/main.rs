mod manifest;
mod plots;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ffad_core::checkpoint::Checkpoint;
use ffad_core::evaluator::{self, AblationGrid, EvalOptions, EvalReport, NO_FLOW_LABEL, WITH_FLOW_LABEL};
use ffad_core::frames::{labels_path, load_labels, load_split, FrameSequence, IngestConfig, LabelSeries};
use ffad_core::gradcheck::{run_gradchecks, GradcheckOptions};
use ffad_core::scorer;
use ffad_core::toyworld::{write_dataset, ToyScenario, TEST_FRAMES, TRAINING_FRAMES};
use ffad_core::trainer::{self, TrainConfig, TrainOutputs, Trainer};

use manifest::RunManifest;

#[derive(Parser)]
#[command(name = "ffad", version, about = "Video anomaly detection by future frame prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic crossroad dataset with frame labels.
    Toygen(ToygenArgs),
    /// Train a predictor on the normal-only training split.
    Train(TrainArgs),
    /// Write per-frame PSNR and regular scores for a split.
    Score(ScoreArgs),
    /// Frame-level AUC and score gap against labels.
    Eval(EvalArgs),
    /// Train and evaluate the four loss variants with a shared seed.
    Ablate(AblateArgs),
    /// Check analytic loss gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct ToygenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, env = "FFAD_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = TRAINING_FRAMES)]
    frames_train: usize,
    #[arg(long, default_value_t = TEST_FRAMES)]
    frames_test: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset root containing `training/<video>/` frame folders.
    #[arg(long)]
    data: PathBuf,
    /// key=value file overriding the defaults; flags override the file.
    #[arg(long, conflicts_with = "resume")]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long, env = "FFAD_SEED", conflicts_with = "resume")]
    seed: Option<u64>,
    #[arg(long, conflicts_with = "resume")]
    resolution: Option<usize>,
    /// Drop the motion constraint (flow weight 0).
    #[arg(long, conflicts_with = "resume")]
    no_flow: bool,
    /// Continue from a training checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long, default_value = "runs/train")]
    out: PathBuf,
    /// Print losses every this many steps; 0 is silent.
    #[arg(long, default_value_t = 50)]
    log_every: u64,
    /// Also write a loss-curve SVG.
    #[arg(long)]
    plots: bool,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "testing")]
    split: String,
    #[arg(long, default_value = "runs/score")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Directory of `<video>.txt` label files; defaults to `<data>/labels`.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long, default_value = "testing")]
    split: String,
    #[arg(long, default_value = "runs/eval")]
    report_out: PathBuf,
    /// Write score-curve and ROC SVGs.
    #[arg(long)]
    plots: bool,
    /// Also report the flow MSE between predicted and true frames.
    #[arg(long)]
    flow_mse: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long, env = "FFAD_SEED")]
    seed: Option<u64>,
    #[arg(long)]
    resolution: Option<usize>,
    #[arg(long, default_value = "runs/ablate")]
    out: PathBuf,
    #[arg(long)]
    flow_mse: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 8)]
    size: usize,
    #[arg(long, default_value_t = 3)]
    channels: usize,
    #[arg(long, env = "FFAD_SEED", default_value_t = 0)]
    seed: u64,
    /// Directory for the run manifest.
    #[arg(long)]
    report_out: Option<PathBuf>,
    /// Test fixture: corrupt the gradient of the named loss.
    #[arg(long, hide = true)]
    corrupt: Option<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Toygen(a) => toygen(a),
        Command::Train(a) => train(a),
        Command::Score(a) => score(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn toygen(a: ToygenArgs) -> Result<ExitCode> {
    let mut m = RunManifest::start("toygen");
    m.seed = Some(a.seed);
    let train = ToyScenario::default_training(a.seed).with_duration(a.frames_train);
    let test = ToyScenario::default_test(a.seed).with_duration(a.frames_test);
    write_dataset(&a.out, &train, &test).with_context(|| format!("writing dataset to {}", a.out.display()))?;
    m.note("frames_train", a.frames_train);
    m.note("frames_test", a.frames_test);
    for p in ["training", "testing", "labels", "scenario.txt"] {
        m.output(a.out.join(p));
    }
    println!("wrote {} training and {} test frames to {}", a.frames_train, a.frames_test, a.out.display());
    m.finish(&a.out, "ok")?;
    Ok(ExitCode::SUCCESS)
}

fn build_config(config: Option<&Path>, steps: Option<u64>, seed: Option<u64>, resolution: Option<usize>) -> Result<TrainConfig> {
    let mut cfg = match config {
        Some(p) => TrainConfig::load(p).with_context(|| format!("config {}", p.display()))?,
        None => TrainConfig::default(),
    };
    if let Some(s) = steps {
        cfg.max_steps = s;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(r) = resolution {
        cfg.resolution = r;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_videos(root: &Path, split: &str, resolution: usize) -> Result<Vec<FrameSequence>> {
    let ingest = IngestConfig {
        resize_target: Some(resolution),
    };
    load_split(root, split, &ingest).with_context(|| format!("loading {split} split from {}", root.display()))
}

fn run_label(cfg: &TrainConfig) -> &'static str {
    if cfg.weights.flow == 0.0 {
        NO_FLOW_LABEL
    } else {
        WITH_FLOW_LABEL
    }
}

fn train(a: TrainArgs) -> Result<ExitCode> {
    let mut m = RunManifest::start("train");
    let (mut t, videos) = match &a.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
            m.checkpoint(path, ckpt.id());
            let mut t = Trainer::from_checkpoint(&ckpt)?;
            if let Some(s) = a.steps {
                t.config.max_steps = s;
            }
            let videos = load_videos(&a.data, "training", t.config.resolution)?;
            trainer::dataset_channels(&t.config, &videos)?;
            (t, videos)
        }
        None => {
            let mut cfg = build_config(a.config.as_deref(), a.steps, a.seed, a.resolution)?;
            if a.no_flow {
                cfg.weights.flow = 0.0;
            }
            let videos = load_videos(&a.data, "training", cfg.resolution)?;
            let channels = trainer::dataset_channels(&cfg, &videos)?;
            (Trainer::new(cfg, channels)?, videos)
        }
    };
    let label = run_label(&t.config);
    m.seed = Some(t.config.seed);
    m.config = Some(t.config.to_text());
    m.note("label", label);
    println!(
        "training {} ({label}) from step {} to {}",
        t.config.weights.variant_name(),
        t.state.step,
        t.config.max_steps
    );
    let outputs = TrainOutputs { dir: Some(a.out.clone()) };
    let log_every = a.log_every;
    let (ckpt, history) = trainer::run_with(&mut t, &videos, &outputs, &mut |step, b| {
        if log_every > 0 && step % log_every == 0 {
            println!(
                "step {step:>6}  int {:.5}  gd {:.5}  op {:.5}  adv {:.4}  total {:.5}  d {:.4}",
                b.int, b.gd, b.op, b.adv_g, b.total_g, b.d
            );
        }
    })?;
    let final_path = a.out.join("final.ckpt");
    m.checkpoint(&final_path, ckpt.id());
    m.output(a.out.join("train_log.csv"));
    if a.plots {
        let p = a.out.join("loss_curve.svg");
        plots::loss_curve(&p, &history.records, &history.smoothed_total(25))?;
        m.output(p);
    }
    println!("run label: {label}");
    println!("checkpoint {} (id {})", final_path.display(), ckpt.id());
    m.finish(&a.out, "ok")?;
    Ok(ExitCode::SUCCESS)
}

fn load_checkpoint(path: &Path) -> Result<(Checkpoint, TrainConfig)> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let cfg = trainer::config_from_checkpoint(&ckpt)?;
    Ok((ckpt, cfg))
}

fn score(a: ScoreArgs) -> Result<ExitCode> {
    let mut m = RunManifest::start("score");
    let (ckpt, cfg) = load_checkpoint(&a.checkpoint)?;
    m.checkpoint(&a.checkpoint, ckpt.id());
    m.config = Some(cfg.to_text());
    m.seed = Some(cfg.seed);
    let (generator, _) = trainer::load_generator(&ckpt)?;
    let videos = load_videos(&a.data, &a.split, cfg.resolution)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for v in &videos {
        let s = scorer::score_video(&generator, v)?;
        let path = a.out.join(format!("scores_{}.csv", v.video_id));
        s.save(&path)?;
        println!("video {}: {} frames scored -> {}", v.video_id, s.len(), path.display());
        m.output(path);
    }
    m.finish(&a.out, "ok")?;
    Ok(ExitCode::SUCCESS)
}

fn load_all_labels(dir: Option<&Path>, data: &Path, videos: &[FrameSequence]) -> Result<Vec<LabelSeries>> {
    videos
        .iter()
        .map(|v| {
            let path = match dir {
                Some(d) => d.join(format!("{}.txt", v.video_id)),
                None => labels_path(data, &v.video_id),
            };
            let mut l = load_labels(&path).with_context(|| format!("labels for video {}", v.video_id))?;
            l.video_id = v.video_id.clone();
            if l.len() != v.len() {
                bail!("video {} has {} frames but {} has {} labels", v.video_id, v.len(), path.display(), l.len());
            }
            Ok(l)
        })
        .collect()
}

fn write_plots(report: &EvalReport, dir: &Path, m: &mut RunManifest) -> Result<()> {
    for (s, l) in &report.per_video {
        let p = dir.join(format!("scores_{}.svg", s.video_id));
        plots::score_curve(&p, s, l)?;
        m.output(p);
    }
    let p = dir.join("roc.svg");
    plots::roc(&p, &report.roc()?, report.auc)?;
    m.output(p);
    Ok(())
}

fn eval(a: EvalArgs) -> Result<ExitCode> {
    let mut m = RunManifest::start("eval");
    let (ckpt, cfg) = load_checkpoint(&a.checkpoint)?;
    m.checkpoint(&a.checkpoint, ckpt.id());
    m.config = Some(cfg.to_text());
    m.seed = Some(cfg.seed);
    let videos = load_videos(&a.data, &a.split, cfg.resolution)?;
    let labels = load_all_labels(a.labels.as_deref(), &a.data, &videos)?;
    let opts = EvalOptions {
        flow: a.flow_mse.then(|| cfg.flow.clone()),
        label: Some(run_label(&cfg).to_string()),
    };
    let report = evaluator::evaluate_checkpoint(&ckpt, &videos, &labels, &opts)?;
    report.write(&a.report_out)?;
    m.output(a.report_out.join("report.txt"));
    m.output(a.report_out.join("report.csv"));
    if a.plots {
        write_plots(&report, &a.report_out, &mut m)?;
    }
    print!("{}", report.to_text());
    m.note("auc", report.auc);
    m.note("delta_s", report.delta_s);
    m.finish(&a.report_out, "ok")?;
    Ok(ExitCode::SUCCESS)
}

fn ablate(a: AblateArgs) -> Result<ExitCode> {
    let mut m = RunManifest::start("ablate");
    let cfg = build_config(a.config.as_deref(), a.steps, a.seed, a.resolution)?;
    m.seed = Some(cfg.seed);
    m.config = Some(cfg.to_text());
    let train_videos = load_videos(&a.data, "training", cfg.resolution)?;
    let test_videos = load_videos(&a.data, "testing", cfg.resolution)?;
    let labels = load_all_labels(None, &a.data, &test_videos)?;
    let grid = AblationGrid::standard(cfg.weights);
    let opts = EvalOptions {
        flow: a.flow_mse.then(|| cfg.flow.clone()),
        label: None,
    };
    let reports = evaluator::run_ablation(&grid, &cfg, &train_videos, &test_videos, &labels, Some(&a.out), &opts)?;
    let table = evaluator::ablation_table(&reports);
    std::fs::write(a.out.join("ablation.txt"), &table).context("writing ablation table")?;
    std::fs::write(a.out.join("ablation.csv"), evaluator::ablation_csv(&reports)).context("writing ablation csv")?;
    for r in &reports {
        m.checkpoint(&a.out.join(&r.variant).join("final.ckpt"), r.checkpoint_id.clone());
    }
    m.output(a.out.join("ablation.txt"));
    m.output(a.out.join("ablation.csv"));
    print!("{table}");
    m.finish(&a.out, "ok")?;
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let mut m = RunManifest::start("gradcheck");
    m.seed = Some(a.seed);
    let opts = GradcheckOptions {
        size: a.size,
        channels: a.channels,
        seed: a.seed,
        corrupt: a.corrupt.clone(),
    };
    let results = run_gradchecks(&opts);
    for r in &results {
        println!(
            "{:<14} max_rel_error={:.3e}  threshold={:.0e}  {}",
            r.name,
            r.max_rel_error,
            r.threshold,
            if r.passed() { "PASS" } else { "FAIL" }
        );
        m.note(&format!("max_rel_error.{}", r.name), r.max_rel_error);
    }
    let failed: Vec<_> = results.iter().filter(|r| !r.passed()).collect();
    let status = if failed.is_empty() { "ok" } else { "failed" };
    if let Some(dir) = &a.report_out {
        m.finish(dir, status)?;
    }
    if failed.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        for r in failed {
            eprintln!("gradient check failed for {} (max relative error {:.3e})", r.name, r.max_rel_error);
        }
        Ok(ExitCode::from(1))
    }
}
