//! `lightseg`: profile, synthesize, train, evaluate, benchmark and
//! gradient-check the segmentation networks.
//!
//! Exit status: 0 on success, 1 when the request is invalid (bad flags,
//! malformed inputs), 2 when a valid request fails while running.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use lightseg::bench::{run_bench, BenchConfig, BenchError};
use lightseg::dataio::{load_manifest, synthesize_dataset, DataError, SynthConfig};
use lightseg::metrics::{MetricsError, MetricsReport};
use lightseg::models::{load_weights, Model, ModelConfig, ModelError, ModelKind, WeightFileError};
use lightseg::profiler::profile_model;
use lightseg::train::gradcheck::{suite_blocks, suite_model, suite_ops};
use lightseg::train::{
    evaluate, save_checkpoint, write_log_csv, AdamWConfig, Checkpoint, GradCheckConfig, TrainConfig, TrainError,
    Trainer,
};
use lightseg::Shape;

#[derive(Parser, Debug)]
#[command(name = "lightseg", version, about = "Lightweight UNet segmentation toolkit")]
struct Cli {
    /// Omit wall-clock values from written artifacts so reruns are byte-identical.
    #[arg(long, global = true)]
    no_timestamps: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Analytical parameter / MAC / CIO report of a network.
    Profile(ProfileArgs),
    /// Write a synthetic Netpbm dataset with a manifest.
    Synth(SynthArgs),
    /// Train on a manifest dataset with AdamW and cross-entropy.
    Train(TrainArgs),
    /// Per-class IoU, mIoU and pixel accuracy of trained weights.
    Eval(EvalArgs),
    /// Time repeated inference and derive FPS, FPS/W and GOP/J.
    Bench(BenchArgs),
    /// Finite-difference verification of the analytic gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModelArg {
    Unet,
    Umbv2,
    Umbv3,
}

impl From<ModelArg> for ModelKind {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Unet => ModelKind::UnetBaseline,
            ModelArg::Umbv2 => ModelKind::Umbv2,
            ModelArg::Umbv3 => ModelKind::Umbv3Small,
        }
    }
}

#[derive(Args, Debug)]
struct ModelFlags {
    /// Network architecture.
    #[arg(long, value_enum)]
    model: ModelArg,
    /// Baseline UNet: channels of the first level.
    #[arg(long)]
    base: Option<usize>,
    /// Baseline UNet: number of pooling levels.
    #[arg(long)]
    depth: Option<usize>,
    /// Decoder widths, deepest first, e.g. 256,128,64,32,16.
    #[arg(long, value_delimiter = ',')]
    decoder_widths: Option<Vec<usize>>,
}

impl ModelFlags {
    fn config(&self, classes: usize) -> ModelConfig {
        let mut cfg = ModelConfig::for_kind(self.model.into(), classes);
        if let Some(b) = self.base {
            cfg.base_channels = b;
        }
        if let Some(d) = self.depth {
            cfg.depth = d;
        }
        if let Some(w) = &self.decoder_widths {
            cfg.decoder_widths = w.clone();
        }
        cfg
    }
}

#[derive(Args, Debug)]
struct ProfileArgs {
    #[command(flatten)]
    model: ModelFlags,
    /// Number of output classes.
    #[arg(long, default_value_t = 9)]
    classes: usize,
    /// Square input size in pixels.
    #[arg(long)]
    input: usize,
    /// Write the JSON report here.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Number of samples.
    #[arg(long)]
    n: usize,
    /// Square image size (multiple of 32).
    #[arg(long)]
    size: usize,
    /// Number of classes including background.
    #[arg(long)]
    classes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
#[command(group = clap::ArgGroup::new("budget").required(true).args(["steps", "epochs"]))]
struct TrainArgs {
    /// Dataset manifest (JSON).
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    model: ModelFlags,
    /// Number of optimizer steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Number of epochs.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    /// Decoupled weight decay.
    #[arg(long, default_value_t = 0.0001)]
    wd: f64,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Clip the global gradient norm to this value.
    #[arg(long)]
    clip_norm: Option<f64>,
    /// Weight file to write; a `.json` sidecar is written next to it.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch metrics CSV.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Weight file written by `train` (its `.json` sidecar names the model).
    #[arg(long)]
    weights: PathBuf,
    /// Write the JSON report here.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[command(flatten)]
    model: ModelFlags,
    #[arg(long, default_value_t = 9)]
    classes: usize,
    /// Weights to load; random initialization otherwise.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Square input size in pixels.
    #[arg(long, default_value_t = 256)]
    input: usize,
    /// Frames per round.
    #[arg(long, default_value_t = 1000)]
    frames: usize,
    #[arg(long, default_value_t = 20)]
    rounds: usize,
    /// Untimed warmup frames.
    #[arg(long, default_value_t = 20)]
    warmup: usize,
    /// Externally measured average power in watts.
    #[arg(long)]
    power_watts: Option<f64>,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Seed of the weights (without --weights) and of the input frame.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Target {
    Ops,
    Blocks,
    Model,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, value_enum)]
    target: Target,
    /// Maximum relative error.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// A request rejected before any work was done.
#[derive(Debug)]
struct Invalid(String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

fn require_file(flag: &str, path: &Path) -> anyhow::Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(invalid(format!("{flag} {}: no such file", path.display())))
    }
}

fn ensure_parent(path: &Path) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    ensure_parent(path)?;
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn profile(a: ProfileArgs) -> anyhow::Result<()> {
    let cfg = a.model.config(a.classes);
    let report = profile_model(&cfg, a.input, a.input)?;
    print!("{}", report.to_table());
    if let Some(p) = a.json {
        write_text(&p, &(report.to_json() + "\n"))?;
    }
    Ok(())
}

fn synth(a: SynthArgs) -> anyhow::Result<()> {
    let cfg = SynthConfig {
        n: a.n,
        size: a.size,
        classes: a.classes,
        seed: a.seed,
    };
    let manifest = synthesize_dataset(&cfg, &a.out)?;
    println!("wrote {} samples; manifest {}", a.n, manifest.display());
    Ok(())
}

fn train(a: TrainArgs, timestamps: bool) -> anyhow::Result<()> {
    require_file("--manifest", &a.manifest)?;
    let dataset = load_manifest(&a.manifest)?.load_dataset()?;
    let cfg = a.model.config(dataset.classes.len());
    let model = Model::build(cfg)?.init_weights(a.seed);
    let train_cfg = TrainConfig {
        optimizer: AdamWConfig {
            lr: a.lr,
            weight_decay: a.wd,
            ..Default::default()
        },
        batch_size: a.batch,
        epochs: a.epochs,
        steps: a.steps,
        seed: a.seed,
        clip_norm: a.clip_norm,
    };
    let mut trainer = Trainer::new(model, train_cfg)?;
    println!("seed {}; {} samples; {} parameters", a.seed, dataset.len(), trainer.model.learnable_params());
    trainer.fit(&dataset, |l| {
        println!(
            "epoch {:>4}  loss {:.5}  pixel_acc {:.4}  miou {:.4}",
            l.epoch, l.loss, l.pixel_acc, l.miou
        )
    })?;
    ensure_parent(&a.out)?;
    let sidecar = save_checkpoint(&trainer, &a.out)?;
    println!("wrote {} and {}", a.out.display(), sidecar.display());
    if let Some(log) = a.log {
        ensure_parent(&log)?;
        write_log_csv(&log, &trainer.logs, timestamps)?;
        println!("wrote {}", log.display());
    }
    Ok(())
}

fn read_checkpoint(weights: &Path) -> anyhow::Result<Checkpoint> {
    let path = Checkpoint::sidecar_path(weights);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| invalid(format!("{}: cannot read model sidecar: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn eval(a: EvalArgs) -> anyhow::Result<()> {
    require_file("--manifest", &a.manifest)?;
    require_file("--weights", &a.weights)?;
    let dataset = load_manifest(&a.manifest)?.load_dataset()?;
    let meta = read_checkpoint(&a.weights)?;
    let model = Model::build(meta.model.clone())?.with_params(load_weights(&a.weights)?)?;
    let cm = evaluate(&model, &dataset, 4)?;
    let report = MetricsReport::from_confusion(&cm, &dataset.classes)?;
    print!("{}", report.to_table());
    if let Some(p) = a.json {
        let doc = json!({
            "model": meta.model,
            "weights": a.weights,
            "manifest": a.manifest,
            "samples": dataset.len(),
            "metrics": report,
            "confusion": cm,
        });
        write_text(&p, &(serde_json::to_string_pretty(&doc)? + "\n"))?;
    }
    Ok(())
}

fn bench(a: BenchArgs) -> anyhow::Result<()> {
    let cfg = a.model.config(a.classes);
    let model = Model::build(cfg.clone())?;
    let model = match &a.weights {
        Some(w) => {
            require_file("--weights", w)?;
            model.with_params(load_weights(w)?)?
        }
        None => model.init_weights(a.seed),
    };
    let bench_cfg = BenchConfig {
        frames_per_round: a.frames,
        rounds: a.rounds,
        warmup_frames: a.warmup,
        input_shape: Shape::new(1, cfg.input_channels, a.input, a.input),
        power_watts: a.power_watts,
        threads: a.threads,
        seed: a.seed,
    };
    let report = run_bench(&model, &bench_cfg)?;
    print!("{}", report.to_table());
    if let Some(p) = a.json {
        write_text(&p, &(report.to_json() + "\n"))?;
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> anyhow::Result<()> {
    if !(a.tolerance.is_finite() && a.tolerance > 0.0) {
        return Err(invalid(format!("--tolerance must be positive, got {}", a.tolerance)));
    }
    let cfg = GradCheckConfig {
        tolerance: a.tolerance,
        ..Default::default()
    };
    let reports = match a.target {
        Target::Ops => suite_ops(a.seed, &cfg),
        Target::Blocks => suite_blocks(a.seed, &cfg),
        Target::Model => suite_model(a.seed, &cfg),
    };
    for r in &reports {
        println!("{}", r.summary_line());
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    println!("seed {}: {} of {} checks passed", a.seed, reports.len() - failed, reports.len());
    if failed > 0 {
        bail!("{failed} gradient check(s) failed");
    }
    Ok(())
}

/// The error chain joined with ": ", leaving out causes whose text the
/// previous message already contains.
fn render_error(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

/// 1 when any error in the chain marks an invalid request, else 2.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        let validation = if cause.is::<Invalid>() {
            Some(true)
        } else if let Some(e) = cause.downcast_ref::<lightseg::Error>() {
            Some(e.is_validation())
        } else if let Some(e) = cause.downcast_ref::<TrainError>() {
            Some(e.is_validation())
        } else if let Some(e) = cause.downcast_ref::<DataError>() {
            Some(e.is_validation())
        } else if let Some(e) = cause.downcast_ref::<BenchError>() {
            Some(e.is_validation())
        } else if cause.is::<ModelError>() || cause.is::<MetricsError>() {
            Some(true)
        } else if cause.is::<WeightFileError>() {
            Some(false)
        } else {
            None
        };
        if let Some(v) = validation {
            return if v { 1 } else { 2 };
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let timestamps = !cli.no_timestamps;
    let result = match cli.command {
        Command::Profile(a) => profile(a),
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a, timestamps),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => bench(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", render_error(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
