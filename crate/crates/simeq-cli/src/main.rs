//! `simeq`: generate toy datasets, train completion models, complete scans,
//! evaluate under the de-biased protocol, and audit empirical equivariance.
//!
//! Exit codes: 0 success, 2 usage or input problems, 3 numerical failure
//! during training, 4 a configured threshold gate failed.

mod manifest;

use clap::{Args, Parser, Subcommand, ValueEnum};
use simeq_core::audit::{audit_completer, audit_model, bias_sweep, EquivarianceAuditReport};
use simeq_core::geometry::{self_normalize, apply_transform, PointCloud, TransformDistribution};
use simeq_core::io;
use simeq_core::metrics::{run_protocol, MetricsReport, ProtocolConfig};
use simeq_core::model::{AnyModel, Completer, ModelConfig, ModelKind};
use simeq_core::toy::{self, ToyDatasetConfig};
use simeq_core::train::{TrainConfig, Trainer, TrainerState};
use simeq_core::Scalar;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const EXIT_USAGE: u8 = 2;
const EXIT_NUMERIC: u8 = 3;
const EXIT_THRESHOLD: u8 = 4;

#[derive(Parser)]
#[command(name = "simeq", version, about = "SIM(3)-equivariant point-cloud completion")]
struct Cli {
    /// Worker threads (default: SIMEQ_THREADS, else all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a toy dataset of (partial, complete) pairs
    Gen(GenArgs),
    /// Train a completion model
    Train(TrainArgs),
    /// Complete a partial scan with a trained checkpoint
    Complete(CompleteArgs),
    /// Evaluate a checkpoint under the de-biased protocol
    Eval(EvalArgs),
    /// Audit empirical SIM(3) equivariance of a checkpoint
    Audit(AuditArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum GroupArg {
    Identity,
    So3,
    Se3,
    Sim3,
}

impl GroupArg {
    fn distribution(self, seed: u64) -> TransformDistribution {
        match self {
            GroupArg::Identity => TransformDistribution::identity(seed),
            GroupArg::So3 => TransformDistribution::so3(seed),
            GroupArg::Se3 => TransformDistribution::se3(seed),
            GroupArg::Sim3 => TransformDistribution::sim3(seed),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum PresetArg {
    Tiny,
    Desk,
    Full,
}

impl PresetArg {
    fn config(self) -> ModelConfig {
        match self {
            PresetArg::Tiny => ModelConfig::tiny(),
            PresetArg::Desk => ModelConfig::desk(),
            PresetArg::Full => ModelConfig::full(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ModelArg {
    Equivariant,
    ScalarControl,
}

impl ModelArg {
    fn kind(self) -> ModelKind {
        match self {
            ModelArg::Equivariant => ModelKind::Equivariant,
            ModelArg::ScalarControl => ModelKind::ScalarControl,
        }
    }
}

#[derive(Args)]
struct GenArgs {
    /// Shape/crop spec file (JSON); defaults to the built-in mixed library
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Number of pairs to generate
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output dataset directory
    #[arg(long)]
    out: PathBuf,
    /// Points per partial input (overrides the shape file)
    #[arg(long)]
    n_in: Option<usize>,
    /// Points per complete cloud (overrides the shape file)
    #[arg(long)]
    n_out: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory produced by `gen`
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = PresetArg::Desk)]
    preset: PresetArg,
    #[arg(long, value_enum, default_value_t = ModelArg::Equivariant)]
    model: ModelArg,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Bias norm on linear maps (0 keeps the model exactly equivariant)
    #[arg(long)]
    bias_norm: Option<f64>,
    /// Fraction of pairs held out for validation
    #[arg(long, default_value_t = 0.125)]
    val_fraction: f64,
    /// Checkpoint directory (also receives the JSONL training log)
    #[arg(long)]
    out: PathBuf,
    /// Continue a run previously interrupted in the same directory
    #[arg(long, default_value_t = false)]
    resume: bool,
}

#[derive(Args)]
struct CompleteArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Partial input (.xyz or .ply)
    #[arg(long)]
    input: PathBuf,
    /// Dense output path (.xyz or .ply by extension)
    #[arg(long)]
    out: PathBuf,
    /// Optional coarse output path
    #[arg(long)]
    coarse_out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = GroupArg::Sim3)]
    group: GroupArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report path (JSON)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Optional per-sample CSV path
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long, default_value_t = false)]
    fidelity: bool,
    /// Directory of reference clouds for MMD
    #[arg(long)]
    mmd_refs: Option<PathBuf>,
    /// Gate: fail (exit 4) when CD-l1 x1000 exceeds this
    #[arg(long)]
    max_cd: Option<f64>,
}

#[derive(Args)]
struct AuditArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value_t = 200)]
    trials: usize,
    #[arg(long, value_enum, default_value_t = GroupArg::Sim3)]
    group: GroupArg,
    /// Override the group's lower scale bound (log-uniform sampling)
    #[arg(long)]
    scale_lo: Option<f64>,
    /// Override the group's upper scale bound
    #[arg(long)]
    scale_hi: Option<f64>,
    /// Override the translation cube half-width
    #[arg(long)]
    translation: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Scale factor applied to every bias magnitude before auditing
    #[arg(long, default_value_t = 1.0)]
    bias_scale: f64,
    /// Also sweep bias scales {1, 0.1, 0.01, 0}
    #[arg(long, default_value_t = false)]
    sweep: bool,
    /// Audit input cloud; defaults to a synthetic sphere scan
    #[arg(long)]
    input: Option<PathBuf>,
    /// Report path (JSON)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-trial plot data (CSV: scale, translation norm, error)
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Gate: fail (exit 4) when the max end-to-end error exceeds this
    #[arg(long)]
    max_error: Option<f64>,
}

enum CliError {
    Usage(String),
    Numeric(String),
    Threshold(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Numeric(_) => EXIT_NUMERIC,
            CliError::Threshold(_) => EXIT_THRESHOLD,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Numeric(m) | CliError::Threshold(m) => m,
        }
    }
}

fn usage<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Usage(e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = cli.threads.or_else(|| {
        std::env::var("SIMEQ_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    if let Some(t) = threads {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t.max(1)).build_global();
    }
    let result = match cli.cmd {
        Cmd::Gen(args) => cmd_gen(args),
        Cmd::Train(args) => cmd_train(args),
        Cmd::Complete(args) => cmd_complete(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Audit(args) => cmd_audit(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn cmd_gen(args: GenArgs) -> Result<(), CliError> {
    if args.n == 0 {
        return Err(CliError::Usage("--n must be at least 1".into()));
    }
    let mut manifest = manifest::RunManifest::start("gen", args.seed);
    let mut cfg: ToyDatasetConfig = match &args.spec {
        Some(path) => {
            manifest.add_input(path);
            io::read_json(path).map_err(usage)?
        }
        None => ToyDatasetConfig {
            schema_version: 1,
            shapes: toy::default_shapes(),
            n_in: 256,
            n_out: 1024,
        },
    };
    if let Some(n_in) = args.n_in {
        cfg.n_in = n_in;
    }
    if let Some(n_out) = args.n_out {
        cfg.n_out = n_out;
    }
    manifest.set_config(&cfg);
    let pairs = toy::generate_toy_dataset::<Scalar>(&cfg, args.n, args.seed).map_err(usage)?;
    io::save_dataset(&args.out, &pairs, args.seed).map_err(usage)?;
    manifest.finish(&args.out.join("run_manifest.json")).map_err(usage)?;
    println!("wrote {} pairs to {}", pairs.len(), args.out.display());
    Ok(())
}

fn load_model(ckpt: &Path) -> Result<AnyModel<Scalar>, CliError> {
    if !ckpt.join("model.json").is_file() {
        return Err(CliError::Usage(format!(
            "no checkpoint at {} (missing model.json)",
            ckpt.display()
        )));
    }
    io::load_checkpoint(ckpt).map_err(usage)
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let mut manifest = manifest::RunManifest::start("train", args.seed);
    manifest.add_input(&args.data.join("dataset.json"));
    let pairs = io::load_dataset::<Scalar>(&args.data).map_err(usage)?;
    let val_len = ((pairs.len() as f64 * args.val_fraction).round() as usize)
        .clamp(1, pairs.len().saturating_sub(1).max(1));
    let split = pairs.len() - val_len;
    if split == 0 {
        return Err(CliError::Usage("dataset too small to split train/val".into()));
    }
    let (train_pairs, val_pairs) = pairs.split_at(split);

    let mut model_cfg = args.preset.config().with_seed(args.seed);
    if let Some(b) = args.bias_norm {
        model_cfg = model_cfg.with_bias_norm(b);
    }
    let mut train_cfg = TrainConfig {
        seed: args.seed,
        ..TrainConfig::default()
    };
    if let Some(e) = args.epochs {
        train_cfg.epochs = e;
    }
    if let Some(lr) = args.lr {
        train_cfg.learning_rate = lr;
    }
    if let Some(b) = args.batch_size {
        train_cfg.batch_size = b;
    }
    manifest.set_config(&(&model_cfg, &train_cfg, args.model.kind()));

    std::fs::create_dir_all(&args.out).map_err(usage)?;
    let log_path = args.out.join("train_log.jsonl");
    let state_path = args.out.join("trainer_state.json");

    let mut model;
    let mut trainer;
    if args.resume && state_path.is_file() {
        model = load_model(&args.out)?;
        trainer = Trainer::new(&model, train_pairs, val_pairs, train_cfg).map_err(usage)?;
        let state: TrainerState = io::read_json(&state_path).map_err(usage)?;
        trainer.restore(&state).map_err(usage)?;
    } else {
        model = AnyModel::build(args.model.kind(), model_cfg).map_err(usage)?;
        trainer = Trainer::new(&model, train_pairs, val_pairs, train_cfg).map_err(usage)?;
        let _ = std::fs::remove_file(&log_path);
        // epoch-zero checkpoint: lets downstream commands run without training
        io::save_checkpoint(&args.out, &model).map_err(usage)?;
    }

    while !trainer.done() {
        match trainer.epoch(&mut model) {
            Ok(record) => {
                io::save_checkpoint(&args.out, &model).map_err(usage)?;
                io::write_json(&state_path, &trainer.state()).map_err(usage)?;
                io::append_jsonl(&log_path, &record).map_err(usage)?;
                println!(
                    "epoch {:>3}  lr {:.3e}  train_loss {:.6}  val_cd_l1_x1000 {:.3}  ({:.1}s)",
                    record.epoch, record.lr, record.train_loss, record.val_cd_l1_x1000, record.wall_seconds
                );
            }
            Err(simeq_core::train::TrainError::Diverged { epoch }) => {
                // the last good checkpoint is already on disk
                return Err(CliError::Numeric(format!(
                    "loss diverged at epoch {epoch}; last good checkpoint kept in {}",
                    args.out.display()
                )));
            }
            Err(e) => return Err(usage(e)),
        }
    }
    manifest.finish(&args.out.join("run_manifest.json")).map_err(usage)?;
    println!("checkpoint in {}", args.out.display());
    Ok(())
}

fn write_cloud_by_ext(path: &Path, pc: &PointCloud<Scalar>) -> Result<(), CliError> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("ply") => io::write_ply(path, pc).map_err(usage),
        _ => io::write_xyz(path, pc).map_err(usage),
    }
}

fn cmd_complete(args: CompleteArgs) -> Result<(), CliError> {
    let mut manifest = manifest::RunManifest::start("complete", 0);
    manifest.add_input(&args.input);
    let model = load_model(&args.ckpt)?;
    let input = io::read_cloud::<Scalar>(&args.input).map_err(usage)?;
    // deployment pipeline: normalize by the input's own statistics, run the
    // model, and map the completion back into the sensor frame
    let (normalized, back) = self_normalize(&input).map_err(usage)?;
    let (coarse_n, dense_n) = model.complete(&normalized).map_err(usage)?;
    let dense = apply_transform(&back, &dense_n);
    let coarse = apply_transform(&back, &coarse_n);
    write_cloud_by_ext(&args.out, &dense)?;
    if let Some(coarse_path) = &args.coarse_out {
        write_cloud_by_ext(coarse_path, &coarse)?;
    }
    if let Some(dir) = args.out.parent() {
        if dir.as_os_str().is_empty() {
            manifest.finish(Path::new("run_manifest.json")).map_err(usage)?;
        } else {
            manifest.finish(&dir.join("run_manifest.json")).map_err(usage)?;
        }
    }
    println!("wrote {} points to {}", dense.len(), args.out.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let mut manifest = manifest::RunManifest::start("eval", args.seed);
    manifest.add_input(&args.data.join("dataset.json"));
    let model = load_model(&args.ckpt)?;
    let pairs = io::load_dataset::<Scalar>(&args.data).map_err(usage)?;
    let mut cfg = ProtocolConfig::new(
        TransformDistribution::identity(args.seed),
        args.group.distribution(args.seed),
    );
    cfg.with_fidelity = args.fidelity;
    manifest.set_config(&cfg);

    let refs: Option<Vec<PointCloud<Scalar>>> = match &args.mmd_refs {
        Some(dir) => Some(
            io::load_dataset::<Scalar>(dir)
                .map(|pairs| pairs.into_iter().map(|p| p.gt).collect())
                .map_err(usage)?,
        ),
        None => None,
    };
    let report: MetricsReport =
        run_protocol(&model, &pairs, &cfg, refs.as_deref()).map_err(usage)?;

    println!(
        "cd_l1_x1000 {:.4}  f1@1% {:.4}{}{}",
        report.cd_l1_x1000,
        report.f1_at_1pct,
        report.fidelity.map(|f| format!("  fidelity {f:.5}")).unwrap_or_default(),
        report.mmd.map(|m| format!("  mmd {m:.5}")).unwrap_or_default(),
    );
    if let Some(out) = &args.out {
        io::write_json(out, &report).map_err(usage)?;
        if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
            manifest.finish(&dir.join("run_manifest.json")).map_err(usage)?;
        }
    }
    if let Some(csv) = &args.csv {
        io::write_metrics_csv(csv, &report.per_sample).map_err(usage)?;
    }
    if let Some(max_cd) = args.max_cd {
        if report.cd_l1_x1000 > max_cd {
            return Err(CliError::Threshold(format!(
                "cd_l1_x1000 {} exceeds the gate {max_cd}",
                report.cd_l1_x1000
            )));
        }
    }
    Ok(())
}

/// Synthetic audit input: a partial sphere scan.
fn default_audit_cloud(n: usize) -> PointCloud<Scalar> {
    let cfg = ToyDatasetConfig {
        schema_version: 1,
        shapes: toy::default_shapes(),
        n_in: n,
        n_out: (4 * n).max(64),
    };
    toy::generate_toy_dataset::<Scalar>(&cfg, 1, 12345)
        .expect("builtin shapes are valid")
        .remove(0)
        .partial
}

fn cmd_audit(args: AuditArgs) -> Result<(), CliError> {
    let mut manifest = manifest::RunManifest::start("audit", args.seed);
    let model = load_model(&args.ckpt)?;
    let mut dist = args.group.distribution(args.seed);
    if let Some(lo) = args.scale_lo {
        dist.scale_range.0 = lo;
    }
    if let Some(hi) = args.scale_hi {
        dist.scale_range.1 = hi;
    }
    if let Some(t) = args.translation {
        dist.translation_range = t;
    }
    dist.validate().map_err(usage)?;
    let input = match &args.input {
        Some(path) => {
            manifest.add_input(path);
            io::read_cloud::<Scalar>(path).map_err(usage)?
        }
        None => default_audit_cloud(model.config().n_in),
    };
    if input.len() < model.min_input() {
        return Err(CliError::Usage(format!(
            "audit input has {} points, model needs {}",
            input.len(),
            model.min_input()
        )));
    }
    manifest.set_config(&(args.trials, args.bias_scale, args.sweep, dist));

    let mut report: EquivarianceAuditReport = match model {
        AnyModel::Equivariant(mut m) => {
            m.set_bias_scale(args.bias_scale);
            let mut report = audit_model(&m, &input, &dist, args.trials).map_err(usage)?;
            if args.sweep {
                report.bias_sweep =
                    bias_sweep(&mut m, &[1.0, 0.1, 0.01, 0.0], &input, &dist, args.trials.min(50))
                        .map_err(usage)?;
            }
            report
        }
        other @ AnyModel::Control(_) => {
            // stage traces only exist for the equivariant model
            let (stats, rows) = audit_completer(&other, &input, &dist, args.trials).map_err(usage)?;
            EquivarianceAuditReport {
                per_layer_error: Vec::new(),
                end_to_end_error: stats,
                bias_sweep: Vec::new(),
                trials: args.trials,
                seed: args.seed,
                per_trial: rows,
            }
        }
    };
    report.seed = args.seed;

    println!(
        "end-to-end relative error: mean {:.3e}  max {:.3e} over {} trials",
        report.end_to_end_error.mean, report.end_to_end_error.max, report.trials
    );
    for (name, stats) in &report.per_layer_error {
        println!("  {name:<12} mean {:.3e}  max {:.3e}", stats.mean, stats.max);
    }
    for (scale, err) in &report.bias_sweep {
        println!("  bias scale {scale:<6} mean error {err:.3e}");
    }
    if let Some(out) = &args.out {
        io::write_json(out, &report).map_err(usage)?;
        if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
            manifest.finish(&dir.join("run_manifest.json")).map_err(usage)?;
        }
    }
    if let Some(csv) = &args.csv {
        io::write_audit_csv(csv, &report.per_trial).map_err(usage)?;
    }
    if let Some(max_error) = args.max_error {
        if report.end_to_end_error.max > max_error {
            return Err(CliError::Threshold(format!(
                "end-to-end max error {:.3e} exceeds the gate {max_error:.3e}",
                report.end_to_end_error.max
            )));
        }
    }
    Ok(())
}
