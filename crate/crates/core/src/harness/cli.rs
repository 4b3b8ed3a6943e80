//! `eqscan` command line.
//!
//! Exit codes: 0 suite passed, 1 suite failed, 2 usage error, 3 runtime
//! error.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::data::{load_idx, save_idx, synth_splits, Provenance, ToyDataset};
use super::gradcheck::{model_gradcheck, probe_size};
use super::metrics::{equivariance_report, Level, NmseReport};
use super::train::{evaluate, train_toy_to, EpochLog, Evaluation, Optimizer, TrainConfig};
use crate::autodiff::FdConfig;
use crate::error::{Error, Result};
use crate::network::{load_checkpoint, param_ratio, Model, ModelSpec};
use crate::tensor::{Real, Tensor};

const EXIT_FAIL: u8 = 1;
const EXIT_ERROR: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "eqscan", version, about = "p4-equivariant visual state-space checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Equivariance error of a model over a dataset.
    Verify(VerifyArgs),
    /// Reverse-mode gradients against central differences.
    Gradcheck(GradcheckArgs),
    /// Parameter accounting.
    Params(ParamsArgs),
    /// Train on a toy dataset.
    Train(TrainArgs),
    /// Accuracy of a checkpoint on a toy dataset.
    Eval(EvalArgs),
    /// Write synthetic glyph splits as IDX files.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DtypeArg {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Split {
    Train,
    Test,
    Rotated,
}

#[derive(Debug, Args)]
struct ModelSource {
    /// Checkpoint directory.
    #[arg(long, conflicts_with = "spec")]
    model: Option<PathBuf>,
    /// Spec file, or `micro` / `baseline`; weights come from its seed.
    #[arg(long)]
    spec: Option<String>,
}

#[derive(Debug, Args)]
struct IdxArgs {
    /// IDX image file.
    #[arg(long, requires = "labels")]
    images: Option<PathBuf>,
    /// IDX label file.
    #[arg(long, requires = "images")]
    labels: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthOpts {
    #[arg(long, default_value_t = 0)]
    synth_seed: u64,
    #[arg(long, default_value_t = 64)]
    n_train: usize,
    #[arg(long, default_value_t = 32)]
    n_test: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 16)]
    size: usize,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[command(flatten)]
    source: ModelSource,
    #[arg(long, value_enum, default_value = "f64")]
    dtype: DtypeArg,
    #[arg(long, value_enum, default_value = "feature")]
    level: Level,
    /// Count t = 0 in the mean.
    #[arg(long)]
    include_identity: bool,
    /// Accepted for scripts; aggregation is always in sample order.
    #[arg(long)]
    deterministic: bool,
    #[command(flatten)]
    idx: IdxArgs,
    /// Random inputs when no IDX files are given.
    #[arg(long, default_value_t = 8)]
    samples: usize,
    /// Side of random inputs; defaults to the smallest accepted side >= 16.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Pass threshold on the mean; defaults to 1e-12 (f64) or 1e-5 (f32).
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long)]
    spec: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    coords: usize,
    #[arg(long, default_value_t = 1e-6)]
    h: f64,
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ParamsArgs {
    #[arg(long)]
    spec: String,
    /// Also count the width-matched baseline.
    #[arg(long)]
    compare_baseline: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    spec: String,
    #[command(flatten)]
    idx: IdxArgs,
    #[command(flatten)]
    synth: SynthOpts,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 3e-3)]
    lr: f64,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 0.0)]
    weight_decay: f64,
    #[arg(long, value_enum, default_value = "adam")]
    optimizer: Optimizer,
    /// Shuffling seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Receives `checkpoint/` and `metrics.csv`.
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_enum, default_value = "f64")]
    dtype: DtypeArg,
    #[command(flatten)]
    idx: IdxArgs,
    #[command(flatten)]
    synth: SynthOpts,
    /// Synthetic split to score when no IDX files are given.
    #[arg(long, value_enum, default_value = "test")]
    split: Split,
    /// Required accuracy for exit 0.
    #[arg(long, default_value_t = 0.0)]
    min_accuracy: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[command(flatten)]
    synth: SynthOpts,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct VerifyOut {
    #[serde(flatten)]
    report: NmseReport,
    threshold: f64,
    pass: bool,
}

#[derive(Serialize)]
struct LayerCount {
    layer: String,
    params: usize,
}

#[derive(Serialize)]
struct ModelCount {
    equivariant: bool,
    total: usize,
    layers: Vec<LayerCount>,
}

#[derive(Serialize)]
struct ParamsOut {
    model: ModelCount,
    #[serde(skip_serializing_if = "Option::is_none")]
    baseline: Option<ModelCount>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ratio: Option<f64>,
}

#[derive(Serialize)]
struct TrainOut {
    checkpoint: PathBuf,
    epochs: Vec<EpochLog>,
    config: TrainConfig,
}

#[derive(Serialize)]
struct EvalOut {
    split: String,
    #[serde(flatten)]
    eval: Evaluation,
    min_accuracy: f64,
    pass: bool,
}

#[derive(Serialize)]
struct SynthFile {
    split: String,
    samples: usize,
    images: PathBuf,
    labels: PathBuf,
}

fn load_spec(arg: &str) -> Result<ModelSpec> {
    match arg {
        "micro" if !Path::new(arg).exists() => Ok(ModelSpec::micro()),
        "baseline" if !Path::new(arg).exists() => Ok(ModelSpec::micro().baseline()),
        path => ModelSpec::load(path),
    }
}

fn emit<S: Serialize>(value: &S, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| Error::from(e).at(dir))?;
            }
            fs::write(path, text + "\n").map_err(|e| Error::from(e).at(path))
        }
        None => {
            // A closed pipe downstream is not a failure of the run.
            let _ = writeln!(std::io::stdout().lock(), "{text}");
            Ok(())
        }
    }
}

fn random_inputs(spec: &ModelSpec, n: usize, size: usize, seed: u64) -> Result<ToyDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = Tensor::from_fn(&[n, size, size, spec.in_channels], |_| rng.gen_range(-1.0..1.0))?;
    ToyDataset::new(
        images,
        vec![0; n],
        spec.num_classes.max(1),
        Provenance::Synthetic {
            seed,
            split: "uniform".into(),
        },
    )
}

fn idx_data(idx: &IdxArgs) -> Option<Result<ToyDataset>> {
    match (&idx.images, &idx.labels) {
        (Some(i), Some(l)) => Some(load_idx(i, l)),
        _ => None,
    }
}

fn synth_data(s: &SynthOpts, split: Split) -> Result<ToyDataset> {
    let splits = synth_splits(s.synth_seed, s.n_train, s.n_test, s.classes, s.size)?;
    Ok(match split {
        Split::Train => splits.train,
        Split::Test => splits.test,
        Split::Rotated => splits.test_rotated,
    })
}

fn verify_with<T: Real>(args: &VerifyArgs, threshold: f64) -> Result<bool> {
    let model: Model<T> = match (&args.source.model, &args.source.spec) {
        (Some(dir), _) => load_checkpoint(dir)?,
        (None, Some(spec)) => Model::<f64>::build(&load_spec(spec)?)?.cast(),
        (None, None) => return Err(Error::shape("verify needs --model or --spec")),
    };
    let data = match idx_data(&args.idx) {
        Some(d) => d?,
        None => {
            let size = args.size.unwrap_or_else(|| probe_size(model.spec()));
            random_inputs(model.spec(), args.samples, size, args.seed)?
        }
    };
    let report = equivariance_report(&model, &data, args.level, args.include_identity)?;
    let pass = report.mean < threshold;
    emit(
        &VerifyOut {
            report,
            threshold,
            pass,
        },
        args.out.as_deref(),
    )?;
    Ok(pass)
}

fn verify(args: &VerifyArgs) -> Result<bool> {
    match args.dtype {
        DtypeArg::F64 => verify_with::<f64>(args, args.threshold.unwrap_or(1e-12)),
        DtypeArg::F32 => verify_with::<f32>(args, args.threshold.unwrap_or(1e-5)),
    }
}

fn gradcheck(args: &GradcheckArgs) -> Result<bool> {
    let spec = load_spec(&args.spec)?;
    let report = model_gradcheck(
        &spec,
        FdConfig {
            h: args.h,
            coords: args.coords,
            seed: args.seed,
        },
    )?;
    let pass = report.passes(args.tol);
    emit(&report, args.out.as_deref())?;
    Ok(pass)
}

fn count(spec: &ModelSpec) -> Result<ModelCount> {
    let m = Model::<f64>::build(spec)?;
    Ok(ModelCount {
        equivariant: spec.equivariant,
        total: m.param_count(),
        layers: m
            .layer_counts()
            .into_iter()
            .map(|(layer, params)| LayerCount { layer, params })
            .collect(),
    })
}

fn params(args: &ParamsArgs) -> Result<bool> {
    let spec = load_spec(&args.spec)?;
    let model = count(&spec)?;
    let (baseline, ratio) = if args.compare_baseline {
        let (_, _, ratio) = param_ratio(&spec)?;
        let base = if spec.equivariant { spec.baseline() } else { spec.clone() };
        (Some(count(&base)?), Some(ratio))
    } else {
        (None, None)
    };
    emit(
        &ParamsOut {
            model,
            baseline,
            ratio,
        },
        args.out.as_deref(),
    )?;
    Ok(true)
}

fn train(args: &TrainArgs) -> Result<bool> {
    let spec = load_spec(&args.spec)?;
    let data = match idx_data(&args.idx) {
        Some(d) => d?,
        None => synth_data(&args.synth, Split::Train)?,
    };
    let cfg = TrainConfig {
        epochs: args.epochs,
        lr: args.lr,
        batch: args.batch,
        weight_decay: args.weight_decay,
        optimizer: args.optimizer,
        seed: args.seed,
    };
    let out = train_toy_to(&spec, &data, &cfg, &args.out_dir)?;
    emit(
        &TrainOut {
            checkpoint: args.out_dir.join("checkpoint"),
            epochs: out.log,
            config: cfg,
        },
        args.out.as_deref(),
    )?;
    Ok(true)
}

fn eval_with<T: Real>(args: &EvalArgs) -> Result<bool> {
    let model: Model<T> = load_checkpoint(&args.model)?;
    let (split, data) = match idx_data(&args.idx) {
        Some(d) => ("idx".to_string(), d?),
        None => (
            format!("{:?}", args.split).to_lowercase(),
            synth_data(&args.synth, args.split)?,
        ),
    };
    let eval = evaluate(&model, &data)?;
    let pass = eval.accuracy >= args.min_accuracy;
    emit(
        &EvalOut {
            split,
            eval,
            min_accuracy: args.min_accuracy,
            pass,
        },
        args.out.as_deref(),
    )?;
    Ok(pass)
}

fn synth(args: &SynthArgs) -> Result<bool> {
    let s = &args.synth;
    let splits = synth_splits(s.synth_seed, s.n_train, s.n_test, s.classes, s.size)?;
    fs::create_dir_all(&args.out_dir).map_err(|e| Error::from(e).at(&args.out_dir))?;
    let mut files = Vec::new();
    for (name, data) in [
        ("train", &splits.train),
        ("test", &splits.test),
        ("test-rotated", &splits.test_rotated),
    ] {
        let images = args.out_dir.join(format!("{name}-images.idx"));
        let labels = args.out_dir.join(format!("{name}-labels.idx"));
        save_idx(data, &images, &labels)?;
        files.push(SynthFile {
            split: name.into(),
            samples: data.len(),
            images,
            labels,
        });
    }
    emit(&files, args.out.as_deref())?;
    Ok(true)
}

/// Parse `args` (program name first) and run one subcommand.
pub fn run_from<I, S>(args: I) -> ExitCode
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let result = match &cli.command {
        Command::Verify(a) => verify(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Params(a) => params(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => match a.dtype {
            DtypeArg::F64 => eval_with::<f64>(a),
            DtypeArg::F32 => eval_with::<f32>(a),
        },
        Command::Synth(a) => synth(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_FAIL),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}

pub fn run() -> ExitCode {
    run_from(std::env::args_os())
}
