//! Command-line interface: synth, train, eval, score, and report.
//!
//! Exit codes: 0 on success, 1 for usage or input problems, 2 for numerical
//! failures (a covariance that stays singular through training retries).

use std::fs;
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{load_checkpoint, read_config, save_checkpoint};
use crate::dataset::synthetic::generate_synthetic_class;
use crate::dataset::{load_class, load_image, ClassDataset};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate_class, parse_records, render_heatmap, report_records, report_table,
};
use crate::numerics::scalar::{DType, Scalar};
use crate::scoring::{
    anomaly_map, build_gallery, Backend, GalleryIndex, PixelAggregation, DEFAULT_STRIDE,
};
use crate::train::{self, ModelState, TrainConfig, LOG_HEADER};

#[derive(Parser)]
#[command(
    name = "pedenet",
    version,
    about = "Patch-embedding density estimation for image anomaly localization"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic texture class in the MVTec directory layout
    Synth(SynthArgs),
    /// Train on one class and write a checkpoint plus a loss log
    Train(TrainArgs),
    /// Evaluate a checkpoint: AUROC report and a heatmap per test image
    Eval(EvalArgs),
    /// Score a single image and write its heatmap
    Score(ScoreArgs),
    /// Aggregate per-class record files into one table
    Report(ReportArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Dataset root holding one directory per class
    #[arg(long, default_value = "data")]
    data_root: PathBuf,
    /// Class to operate on
    #[arg(long = "class", default_value = "synthetic")]
    class_name: String,
}

#[derive(Args)]
struct SynthArgs {
    /// Seed fixing the texture, noise, and defects
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Dataset root to write the class under
    #[arg(long, default_value = "data")]
    out: PathBuf,
    /// Class directory name
    #[arg(long = "class", default_value = "synthetic")]
    class_name: String,
    /// Training images
    #[arg(long, default_value_t = 20)]
    n_train: usize,
    /// Test images, half of them defect-free
    #[arg(long, default_value_t = 20)]
    n_test: usize,
}

/// Training settings as optional flags layered over the defaults and any
/// `--config` file. Only flags actually given override the file.
#[derive(Args)]
struct TrainOverrides {
    /// Key=value settings file; flags override its entries
    #[arg(long)]
    config: Option<PathBuf>,
    /// Density loss weight [default: 1]
    #[arg(long)]
    lambda1: Option<f64>,
    /// Location loss weight [default: 1]
    #[arg(long)]
    lambda2: Option<f64>,
    /// Covariance regularizer weight [default: 0.005]
    #[arg(long)]
    lambda3: Option<f64>,
    /// Gaussian mixture components [default: 5]
    #[arg(long)]
    k: Option<usize>,
    /// Patches per density batch [default: 128]
    #[arg(long)]
    batch_den: Option<usize>,
    /// Neighbor pairs per location batch [default: 36]
    #[arg(long)]
    batch_lp_pairs: Option<usize>,
    /// Adam learning rate [default: 0.0001]
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Optimization steps [default: 5000]
    #[arg(long)]
    steps: Option<usize>,
    /// Seed for parameter init and batch sampling [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Neighbor-pair jitter in pixels [default: 8]
    #[arg(long)]
    jitter: Option<usize>,
    /// EMA decay for the mixture statistics [default: 0.99]
    #[arg(long)]
    ema_decay: Option<f64>,
    /// Likelihood normalizer: standard or sqrt2pi [default: standard]
    #[arg(long)]
    normalizer: Option<String>,
    /// Density reduction: mean_log or log_sum [default: mean_log]
    #[arg(long)]
    reduction: Option<String>,
    /// Parameter precision: 32 or 64 [default: 32]
    #[arg(long)]
    dtype: Option<String>,
}

impl TrainOverrides {
    fn apply(&self, config: &mut TrainConfig) -> Result<()> {
        let mut set = |key: &str, value: Option<String>| match value {
            Some(v) => config.apply_pair(key, &v),
            None => Ok(()),
        };
        set("lambda1", self.lambda1.map(|v| v.to_string()))?;
        set("lambda2", self.lambda2.map(|v| v.to_string()))?;
        set("lambda3", self.lambda3.map(|v| v.to_string()))?;
        set("k", self.k.map(|v| v.to_string()))?;
        set("batch_den", self.batch_den.map(|v| v.to_string()))?;
        set("batch_lp_pairs", self.batch_lp_pairs.map(|v| v.to_string()))?;
        set("learning_rate", self.learning_rate.map(|v| v.to_string()))?;
        set("steps", self.steps.map(|v| v.to_string()))?;
        set("seed", self.seed.map(|v| v.to_string()))?;
        set("jitter", self.jitter.map(|v| v.to_string()))?;
        set("ema_decay", self.ema_decay.map(|v| v.to_string()))?;
        set("normalizer", self.normalizer.clone())?;
        set("reduction", self.reduction.clone())?;
        // Accept f32/f64 spellings alongside the stored 32/64 form.
        set("dtype", self.dtype.as_ref().map(|v| v.trim_start_matches('f').to_string()))?;
        Ok(())
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Output directory; the run lands in <out>/<class>
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Checkpoint path [default: <out>/<class>/checkpoint.ckpt]
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    overrides: TrainOverrides,
}

/// Scoring settings shared by eval and score.
#[derive(Args)]
struct ScoreOpts {
    /// Patch grid stride in pixels; must divide 192 [default: 16]
    #[arg(long)]
    stride: Option<usize>,
    /// Nearest-neighbor backend: exact or approx [default: exact]
    #[arg(long)]
    backend: Option<String>,
    /// Pixel aggregation over covering patches: mean or max [default: mean]
    #[arg(long)]
    aggregation: Option<String>,
    /// Key=value settings file; flags override its entries
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ScoreOpts {
    fn resolve(&self) -> Result<(usize, Backend, PixelAggregation)> {
        let file = match &self.config {
            Some(p) => read_config_file(p)?,
            None => FileConfig::default(),
        };
        let stride = match self.stride {
            Some(s) => s,
            None => file.stride.unwrap_or(DEFAULT_STRIDE),
        };
        let backend = match &self.backend {
            Some(s) => Backend::parse(s).ok_or_else(|| {
                Error::InvalidArgument(format!("backend must be exact or approx, got {s}"))
            })?,
            None => file.backend.unwrap_or(Backend::Exact),
        };
        let aggregation = match &self.aggregation {
            Some(s) => PixelAggregation::parse(s).ok_or_else(|| {
                Error::InvalidArgument(format!("aggregation must be mean or max, got {s}"))
            })?,
            None => PixelAggregation::Mean,
        };
        Ok((stride, backend, aggregation))
    }
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Output directory; the run lands in <out>/<class>
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Checkpoint to evaluate [default: <out>/<class>/checkpoint.ckpt]
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    opts: ScoreOpts,
}

#[derive(Args)]
struct ScoreArgs {
    /// Image file to score
    image: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Checkpoint to score with [default: out/<class>/checkpoint.ckpt]
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output heatmap path
    #[arg(long, default_value = "heatmap.png")]
    out: PathBuf,
    #[command(flatten)]
    opts: ScoreOpts,
}

#[derive(Args)]
struct ReportArgs {
    /// Record files written by eval, one per class
    #[arg(required = true)]
    records: Vec<PathBuf>,
    /// Also write the table to this path
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parsed key=value settings file: training fields plus scoring knobs.
#[derive(Default)]
struct FileConfig {
    train: TrainConfig,
    stride: Option<usize>,
    backend: Option<Backend>,
}

fn read_config_file(path: &Path) -> Result<FileConfig> {
    let text = fs::read_to_string(path).map_err(|e| {
        Error::InvalidArgument(format!("cannot read config {}: {e}", path.display()))
    })?;
    let mut out = FileConfig::default();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::InvalidArgument(format!("config line without '=': {line:?}"))
        })?;
        let (key, value) = (key.trim(), value.trim());
        match key {
            "stride" => {
                out.stride = Some(value.parse().map_err(|_| {
                    Error::InvalidArgument(format!("bad value for stride: {value}"))
                })?)
            }
            "backend" => {
                out.backend = Some(Backend::parse(value).ok_or_else(|| {
                    Error::InvalidArgument(format!(
                        "backend must be exact or approx, got {value}"
                    ))
                })?)
            }
            _ => out.train.apply_pair(key, value)?,
        }
    }
    Ok(out)
}

fn dtype_from_pairs(pairs: &[(String, String)]) -> Result<DType> {
    let value = pairs
        .iter()
        .find(|(k, _)| k == "dtype")
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| Error::IncompatibleCheckpoint("config block lacks dtype".into()))?;
    match value {
        "32" => Ok(DType::F32),
        "64" => Ok(DType::F64),
        other => Err(Error::IncompatibleCheckpoint(format!("unknown dtype {other}"))),
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| {
        Error::InvalidArgument(format!("cannot create directory {}: {e}", path.display()))
    })
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    create_dir(&args.out)?;
    let ds = generate_synthetic_class(
        &args.out,
        &args.class_name,
        args.seed,
        args.n_train,
        args.n_test,
    )
    .map_err(|e| match e {
        Error::Io(io) => Error::InvalidArgument(format!(
            "cannot write class under {}: {io}",
            args.out.display()
        )),
        other => other,
    })?;
    let defective = ds.test.iter().filter(|t| t.label == 1).count();
    println!(
        "wrote {} train and {} test images ({} defective) under {}",
        ds.train.len(),
        ds.test.len(),
        defective,
        args.out.join(&args.class_name).display()
    );
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut config = match &args.overrides.config {
        Some(p) => read_config_file(p)?.train,
        None => TrainConfig::default(),
    };
    args.overrides.apply(&mut config)?;
    config.validate()?;
    let dataset = load_class(&args.data.data_root, &args.data.class_name)?;
    let run_dir = args.out.join(&args.data.class_name);
    create_dir(&run_dir)?;
    let ckpt = args
        .checkpoint
        .clone()
        .unwrap_or_else(|| run_dir.join("checkpoint.ckpt"));
    match config.dtype {
        DType::F32 => run_train::<f32>(&dataset, config, &ckpt, &run_dir.join("loss.log")),
        DType::F64 => run_train::<f64>(&dataset, config, &ckpt, &run_dir.join("loss.log")),
    }
}

fn run_train<S: Scalar>(
    dataset: &ClassDataset,
    config: TrainConfig,
    ckpt: &Path,
    log_path: &Path,
) -> Result<()> {
    let mut log = BufWriter::new(fs::File::create(log_path)?);
    writeln!(log, "{LOG_HEADER}")?;
    println!("{LOG_HEADER}");
    let echo = (config.steps / 10).max(1);
    let state = train::train::<S>(dataset, config, |_, record| {
        writeln!(log, "{}", train::log_line(record))?;
        if record.step % echo as u64 == 0 || record.step == config.steps as u64 {
            println!("{}", train::log_line(record));
        }
        Ok(())
    })?;
    log.flush()?;
    save_checkpoint(&state, ckpt)?;
    println!("checkpoint: {}", ckpt.display());
    println!("loss log: {}", log_path.display());
    Ok(())
}

fn require_checkpoint(explicit: &Option<PathBuf>, run_dir: &Path) -> Result<PathBuf> {
    let path = explicit
        .clone()
        .unwrap_or_else(|| run_dir.join("checkpoint.ckpt"));
    if !path.is_file() {
        return Err(Error::InvalidArgument(format!(
            "missing checkpoint {}",
            path.display()
        )));
    }
    Ok(path)
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let (stride, backend, aggregation) = args.opts.resolve()?;
    let dataset = load_class(&args.data.data_root, &args.data.class_name)?;
    let run_dir = args.out.join(&args.data.class_name);
    let ckpt = require_checkpoint(&args.checkpoint, &run_dir)?;
    create_dir(&run_dir)?;
    match dtype_from_pairs(&read_config(&ckpt)?)? {
        DType::F32 => run_eval::<f32>(&dataset, &ckpt, &run_dir, stride, backend, aggregation),
        DType::F64 => run_eval::<f64>(&dataset, &ckpt, &run_dir, stride, backend, aggregation),
    }
}

fn run_eval<S: Scalar>(
    dataset: &ClassDataset,
    ckpt: &Path,
    run_dir: &Path,
    stride: usize,
    backend: Backend,
    aggregation: PixelAggregation,
) -> Result<()> {
    let state: ModelState<S> = load_checkpoint(ckpt)?;
    let gallery = build_gallery(&state.pe, &dataset.train, stride)?;
    let index = GalleryIndex::new(gallery, backend);
    let (report, maps) = evaluate_class(&state.pe, &index, dataset, aggregation)?;
    let heat_dir = run_dir.join("heatmaps");
    create_dir(&heat_dir)?;
    for (i, (t, map)) in dataset.test.iter().zip(&maps).enumerate() {
        render_heatmap(&t.image, map, &heat_dir.join(format!("{i:03}_{}.png", t.kind)))?;
    }
    let table = report_table(std::slice::from_ref(&report));
    fs::write(run_dir.join("report.txt"), &table)?;
    fs::write(run_dir.join("report.records"), report_records(&report))?;
    print!("{table}");
    println!("heatmaps: {}", heat_dir.display());
    Ok(())
}

fn cmd_score(args: &ScoreArgs) -> Result<()> {
    let (stride, backend, aggregation) = args.opts.resolve()?;
    if !args.image.is_file() {
        return Err(Error::InvalidArgument(format!(
            "missing image {}",
            args.image.display()
        )));
    }
    let image = load_image(&args.image)?;
    let dataset = load_class(&args.data.data_root, &args.data.class_name)?;
    let run_dir = PathBuf::from("out").join(&args.data.class_name);
    let ckpt = require_checkpoint(&args.checkpoint, &run_dir)?;
    match dtype_from_pairs(&read_config(&ckpt)?)? {
        DType::F32 => {
            run_score::<f32>(&dataset, &ckpt, &image, &args.out, stride, backend, aggregation)
        }
        DType::F64 => {
            run_score::<f64>(&dataset, &ckpt, &image, &args.out, stride, backend, aggregation)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn run_score<S: Scalar>(
    dataset: &ClassDataset,
    ckpt: &Path,
    image: &crate::dataset::Image,
    out: &Path,
    stride: usize,
    backend: Backend,
    aggregation: PixelAggregation,
) -> Result<()> {
    let state: ModelState<S> = load_checkpoint(ckpt)?;
    let gallery = build_gallery(&state.pe, &dataset.train, stride)?;
    let index = GalleryIndex::new(gallery, backend);
    let map = anomaly_map(&state.pe, &index, image, aggregation)?;
    render_heatmap(image, &map, out)?;
    println!("image_score={}", map.image_score);
    println!("heatmap: {}", out.display());
    Ok(())
}

fn cmd_report(args: &ReportArgs) -> Result<()> {
    let mut reports = Vec::with_capacity(args.records.len());
    for path in &args.records {
        let text = fs::read_to_string(path).map_err(|e| {
            Error::InvalidArgument(format!("cannot read records {}: {e}", path.display()))
        })?;
        reports.push(parse_records(&text)?);
    }
    let table = report_table(&reports);
    if let Some(out) = &args.out {
        fs::write(out, &table)?;
    }
    print!("{table}");
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Score(a) => cmd_score(a),
        Command::Report(a) => cmd_report(a),
    }
}

/// Parse the process arguments, run the command, and return the exit code.
pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
