//! `renalseg`: batch front end for preprocessing, training, prediction,
//! post-processing, ensembling and evaluation.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use renalseg::volcore::Dims;

#[derive(Debug, Parser)]
#[command(name = "renalseg", version, about = "Cascaded 3D U-Net kidney and tumor segmentation")]
struct Cli {
    /// Worker threads for per-case work.
    #[arg(long, global = true, env = "RENALSEG_JOBS", default_value_t = 1)]
    jobs: usize,
    /// Log more (-v info, -vv debug). RUST_LOG overrides.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic kidney/tumor dataset with a manifest.
    Phantom(PhantomArgs),
    /// Resample, pad, resize and normalize every case of a manifest.
    Preprocess(PreprocessArgs),
    /// Train the localization, whole-region and tumor networks.
    Train(TrainArgs),
    /// Write whole/tumor/localization probability maps per case.
    Predict(PredictArgs),
    /// Threshold, refine, merge and gate probability maps into label maps.
    Postprocess(PostprocessArgs),
    /// Average the probability maps of several prediction directories.
    Ensemble(EnsembleArgs),
    /// Dice scores of label maps against ground truth, as CSV.
    Evaluate(EvaluateArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
}

fn parse_dims(s: &str) -> Result<Dims, String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    match v[..] {
        [w, h, d] if w > 0 && h > 0 && d > 0 => Ok(Dims::new(w, h, d)),
        _ => Err("expected three positive integers W,H,D".into()),
    }
}

fn parse_overlap(s: &str) -> Result<Dims, String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    match v[..] {
        [w, h, d] => Ok(Dims::new(w, h, d)),
        _ => Err("expected three integers W,H,D".into()),
    }
}

fn parse_spacing(s: &str) -> Result<[f64; 3], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    v.try_into().map_err(|_| "expected three spacings X,Y,Z".to_string())
}

#[derive(Debug, Args)]
struct PhantomArgs {
    /// Output directory; receives images/, labels/ and manifest.txt.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    count: usize,
    /// Volume dims W,H,D.
    #[arg(long, value_parser = parse_dims, default_value = "16,16,8")]
    dims: Dims,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Standard deviation of the additive Gaussian noise.
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
}

#[derive(Debug, Args)]
struct PreprocessArgs {
    /// Manifest of raw cases.
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory; receives images/, labels/, plans/ and manifest.txt.
    #[arg(long)]
    out: PathBuf,
    /// Final dims are 256x256x128 divided by this.
    #[arg(long, default_value_t = 16, conflicts_with = "final_dims")]
    divisor: usize,
    /// Explicit final dims W,H,D.
    #[arg(long, value_parser = parse_dims)]
    final_dims: Option<Dims>,
    /// Common voxel spacing X,Y,Z in mm.
    #[arg(long, value_parser = parse_spacing, default_value = "1,1,1")]
    spacing: [f64; 3],
    /// Apply a 3x3x3 median filter before normalization.
    #[arg(long)]
    median: bool,
}

#[derive(Debug, Args)]
struct NetArgs {
    /// W-Net/T-Net encoder depth.
    #[arg(long, default_value_t = 2)]
    depth: usize,
    /// W-Net/T-Net channels at the first level.
    #[arg(long, default_value_t = 4)]
    base: usize,
    #[arg(long, default_value_t = 1)]
    lnet_depth: usize,
    #[arg(long, default_value_t = 4)]
    lnet_base: usize,
    /// L-Net input is the image block-averaged by this factor.
    #[arg(long, default_value_t = 2)]
    lnet_factor: usize,
    /// Patch shape W,H,D; defaults to the whole volume.
    #[arg(long, value_parser = parse_dims)]
    patch: Option<Dims>,
    /// Patch overlap W,H,D.
    #[arg(long, value_parser = parse_overlap, default_value = "0,0,0")]
    overlap: Dims,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Manifest of preprocessed cases.
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory for the model bundle and logs.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    /// Epochs for the localization net; defaults to --epochs.
    #[arg(long)]
    lnet_epochs: Option<usize>,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    /// L2 penalty on convolution kernels.
    #[arg(long, default_value_t = 1e-5)]
    l2: f64,
    /// Maximum augmentation rotation in degrees; 0 disables it.
    #[arg(long, default_value_t = 1.0)]
    rotation: f64,
    /// Random patches per case and epoch instead of the full grid.
    #[arg(long)]
    patches_per_case: Option<usize>,
    /// Manifest of validation cases driving the schedule.
    #[arg(long, conflicts_with = "folds")]
    val_manifest: Option<PathBuf>,
    /// Run k-fold cross-validation and write cv.csv instead of one model.
    #[arg(long)]
    folds: Option<usize>,
    #[command(flatten)]
    net: NetArgs,
}

#[derive(Debug, Args)]
struct PredictArgs {
    /// Model bundle directory written by `train`.
    #[arg(long)]
    model: PathBuf,
    /// Manifest of preprocessed cases.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct PolicyArgs {
    /// Global threshold T.
    #[arg(long, default_value_t = 0.5)]
    threshold: f32,
    #[arg(long, default_value_t = 0.1)]
    whole_fallback: f32,
    #[arg(long, default_value_t = 0.4)]
    whole_low: f32,
    #[arg(long, default_value_t = 0.1)]
    tumor_empty_low: f32,
    #[arg(long, default_value_t = 0.2)]
    tumor_small_low: f32,
    #[arg(long, default_value_t = 0.3)]
    tumor_default_low: f32,
    /// Small-tumor cutoff in voxels; defaults to 100 scaled by volume size
    /// relative to 256x256x128.
    #[arg(long)]
    small_cutoff: Option<usize>,
    #[arg(long, default_value_t = 0.5)]
    loc_threshold: f32,
}

#[derive(Debug, Args)]
struct PostprocessArgs {
    /// Directory written by `predict` or `ensemble`.
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    policy: PolicyArgs,
}

#[derive(Debug, Args)]
struct EnsembleArgs {
    /// Prediction directories to average.
    #[arg(long, num_args = 1.., required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Directory of label maps written by `postprocess`.
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth manifest.
    #[arg(long)]
    manifest: PathBuf,
    /// Per-case metrics CSV.
    #[arg(long)]
    out: PathBuf,
    /// Per-region summary CSV.
    #[arg(long)]
    summary: Option<PathBuf>,
    /// Map predictions back to original geometry with these plan files
    /// before scoring against an original-geometry manifest.
    #[arg(long)]
    plan_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    seeds: u64,
    /// Central-difference step.
    #[arg(long, default_value_t = renalseg::gradcheck::DEFAULT_STEP)]
    step: f64,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = renalseg::gradcheck::DEFAULT_TOLERANCE)]
    tolerance: f64,
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    init_logging(cli.verbose);
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
