//! `dpdefocus`: synthesize dual-pixel pairs, estimate COC maps, fit and run
//! the multi-branch deblurring model, score results and crop datasets.

mod commands;
mod config;
mod crop;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dpdefocus::imgcore::BitDepth;

/// Exit codes: 0 success, 2 I/O, 3 validation, 4 non-convergence.
pub const EXIT_IO: u8 = 2;
pub const EXIT_INVALID: u8 = 3;
pub const EXIT_NOT_CONVERGED: u8 = 4;

#[derive(Parser, Debug)]
#[command(name = "dpdefocus", version, about = "Dual-pixel defocus estimation and deblurring")]
struct Cli {
    /// Bit depth of PNG outputs.
    #[arg(long, global = true, default_value_t = 16, value_parser = parse_bits)]
    bits: u32,
    #[command(subcommand)]
    cmd: Command,
}

fn parse_bits(s: &str) -> Result<u32, String> {
    match s {
        "8" => Ok(8),
        "16" => Ok(16),
        _ => Err(format!("expected 8 or 16, got {s:?}")),
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a DP pair and its ground-truth COC from a sharp image and a depth map.
    Synth(SynthArgs),
    /// Estimate a signed COC map and its confidence from a DP pair.
    EstimateCoc(EstimateArgs),
    /// Learn branch thresholds and regularization from training/validation manifests.
    Fit(FitArgs),
    /// Deblur a DP pair with a fitted model.
    Deblur(DeblurArgs),
    /// Print PSNR / SSIM / MAE of a result against its reference.
    Eval(EvalArgs),
    /// Cut a manifest's images into overlapping windows, dropping the flattest (experimental).
    Crop(CropArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub sharp: PathBuf,
    /// Depth map in millimetres (single-channel PFM).
    #[arg(long)]
    pub depth: PathBuf,
    /// Run config; its [camera] section is required.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Standard deviation of additive Gaussian noise on each view.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct EstimateArgs {
    #[arg(long)]
    pub left: PathBuf,
    #[arg(long)]
    pub right: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides `lambda` from the [estimation] section.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub val: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Model file to write.
    #[arg(long)]
    pub out: PathBuf,
    /// History CSV; defaults to the model path with a `.history.csv` suffix.
    #[arg(long)]
    pub history: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct DeblurArgs {
    #[arg(long)]
    pub left: PathBuf,
    #[arg(long)]
    pub right: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Signed COC map (PFM); estimated from the pair when absent.
    #[arg(long)]
    pub coc: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Keep only these 1-based branches, e.g. `1,4`.
    #[arg(long, value_delimiter = ',')]
    pub branches: Option<Vec<usize>>,
    /// Route every pixel to the heaviest branch.
    #[arg(long, conflicts_with = "branches")]
    pub no_masks: bool,
    /// Mask feathering sigma in pixels (0 = hard masks); overrides the config.
    #[arg(long)]
    pub feather: Option<f64>,
    /// Directory for per-branch outputs.
    #[arg(long)]
    pub emit_branches: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub result: PathBuf,
    #[arg(long)]
    pub truth: PathBuf,
    /// Write `clamp(gain * |result - truth|)` here.
    #[arg(long)]
    pub residual: Option<PathBuf>,
    #[arg(long, default_value_t = 10.0)]
    pub gain: f64,
}

#[derive(Args, Debug)]
pub struct CropArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; receives the crops and `manifest.csv`.
    #[arg(long)]
    pub out: PathBuf,
}

/// Raised by `fit` after the model is written when the search hit `max_outer`.
#[derive(Debug)]
pub struct NotConverged {
    pub rounds: usize,
}

impl std::fmt::Display for NotConverged {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "thresholds still changing after {} outer iterations (model written, flagged)", self.rounds)
    }
}

impl std::error::Error for NotConverged {}

fn exit_code(err: &anyhow::Error) -> u8 {
    use dpdefocus::Error as E;
    for cause in err.chain() {
        if cause.is::<NotConverged>() {
            return EXIT_NOT_CONVERGED;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Io { .. } | E::Decode { .. } | E::UnsupportedFormat(_) | E::MalformedPfm(_) => EXIT_IO,
                E::ShapeMismatch(_) | E::InvalidArgument(_) | E::Parse { .. } | E::StarvedBranch { .. } => EXIT_INVALID,
            };
        }
        if cause.is::<std::io::Error>() {
            return EXIT_IO;
        }
    }
    EXIT_INVALID
}

fn init_threads() -> anyhow::Result<()> {
    let Ok(v) = std::env::var("DPDEFOCUS_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| dpdefocus::Error::InvalidArgument(format!("DPDEFOCUS_THREADS={v:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| dpdefocus::Error::InvalidArgument(e.to_string()))?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    init_threads()?;
    let depth = BitDepth::from_bits(cli.bits)?;
    match cli.cmd {
        Command::Synth(a) => commands::synth(&a, depth),
        Command::EstimateCoc(a) => commands::estimate_coc(&a),
        Command::Fit(a) => commands::fit(&a),
        Command::Deblur(a) => commands::deblur(&a, depth),
        Command::Eval(a) => commands::eval(&a, depth),
        Command::Crop(a) => crop::run(&a, depth),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INVALID } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
