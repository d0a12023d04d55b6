//! `smac`: gradient checks, training, inference, evaluation, dataset
//! statistics and attention-map export.
//!
//! Every failure ends the process with one stderr line
//! `error kind=<kind> code=<exit code> msg=<message>` and exit code 2
//! (usage or config), 3 (data or I/O) or 4 (numeric failure).

mod attn;
mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "smac", version, about = "RGB-D saliency with selective mutual attention and contrast")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Central-difference gradient check of every op and attention block.
    Gradcheck(GradcheckArgs),
    /// Train the two-stream network and write a loss curve and checkpoint.
    Train(TrainArgs),
    /// Write saliency maps for every image pair of a dataset.
    Infer(InferArgs),
    /// Score predicted saliency maps against ground truth.
    Eval(EvalArgs),
    /// Dataset statistics: contrast, interior contrast, center bias, object size, depth quality.
    Stats(StatsArgs),
    /// Export attention and contrast maps of one query position.
    DumpAttn(DumpAttnArgs),
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Relative error tolerance.
    #[arg(long, default_value_t = 1e-4, allow_negative_numbers = true)]
    pub tol: f64,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-6, allow_negative_numbers = true)]
    pub h: f64,
    /// Comma-separated seeds; every case runs once per seed.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    pub seeds: Vec<u64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Run configuration file. Without it the toy configuration is used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training dataset; overrides the config's `dataset`.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Number of iterations; overrides `total_iters`.
    #[arg(long)]
    pub iters: Option<usize>,
    /// Seed for initialization, sampling and augmentation; overrides `seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for `loss.csv` and `model.bin`.
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
    /// Loss curve path (default `<out>/loss.csv`).
    #[arg(long)]
    pub loss_curve: Option<PathBuf>,
    /// Checkpoint path (default `<out>/model.bin`).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Print the loss to stderr every N iterations; 0 disables.
    #[arg(long, default_value_t = 10)]
    pub log_every: usize,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory with `rgb/` and `depth/`; `gt/` is ignored.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Output directory; one `<stem>.pgm` per image at its original size.
    #[arg(long)]
    pub out: PathBuf,
    /// Override the depth convention stored in the checkpoint.
    #[arg(long)]
    pub invert_depth: Option<bool>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Directory of predicted maps (8-bit gray, matched to ground truth by stem).
    #[arg(long)]
    pub pred: PathBuf,
    /// Directory of ground-truth masks (foreground is ≥ 128).
    #[arg(long)]
    pub gt: PathBuf,
    /// Dataset name in the report (default: the ground-truth directory's parent name).
    #[arg(long)]
    pub name: Option<String>,
    /// Also print per-image scores.
    #[arg(long)]
    pub detail: bool,
    /// Write the report to this file as well.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    /// Directory with `rgb/`, `depth/` and `gt/`.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Dataset name in the report (default: the directory name).
    #[arg(long)]
    pub name: Option<String>,
    /// Use raw histogram counts instead of unit-sum histograms in χ².
    #[arg(long)]
    pub raw_counts: bool,
    /// Sobel magnitude threshold for edges, relative to the maximum.
    #[arg(long, default_value_t = smac_core::stats::DEFAULT_EDGE_THRESHOLD)]
    pub edge_threshold: f64,
    /// Distance in pixels within which a depth edge counts as matched.
    #[arg(long, default_value_t = smac_core::stats::DEFAULT_MATCH_RADIUS)]
    pub match_radius: usize,
    /// Write the average annotation map as a PGM.
    #[arg(long)]
    pub aam: Option<PathBuf>,
    /// Write the report to this file as well.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    Fusion,
    Decoder1,
    Decoder2,
    Decoder3,
}

#[derive(Args, Debug)]
pub struct DumpAttnArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// RGB image (PPM or PNG).
    #[arg(long)]
    pub rgb: PathBuf,
    /// Depth map (PGM or PNG) of the same size.
    #[arg(long)]
    pub depth: PathBuf,
    /// Query column in image pixels.
    #[arg(long)]
    pub x: usize,
    /// Query row in image pixels.
    #[arg(long)]
    pub y: usize,
    #[arg(long, value_enum, default_value_t = Stage::Fusion)]
    pub stage: Stage,
    #[arg(long)]
    pub out: PathBuf,
    /// Override the depth convention stored in the checkpoint.
    #[arg(long)]
    pub invert_depth: Option<bool>,
}

/// A failure reported on one stderr line.
#[derive(Debug)]
pub struct Failure {
    pub kind: &'static str,
    pub code: u8,
    pub msg: String,
}

impl Failure {
    pub fn new(kind: &'static str, code: u8, msg: impl Into<String>) -> Self {
        Self {
            kind,
            code,
            msg: msg.into(),
        }
    }

    pub fn argument(msg: impl Into<String>) -> Self {
        Self::new("argument", 2, msg)
    }

    fn line(&self) -> String {
        let msg = self.msg.split_whitespace().collect::<Vec<_>>().join(" ");
        format!("error kind={} code={} msg={msg}", self.kind, self.code)
    }
}

impl From<smac_core::Error> for Failure {
    fn from(e: smac_core::Error) -> Self {
        Self::new(e.kind(), e.exit_code() as u8, e.to_string())
    }
}

pub type CliResult<T = ()> = Result<T, Failure>;

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Gradcheck(a) => commands::gradcheck(&a),
        Command::Train(a) => commands::train(&a),
        Command::Infer(a) => commands::infer(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Stats(a) => commands::stats(&a),
        Command::DumpAttn(a) => attn::dump(&a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            let f = Failure::new("usage", 2, first.trim_start_matches("error: "));
            eprintln!("{}", f.line());
            return ExitCode::from(f.code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.line());
            ExitCode::from(f.code)
        }
    }
}
