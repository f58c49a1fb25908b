//! `hshap`: generate synthetic data, explain images, run ablations and
//! check the complexity formula.
//!
//! Exit codes: 0 on success, 1 when a replay does not reproduce its run, 2
//! for usage errors and invalid flag combinations, 3 for I/O and
//! model-bridge failures.

mod args;
mod commands;
mod explain;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::args::{CountRange, Ks, ModelSpec, RhoGrid, Size, Tau};

/// Marks an error as a usage problem (exit code 2).
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct Usage(pub String);

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

/// A replay whose outputs differ from the recorded run (exit code 1).
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct Mismatch(pub String);

#[derive(Debug, Parser)]
#[command(name = "hshap", version, about = "Hierarchical Shapley saliency maps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic cross-detection dataset.
    Generate(GenerateArgs),
    /// Average a set of images into a baseline file.
    Baseline(BaselineArgs),
    /// Compute saliency maps.
    Explain(ExplainArgs),
    /// Remove the top-k features of a map and record the model score.
    Ablate(AblateArgs),
    /// Compare the expected visited-node formula with simulation.
    Theory(TheoryArgs),
    /// Re-run a recorded run and check its outputs match.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    /// Image size as HxW.
    #[arg(long, default_value = "64x64")]
    pub size: Size,
    /// Side of the square each shape is drawn in.
    #[arg(long, default_value_t = 8)]
    pub shape_size: usize,
    #[arg(long, default_value_t = 0.5)]
    pub positive_fraction: f64,
    /// Crosses per positive image, LO-HI.
    #[arg(long, default_value = "1-3")]
    pub crosses: CountRange,
    /// Distractors per image, LO-HI.
    #[arg(long, default_value = "1-10")]
    pub distractors: CountRange,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("source").required(true))]
pub struct BaselineArgs {
    /// Dataset directory holding a manifest.
    #[arg(long, group = "source")]
    pub dataset: Option<PathBuf>,
    /// Individual PPM images.
    #[arg(long, group = "source", num_args = 1..)]
    pub input: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("source").required(true))]
pub struct ExplainArgs {
    /// A single PPM image.
    #[arg(long, group = "source")]
    pub input: Option<PathBuf>,
    /// Dataset directory holding a manifest.
    #[arg(long, group = "source")]
    pub dataset: Option<PathBuf>,
    /// Ground-truth PGM mask for --input.
    #[arg(long, requires = "input")]
    pub mask: Option<PathBuf>,
    /// oracle, patch:T or bridge:CMD.
    #[arg(long, default_value = "oracle")]
    pub model: ModelSpec,
    /// Baseline file; zeros when absent.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pub gamma: usize,
    /// Minimal feature size, as an area.
    #[arg(long, conflicts_with = "s_side")]
    pub s: Option<usize>,
    /// Minimal feature size, as a side length.
    #[arg(long)]
    pub s_side: Option<usize>,
    /// abs:F or rel:P.
    #[arg(long, default_value = "abs:0")]
    pub tau: Tau,
    #[arg(long, value_parser = ["depth", "breadth"], default_value = "depth")]
    pub order: String,
    /// Breadth-first: advance children scoring at least the threshold.
    #[arg(long)]
    pub inclusive: bool,
    #[arg(long, default_value_t = 0)]
    pub score_head: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Bridge reply timeout in seconds.
    #[arg(long, default_value_t = 30.0)]
    pub timeout: f64,
    #[arg(long, default_value_t = 64)]
    pub max_batch: usize,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Saliency JSON written by `explain`.
    #[arg(long)]
    pub map: PathBuf,
    #[arg(long, default_value = "oracle")]
    pub model: ModelSpec,
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    /// `all`, or counts and LO-HI ranges separated by commas.
    #[arg(long, default_value = "all")]
    pub ks: Ks,
    #[arg(long, default_value_t = 0)]
    pub score_head: usize,
    /// CSV destination; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 30.0)]
    pub timeout: f64,
}

#[derive(Debug, Args)]
pub struct TheoryArgs {
    #[arg(long, default_value_t = 64)]
    pub n: usize,
    #[arg(long, default_value_t = 2)]
    pub gamma: usize,
    #[arg(long, default_value = "0,0.01,0.02,0.05,0.1,0.25,0.5,1")]
    pub rho_grid: RhoGrid,
    #[arg(long, default_value_t = 10_000)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// CSV destination; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// A run manifest written by an earlier run.
    pub manifest: PathBuf,
    /// Where the replay writes; a fresh temporary location when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses and runs one invocation; `argv` excludes the program name.
pub fn run(argv: &[String]) -> anyhow::Result<()> {
    let cli = match Cli::try_parse_from(std::iter::once("hshap".to_string()).chain(argv.iter().cloned())) {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => return Err(usage(e.to_string())),
        Err(e) => {
            // --help and --version
            print!("{e}");
            return Ok(());
        }
    };
    match cli.command {
        Command::Generate(a) => commands::generate(&a, argv),
        Command::Baseline(a) => commands::baseline(&a, argv),
        Command::Explain(a) => explain::run(&a, argv),
        Command::Ablate(a) => commands::ablate(&a, argv),
        Command::Theory(a) => commands::theory(&a, argv),
        Command::Replay(a) => commands::replay(&a),
    }
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    match run(&argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<Usage>() => {
            eprintln!("hshap: {e}");
            ExitCode::from(2)
        }
        Err(e) if e.is::<Mismatch>() => {
            eprintln!("hshap: replay mismatch: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("hshap: {e:#}");
            ExitCode::from(3)
        }
    }
}
