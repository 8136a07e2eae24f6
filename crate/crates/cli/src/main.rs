mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use textsr::Error;

#[derive(Parser)]
#[command(name = "textsr", version, about = "Text-conditioned diffusion super-resolution for text crops")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print (or write) a resolved run configuration.
    Config(ConfigArgs),
    /// Render a synthetic HR/LR dataset.
    Gen(GenArgs),
    /// Train the restorer.
    Train(TrainArgs),
    /// Restore a crop, or a whole image given a region manifest.
    Restore(RestoreArgs),
    /// Score a checkpoint over an (omega, R) grid.
    #[command(alias = "eval")]
    Sweep(SweepArgs),
}

#[derive(Args)]
pub struct ConfigArgs {
    /// Start from this file instead of the built-in defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Model preset for the defaults: desk or paper.
    #[arg(long, default_value = "desk")]
    pub preset: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct GenArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// UTF-8 file listing the characters to draw from (whitespace ignored).
    #[arg(long)]
    pub charset_file: Option<PathBuf>,
    /// Distinct texts to render.
    #[arg(long)]
    pub count: Option<usize>,
    /// Degraded variants per text.
    #[arg(long)]
    pub dup: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Dataset manifest or its directory.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    /// Total optimizer steps.
    #[arg(long)]
    pub steps: u64,
    #[arg(long)]
    pub out_ckpt: PathBuf,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// JSONL loss log; defaults to the checkpoint path with `.loss.jsonl`.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Args)]
pub struct RestoreArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// A crop PNG, or a full image when `--regions` is given.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Region manifest (JSONL) for full-image mode.
    #[arg(long)]
    pub regions: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON report; defaults to the output path with `.json`.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, allow_negative_numbers = true)]
    pub omega: Option<f64>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub ddim_steps: Option<usize>,
    /// Generate from text alone.
    #[arg(long)]
    pub null_image: bool,
    /// toy, oracle:<rate>, cmd:<path> or none.
    #[arg(long, default_value = "toy")]
    pub ocr: String,
    /// Ground truth for the oracle recognizer in crop mode.
    #[arg(long)]
    pub text: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Background upscaler: bicubic or cmd:<path>.
    #[arg(long, default_value = "bicubic")]
    pub upscaler: String,
    #[arg(long)]
    pub factor: Option<usize>,
    /// Glyph atlas file; defaults to the built-in desk atlas.
    #[arg(long)]
    pub atlas: Option<PathBuf>,
}

#[derive(Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Guiding recognizer: toy, oracle:<rate>, cmd:<path> or none.
    #[arg(long)]
    pub ocr: Option<String>,
    /// Scoring recognizer: toy or cmd:<path>.
    #[arg(long)]
    pub evaluator: Option<String>,
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub omega_list: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub r_list: Option<Vec<usize>>,
    #[arg(long)]
    pub ddim_steps: Option<usize>,
    /// Evaluate only the first N records.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub atlas: Option<PathBuf>,
    /// Directory for sweep.json, sweep.txt and records.jsonl.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// 2 usage, 3 I/O, 4 numeric, 5 artifact mismatch.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::External(_) => 3,
        Error::Format { what, .. } if *what == "checkpoint" => 5,
        Error::Format { .. } => 3,
        Error::NonFiniteLoss | Error::NonFiniteActivation(_) => 4,
        Error::ArtifactMismatch(_) => 5,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let r = match cli.command {
        Command::Config(a) => commands::config(a),
        Command::Gen(a) => commands::gen(a),
        Command::Train(a) => commands::train(a),
        Command::Restore(a) => commands::restore(a),
        Command::Sweep(a) => commands::sweep(a),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
