//! `movgan` command line: dataset preparation, training, generation, layout
//! editing and evaluation.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "movgan", version, about = "Layout-conditioned video generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse annotations, refine them and cache fixed-length clips.
    Prep(PrepArgs),
    /// Train a model on a prepared dataset directory.
    Train(TrainArgs),
    /// Generate a clip from a layout file.
    Generate(GenerateArgs),
    /// Apply an edit script to a layout and regenerate with the same latents.
    Edit(EditArgs),
    /// Score a checkpoint against a dataset.
    Eval(EvalArgs),
    /// Write a synthetic moving-shapes dataset.
    Toy(ToyArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct PrepArgs {
    /// Annotation JSON file or directory of them.
    #[arg(long)]
    pub annotations: PathBuf,
    /// Dataset root holding `frames/<video_id>/<index:06>.png`.
    #[arg(long)]
    pub frames_root: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Videos with more distinct instances are dropped.
    #[arg(long, default_value_t = 11)]
    pub max_instances: usize,
    /// Downsample instance-count strata to the median stratum size.
    #[arg(long)]
    pub balance: bool,
    #[arg(long, default_value_t = 16)]
    pub clip_length: usize,
    #[arg(long, default_value_t = 64)]
    pub resolution: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the dataset statistics as JSON to this file.
    #[arg(long)]
    pub stats_out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// TOML training configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Dataset directory written by `prep` or `toy`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
    /// Overrides `seed` of the config file.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `max_steps` of the config file.
    #[arg(long)]
    pub max_steps: Option<u64>,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct GenerateArgs {
    #[arg(long, default_value = "run/checkpoint.ckpt")]
    pub checkpoint: PathBuf,
    /// Layout file: one `category_id x0 y0 x1 y1` line per instance.
    #[arg(long)]
    pub layout: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of frames [default: clip length of the training config]
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long, default_value = "generated")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct EditArgs {
    #[arg(long, default_value = "run/checkpoint.ckpt")]
    pub checkpoint: PathBuf,
    /// Layout file to start from.
    #[arg(long)]
    pub layout: PathBuf,
    /// Edit script: `add <id> <category> x0 y0 x1 y1`, `remove <id>` or
    /// `resize <id> x0 y0 x1 y1` per line.
    #[arg(long)]
    pub script: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long, default_value = "edited")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Per-frame Fréchet distance.
    Fid,
    /// Per-clip Fréchet distance.
    Fvd,
    /// Fraction of object-colored mass inside the requested boxes.
    Adherence,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long, default_value = "run/checkpoint.ckpt")]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub mode: EvalMode,
    #[arg(long, default_value_t = 64)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Seed of the random feature extractor.
    #[arg(long, default_value_t = 0)]
    pub extractor_seed: u64,
    /// Directory for `eval.json` and a manifest; the record is always
    /// printed to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct ToyArgs {
    #[arg(long, default_value_t = 128)]
    pub clips: usize,
    #[arg(long, default_value_t = 8)]
    pub frames: usize,
    /// Frame height and width.
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 3)]
    pub max_objects: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Exit status for an error: 3 for rejected input or configuration, 1 for
/// failures while running.
fn exit_code(e: &movgan::Error) -> u8 {
    if e.is_validation() {
        3
    } else {
        1
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error:");
            eprintln!("error[usage]: {}", one_line(first));
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::Prep(a) => commands::prep(&a),
        Command::Train(a) => commands::train(&a),
        Command::Generate(a) => commands::generate(&a),
        Command::Edit(a) => commands::edit(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Toy(a) => commands::toy(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.category(), one_line(&e.to_string()));
            ExitCode::from(exit_code(&e))
        }
    }
}
