//! Command-line front end: fusion, weight learning, refinement, evaluation
//! and the cross-validation harnesses over dataset bundle files.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use detfuse::{CoordinateRule, Error};

#[derive(Parser, Debug)]
#[command(name = "detfuse", version, about = "Ensemble fusion of object detector outputs")]
pub struct Cli {
    /// Seed for fold shuffling, SGD order and synthesis.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// JSON run configuration; flags take precedence over it.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Worker threads for data-parallel stages.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Rule {
    Normalized,
    Linear,
}

impl From<Rule> for CoordinateRule {
    fn from(r: Rule) -> Self {
        match r {
            Rule::Normalized => CoordinateRule::Normalized,
            Rule::Linear => CoordinateRule::Linear,
        }
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Class-wise NMS over all detectors, per image.
    FuseNms(FuseNmsArgs),
    /// Learn fusion weights on annotated images.
    Train(TrainArgs),
    /// Weighted ensemble fusion with learned weights.
    Fuse(FuseArgs),
    /// Gap filling and short-track removal on a video bundle.
    Refine(RefineArgs),
    /// MAP of a detection bundle against ground truth.
    Eval(EvalArgs),
    /// Cross-validation on an image dataset.
    CvImage(CvImageArgs),
    /// Segment-wise cross-validation on a video.
    CvVideo(CvVideoArgs),
    /// Virtual detector outputs for a ground-truth bundle.
    Synth(SynthArgs),
    /// Random ground-truth scenes or a synthetic video.
    Scenes(ScenesArgs),
}

#[derive(Args, Debug)]
pub struct FuseNmsArgs {
    #[arg(long = "in", value_name = "BUNDLE")]
    pub input: PathBuf,
    #[arg(long, value_name = "BUNDLE")]
    pub out: PathBuf,
    #[arg(long)]
    pub iou_threshold: Option<f64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long = "in", value_name = "BUNDLE")]
    pub input: PathBuf,
    /// Text file with one training image id per line.
    #[arg(long, value_name = "FILE")]
    pub train_ids: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub weights_out: PathBuf,
    /// Training report; defaults to the weights path with a `.report.json` suffix.
    #[arg(long, value_name = "FILE")]
    pub report_out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub rule: Option<Rule>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// IoU needed to pair a detection with ground truth.
    #[arg(long)]
    pub iou_threshold: Option<f64>,
}

#[derive(Args, Debug)]
pub struct FuseArgs {
    #[arg(long = "in", value_name = "BUNDLE")]
    pub input: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub weights: PathBuf,
    #[arg(long, value_name = "BUNDLE")]
    pub out: PathBuf,
    #[arg(long)]
    pub iou_threshold: Option<f64>,
    #[arg(long)]
    pub min_sources: Option<usize>,
}

#[derive(Args, Debug)]
pub struct RefineArgs {
    #[arg(long = "in", value_name = "BUNDLE")]
    pub input: PathBuf,
    #[arg(long, value_name = "BUNDLE")]
    pub out: PathBuf,
    #[arg(long)]
    pub min_track_length: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long = "in", value_name = "BUNDLE")]
    pub input: PathBuf,
    /// Bundle holding the ground truth.
    #[arg(long, value_name = "BUNDLE")]
    pub gt: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub report: PathBuf,
    /// Text table; defaults to the report path with a `.txt` extension.
    #[arg(long, value_name = "FILE")]
    pub table: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CvImageArgs {
    #[arg(long = "in", value_name = "BUNDLE")]
    pub input: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub report: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub table: Option<PathBuf>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub train_size: Option<usize>,
    #[arg(long, value_enum)]
    pub rule: Option<Rule>,
}

#[derive(Args, Debug)]
pub struct CvVideoArgs {
    #[arg(long = "in", value_name = "BUNDLE")]
    pub input: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub report: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub table: Option<PathBuf>,
    #[arg(long)]
    pub segments: Option<usize>,
    #[arg(long)]
    pub train_tail: Option<usize>,
    #[arg(long, value_enum)]
    pub rule: Option<Rule>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, value_name = "BUNDLE")]
    pub gt: PathBuf,
    /// JSON list of detector profiles; the built-in three-detector set if omitted.
    #[arg(long, value_name = "FILE")]
    pub profiles: Option<PathBuf>,
    #[arg(long, value_name = "BUNDLE")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ScenesArgs {
    #[arg(long, value_name = "BUNDLE")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 300)]
    pub images: usize,
    /// Produce a video of this many frames instead of still images.
    #[arg(long)]
    pub video_frames: Option<usize>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } => 2,
        Error::Numerical(_) => 3,
        Error::Parse { .. } | Error::Validation { .. } | Error::Config(_) => 1,
    }
}

fn report_error(kind: &str, code: u8, message: &str) {
    let message = message.split_whitespace().collect::<Vec<_>>().join(" ");
    eprintln!("error kind={kind} code={code}: {message}");
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            report_error("usage", 1, first.trim_start_matches("error: "));
            return ExitCode::from(1);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();

    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            report_error(e.kind(), code, &e.to_string());
            ExitCode::from(code)
        }
    }
}
