//! `dynkd`: synthetic RGB-D data, two-stage distillation, evaluation and
//! the ablation runner from the command line.
//!
//! Exit status is 0 on success, 1 on a usage error and 2 on a runtime error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};
use dynkd::harness::Mode;
use dynkd::synthdata::EvalSplit;

#[derive(Parser, Debug)]
#[command(name = "dynkd", version, about = "Dynamic knowledge distillation for RGB-D saliency at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand. Values given here override the
/// `--config` file, which overrides the built-in defaults.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Seed for data generation, initialization and shuffling.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Image side length in pixels (multiple of 4).
    #[arg(long)]
    pub size: Option<usize>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// JSON file with the full configuration; flags win over its values.
    #[arg(long, value_name = "JSON")]
    pub config: Option<PathBuf>,
}

/// Where samples come from: an on-disk dataset or a generated one.
#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// Dataset directory written by `gen-data`.
    #[arg(long, value_name = "DIR", conflicts_with_all = ["n", "noise_fraction"])]
    pub data: Option<PathBuf>,
    /// Number of samples to generate when no dataset directory is given.
    #[arg(long)]
    pub n: Option<usize>,
    /// Fraction of generated samples with corrupted depth.
    #[arg(long)]
    pub noise_fraction: Option<f64>,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    /// Passes over the training split.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Samples per SGD step.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// SGD learning rate; `ablate` applies it to teacher and students alike.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Disable flip and rotation augmentation.
    #[arg(long)]
    pub no_augment: bool,
    /// Suppress per-epoch log lines.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic RGB-D dataset with a train/test split.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Number of samples.
        #[arg(long)]
        n: Option<usize>,
        /// Fraction of samples with corrupted depth.
        #[arg(long)]
        noise_fraction: Option<f64>,
        /// Worker threads (1 runs on the calling thread).
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Train the teacher network with cross-entropy.
    TrainTeacher {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Train a student against a stage-1 teacher checkpoint.
    Distill {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
        /// Teacher checkpoint manifest (`checkpoint.json`).
        #[arg(long, value_name = "JSON")]
        teacher: Option<PathBuf>,
        /// Training mode: rgb, rgbd, fixed:<s>, dynamic or dynamic+threshold.
        #[arg(long)]
        mode: Option<Mode>,
        /// Balance between teacher confidence and student error.
        #[arg(long)]
        p: Option<f64>,
        /// Teacher accuracy at or below which the distillation weight is gated.
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Score saliency maps against ground truth.
    ///
    /// Either compare two directories of PGM maps matched by file name, or
    /// run a checkpoint over a dataset split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Directory of predicted maps.
        #[arg(long, value_name = "DIR", requires = "gt", conflicts_with = "checkpoint")]
        pred: Option<PathBuf>,
        /// Directory of ground-truth masks.
        #[arg(long, value_name = "DIR", requires = "pred")]
        gt: Option<PathBuf>,
        /// Network checkpoint manifest to run over a dataset.
        #[arg(long, value_name = "JSON")]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        data: DataArgs,
        /// Dataset split: train, test, test_clean or test_noisy.
        #[arg(long)]
        split: Option<EvalSplit>,
        /// Also write the predicted maps as PGM files.
        #[arg(long)]
        save_preds: bool,
    },
    /// Run every (mode, seed) pair of the ablation table.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
        /// Comma-separated modes, e.g. rgbd,fixed:0.5,dynamic,dynamic+threshold.
        #[arg(long, value_delimiter = ',')]
        modes: Option<Vec<Mode>>,
        /// Comma-separated seeds; `--seed` runs a single one.
        #[arg(long, value_delimiter = ',', conflicts_with = "seed")]
        seeds: Option<Vec<u64>>,
        /// Comma-separated evaluation splits.
        #[arg(long, value_delimiter = ',')]
        splits: Option<Vec<EvalSplit>>,
        /// Independent runs executed in parallel.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Summarize a distillation weight trace per epoch.
    TraceSummary {
        #[command(flatten)]
        common: Common,
        /// `trace.csv` written by `distill` or `ablate`.
        #[arg(long, value_name = "CSV")]
        trace: PathBuf,
        /// Dataset the trace was recorded on, to attribute gated samples to
        /// noise modes. Generated datasets are recreated from --seed/--size.
        #[command(flatten)]
        data: DataArgs,
    },
    /// Compare tape gradients of both networks with finite differences.
    FdCheck {
        #[command(flatten)]
        common: Common,
        /// Number of seeds checked, starting at --seed.
        #[arg(long)]
        repeats: Option<usize>,
        /// Parameters sampled per network and seed.
        #[arg(long)]
        samples: Option<usize>,
        /// Largest acceptable relative error.
        #[arg(long)]
        tolerance: Option<f64>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::TrainTeacher { .. } => "train-teacher",
            Command::Distill { .. } => "distill",
            Command::Evaluate { .. } => "evaluate",
            Command::Ablate { .. } => "ablate",
            Command::TraceSummary { .. } => "trace-summary",
            Command::FdCheck { .. } => "fd-check",
        }
    }
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<dynkd::Error> for Failure {
    fn from(e: dynkd::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

/// Help text of the subcommand named in `argv`, or of the top level.
fn help_for(argv: &[String]) -> String {
    let mut cmd = Cli::command();
    let name = argv
        .iter()
        .skip(1)
        .find(|a| !a.starts_with('-'))
        .filter(|a| cmd.find_subcommand(a.as_str()).is_some());
    match name {
        Some(n) => cmd.find_subcommand_mut(n).expect("checked above").render_help().to_string(),
        None => cmd.render_help().to_string(),
    }
}

/// The error and its causes, skipping causes already quoted by their parent.
fn render_chain(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !out.ends_with(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            eprintln!("{}", e.render());
            eprintln!("{}", help_for(&argv));
            return ExitCode::from(1);
        }
    };
    let name = cli.command.name();
    match commands::run(cli.command, &argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n");
            eprintln!("{}", help_for(&[String::new(), name.to_string()]));
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {}", render_chain(&e));
            ExitCode::from(2)
        }
    }
}
