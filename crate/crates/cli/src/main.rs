//! `covsegnet`: train, evaluate and run segmentation networks from the
//! command line.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

use commands::Failure;

#[derive(Parser, Debug)]
#[command(name = "covsegnet", version, about = "Multi-scale encoder-decoder segmentation of CT slices and volumes")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Overrides one configuration key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "covsegnet-out")]
    pub out: PathBuf,

    /// Seed for initialization, shuffling, splits and synthetic data.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Start from the small CPU profile (64x64 slices, 8-slice volumes).
    #[arg(long, global = true)]
    pub desk: bool,

    /// More log output (-v debug, -vv trace).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a seeded synthetic corpus into the output directory.
    Synth,

    /// Train the network(s) selected by `mode` (2d, 3d or hybrid).
    Train {
        /// Trained 2D checkpoint; hybrid runs then skip phase 1.
        #[arg(long, value_name = "CKPT")]
        phase1: Option<PathBuf>,
    },

    /// Cross-validate the configured model, or score saved checkpoints.
    Evaluate {
        /// Checkpoint to score on every fold; repeatable.
        #[arg(long = "checkpoint", value_name = "CKPT")]
        checkpoints: Vec<PathBuf>,

        /// Pair of checkpoint names to compare, `a:b`; repeatable. Without
        /// it, every checkpoint is compared with the first.
        #[arg(long, value_name = "A:B")]
        compare: Vec<String>,
    },

    /// Segment one image (PNG) or volume (.raw, .nii, .nii.gz).
    Predict {
        #[arg(long, value_name = "FILE")]
        input: PathBuf,

        /// Network checkpoint (the 2D one for a hybrid pair).
        #[arg(long, value_name = "CKPT")]
        checkpoint: PathBuf,

        /// 3D checkpoint; with it the input volume runs through the hybrid pair.
        #[arg(long, value_name = "CKPT")]
        checkpoint3d: Option<PathBuf>,

        /// Ground-truth mask; adds an overlay and scores.
        #[arg(long, value_name = "FILE")]
        gt: Option<PathBuf>,

        /// Also write the probability map.
        #[arg(long)]
        probabilities: bool,
    },

    /// Compare ablation variants, or sweep levels and stages.
    Ablate {
        /// Variants to compare, e.g. `V1,V4,V7`.
        #[arg(long, value_delimiter = ',', value_name = "LIST")]
        variants: Option<Vec<String>>,

        /// Levels of the sweep grid, e.g. `2,3`.
        #[arg(long, value_delimiter = ',', value_name = "LIST")]
        levels: Vec<usize>,

        /// Stages of the sweep grid, e.g. `1,2`.
        #[arg(long, value_delimiter = ',', value_name = "LIST")]
        stages: Vec<usize>,
    },

    /// Parameter counts per configuration, against published totals.
    Params {
        #[arg(long, value_enum, default_value_t = DimsArg::Both)]
        dims: DimsArg,

        /// Levels to report (default 2..5 for 2D, 2..4 for 3D).
        #[arg(long, value_delimiter = ',', value_name = "LIST")]
        levels: Vec<usize>,

        #[arg(long, default_value_t = 2)]
        stages: usize,

        #[arg(long, default_value_t = 16)]
        base: usize,

        /// Print the per-module breakdown too.
        #[arg(long)]
        breakdown: bool,
    },

    /// Draw training curves of a run, or an error overlay of a prediction.
    Plot {
        /// Run directory containing `curves.csv`.
        #[arg(long, value_name = "DIR", conflicts_with_all = ["image", "pred", "gt"])]
        run: Option<PathBuf>,

        #[arg(long, value_name = "FILE", requires_all = ["pred", "gt"])]
        image: Option<PathBuf>,

        #[arg(long, value_name = "FILE")]
        pred: Option<PathBuf>,

        #[arg(long, value_name = "FILE")]
        gt: Option<PathBuf>,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum DimsArg {
    #[value(name = "2d")]
    D2,
    #[value(name = "3d")]
    D3,
    Both,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.global.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

impl Failure {
    /// 2 for usage and configuration errors, 3 for everything else.
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) | Failure::Core(covsegnet_core::Error::Config(_)) => 2,
            Failure::Core(_) => 3,
        }
    }
}
