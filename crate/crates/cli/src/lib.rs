//! Command-line pipeline: `simulate -> build -> train -> sample -> evaluate -> table`.
//!
//! Every command writes into a staging directory next to its destination and
//! renames it into place once the output is complete, so a destination that
//! exists with a `manifest.json` is always whole. Rerunning a command on a
//! complete destination does nothing unless `--force` is given.
//!
//! Default locations hang off the artifact root (`--root`, or
//! `SFM_LAB_DATA_DIR`):
//!
//! ```text
//! <root>/sims/tau<T>/seed<S>/            simulate
//! <root>/datasets/tau<T>/                build
//! <root>/runs/tau<T>/<scheme>/           train
//! <root>/runs/tau<T>/<scheme>/samples/   sample
//! <root>/runs/tau<T>/<scheme>/eval/      evaluate
//! ```

mod commands;
mod output;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sfm_core::flows::{EncoderKind, Scheme};
use sfm_core::ErrorCategory;

pub use commands::{
    build, evaluate, sample, simulate, table, train, EvaluateConfig, SampleConfig, SamplesManifest, SimulateConfig,
};
pub use output::{is_complete, load_config, Staged};

#[derive(Debug, Parser)]
#[command(name = "sfm-lab", version, about = "Stochastic flow matching downscaling lab")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// TOML or JSON file with the command's configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random draw of the command.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Redo outputs that are already complete.
    #[arg(long, global = true)]
    pub force: bool,
    /// Artifact root for default input and output locations.
    #[arg(long, global = true, env = "SFM_LAB_DATA_DIR", default_value = "sfm-data")]
    pub root: PathBuf,
    /// Suppress progress messages.
    #[arg(long, short, global = true)]
    pub quiet: bool,
}

impl GlobalArgs {
    pub fn log(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Integrate coupled Kolmogorov-flow trajectories.
    Simulate(SimulateArgs),
    /// Assemble a train/test dataset from the trajectories of one tau.
    Build(BuildArgs),
    /// Train one scheme on a dataset.
    Train(TrainArgs),
    /// Draw ensembles for the test inputs.
    Sample(SampleArgs),
    /// Score samples against the test targets.
    Evaluate(EvaluateArgs),
    /// Join evaluation reports into one comparison table.
    Table(TableArgs),
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    /// Output directory (default `<root>/sims`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Coupling time scales, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub tau: Vec<f64>,
    /// Independent trajectories per tau.
    #[arg(long)]
    pub n_seeds: Option<usize>,
    #[arg(long)]
    pub grid_n: Option<usize>,
    #[arg(long)]
    pub dt: Option<f64>,
    /// Recorded integration steps after spin-up.
    #[arg(long)]
    pub n_steps: Option<u64>,
    #[arg(long)]
    pub save_every: Option<f64>,
    #[arg(long)]
    pub spinup_time: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct BuildArgs {
    /// Tau whose trajectories are used.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Directory holding one subdirectory per trajectory.
    #[arg(long)]
    pub sims: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_test: Option<usize>,
    #[arg(long)]
    pub gap: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EncoderArg {
    Conv1x1,
    Convnet,
    Zero,
}

impl From<EncoderArg> for EncoderKind {
    fn from(e: EncoderArg) -> Self {
        match e {
            EncoderArg::Conv1x1 => EncoderKind::Conv1x1,
            EncoderArg::Convnet => EncoderKind::Convnet,
            EncoderArg::Zero => EncoderKind::Zero,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub scheme: Option<Scheme>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub blocks: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long, value_enum)]
    pub encoder: Option<EncoderArg>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Feed `y` to the denoiser next to the noisy state.
    #[arg(long)]
    pub condition_on_y: Option<bool>,
    /// Sampler steps stored with the model.
    #[arg(long)]
    pub sampler_steps: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    #[arg(long)]
    pub validate_every: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub scheme: Option<Scheme>,
    #[arg(long)]
    pub run: Option<PathBuf>,
    /// Dataset (default: the one the run was trained on).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Test cases to sample (default all selected by the stride).
    #[arg(long)]
    pub n_cases: Option<usize>,
    /// Sample test cases `0, k, 2k, ...`.
    #[arg(long)]
    pub case_stride: Option<usize>,
    /// Ensemble members per case.
    #[arg(long)]
    pub members: Option<usize>,
    /// Members drawn per forward pass.
    #[arg(long)]
    pub chunk: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EstimatorArg {
    Biased,
    Unbiased,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub scheme: Option<Scheme>,
    #[arg(long)]
    pub samples: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Members scored per case (default all).
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long, value_enum)]
    pub estimator: Option<EstimatorArg>,
    #[arg(long)]
    pub no_spectra: bool,
}

#[derive(Debug, Clone, Args)]
pub struct TableArgs {
    /// Evaluation directories or report.json files (default: every report under `<root>/runs`).
    pub reports: Vec<PathBuf>,
    /// Output CSV (default stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Run a parsed command line.
pub fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.global.threads {
        if n == 0 {
            return Err(sfm_core::Error::Config("--threads must be positive".into()).into());
        }
        // Fails only if a pool already exists, which is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let g = &cli.global;
    match &cli.command {
        Command::Simulate(a) => simulate(g, a),
        Command::Build(a) => build(g, a),
        Command::Train(a) => train(g, a),
        Command::Sample(a) => sample(g, a),
        Command::Evaluate(a) => evaluate(g, a),
        Command::Table(a) => table(g, a),
    }
}

/// Process exit status: 2 configuration, 3 I/O, 4 numerics, 1 anything else.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<sfm_core::Error>() {
            return match e.category() {
                ErrorCategory::Config => 2,
                ErrorCategory::Io => 3,
                ErrorCategory::Numeric => 4,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
    }
    1
}
