//! `avfp`: ingest C-MAPSS files, train and score models, run repeated-seed
//! experiments and the numerical self-checks.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 training abort,
//! 4 a self-check (gradcheck, oracle) failed.

mod commands;
mod config;
mod fleet;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Abort(String),
    CheckFailed(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Abort(_) => 3,
            CliError::CheckFailed(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Abort(m) | CliError::CheckFailed(m) => f.write_str(m),
        }
    }
}

impl From<avfp_core::Error> for CliError {
    fn from(e: avfp_core::Error) -> Self {
        use avfp_core::Error as E;
        match e {
            E::Diverged(_) => CliError::Abort(e.to_string()),
            E::InvalidArgument(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

#[derive(Parser, Debug)]
#[command(name = "avfp", version, about = "Adversarial-variational RUL prognostics on C-MAPSS data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Where the C-MAPSS text files live.
#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// Directory holding train_<subset>.txt, test_<subset>.txt and RUL_<subset>.txt
    /// [default: $AVFP_DATA_DIR]
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "FD001")]
    pub subset: String,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse and normalize a subset, writing CSV caches and the statistics.
    Ingest {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one seeded model and save a checkpoint.
    Train {
        #[command(flatten)]
        data: DataArgs,
        /// JSON run configuration; omitted keys take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from a checkpoint written by an earlier `train`.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "supervised")]
        mode: String,
    },
    /// Write per-unit test predictions as CSV.
    Predict {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "supervised")]
        mode: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Repeated seeded runs with summary statistics and plot data.
    Experiment {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        runs: usize,
        /// Also run the Markovian ablation and write a two-row comparison.
        #[arg(long)]
        compare_markovian: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every objective's gradient.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        draws: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// ELBO against the exact Kalman log-likelihood on random linear-Gaussian models.
    Oracle {
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long, default_value_t = 256)]
        draws: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a synthetic fleet in the C-MAPSS file layout.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "SYN")]
        subset: String,
        #[arg(long, default_value_t = 100)]
        units: usize,
        #[arg(long, default_value_t = 100)]
        test_units: usize,
        #[arg(long, default_value_t = 128)]
        min_life: usize,
        #[arg(long, default_value_t = 362)]
        max_life: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Ingest { data, out } => commands::ingest(&data, &out),
        Command::Train { data, config, seed, epochs, resume, out } => {
            commands::train(&data, config.as_deref(), seed, epochs, resume.as_deref(), &out)
        }
        Command::Eval { data, checkpoint, mode } => commands::eval(&data, &checkpoint, &mode),
        Command::Predict { data, checkpoint, mode, out } => commands::predict(&data, &checkpoint, &mode, &out),
        Command::Experiment { data, config, runs, compare_markovian, out } => {
            commands::experiment(&data, config.as_deref(), runs, compare_markovian, &out)
        }
        Command::Gradcheck { draws, seed } => commands::gradcheck(draws, seed),
        Command::Oracle { instances, steps, draws, seed } => commands::oracle(instances, steps, draws, seed),
        Command::Synth { out, subset, units, test_units, min_life, max_life, seed } => {
            commands::synth(&out, &subset, units, test_units, min_life, max_life, seed)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
