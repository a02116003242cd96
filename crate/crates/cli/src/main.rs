//! `fedbatch`: config-driven experiment runner.
//!
//! Subcommands map one-to-one onto the toolkit's experiment families:
//! `train` runs federated simulations over a seed list, `profile` measures
//! per-batch step costs, `plan` turns a profile into batch-size bounds,
//! `sweep-compression` tabulates the batch/compression relation and
//! `estimate-noise` measures small-vs-large batch gradient noise.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 config error, 3 infeasible
//! plan.

mod commands;
mod config;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Debug)]
pub enum CliError {
    Runtime(String),
    Config(String),
    Infeasible(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Runtime(_) => 1,
            CliError::Config(_) => 2,
            CliError::Infeasible(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Runtime(m) | CliError::Config(m) | CliError::Infeasible(m) => m,
        }
    }
}

impl From<fedbatch::Error> for CliError {
    fn from(e: fedbatch::Error) -> Self {
        match e {
            fedbatch::Error::Infeasible(m) => CliError::Infeasible(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "fedbatch", version, about = "Federated-learning simulator and batch-size planner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the federated experiment described by a TOML config.
    Train {
        /// Experiment config (see presets/ for the schema).
        config: PathBuf,
    },
    /// Measure compute and batch-assembly time over a set of batch sizes.
    Profile {
        /// Workload config with [model] and [dataset] sections.
        spec: PathBuf,
        /// Comma-separated batch sizes to measure.
        #[arg(long, value_delimiter = ',', default_value = "8,32,128,512")]
        batches: Vec<usize>,
        /// Timing repetitions per batch size (median is reported).
        #[arg(long, default_value_t = 5)]
        reps: usize,
        /// Output CSV path (overwritten).
        #[arg(long, default_value = "profile.csv")]
        out: PathBuf,
    },
    /// Fit a profile and report the largest and fastest feasible batch.
    Plan {
        /// Workload config with [model] and [dataset] sections.
        spec: PathBuf,
        /// Profile CSV produced by `fedbatch profile`.
        #[arg(long)]
        profile: PathBuf,
        /// Memory budget in bytes.
        #[arg(long)]
        budget_bytes: u64,
        /// Dataset size D used for epoch accounting.
        #[arg(long)]
        dataset_size: usize,
        /// Candidate batch sizes.
        #[arg(long, value_delimiter = ',', default_value = "8,16,32,64,128,256,512,1024")]
        candidates: Vec<usize>,
        /// Fixed per-aggregation sync cost in seconds.
        #[arg(long, default_value_t = 0.0)]
        t_sync: f64,
        /// Aggregation period H for the sync cost.
        #[arg(long, default_value_t = 1)]
        sync_period: usize,
        /// Optimizer state multiplier (0 plain SGD, 1 momentum, 2 Adam-style).
        #[arg(long, default_value_t = 0)]
        optimizer_multiplier: usize,
        /// Output JSON path (overwritten).
        #[arg(long, default_value = "plan.json")]
        out: PathBuf,
    },
    /// Relative top-k residual per batch size (compression sweep CSV).
    SweepCompression {
        /// Workload config with a [sweep] section.
        spec: PathBuf,
        /// Output CSV path (overwritten).
        #[arg(long, default_value = "sweep.csv")]
        out: PathBuf,
    },
    /// Mean small-vs-large batch gradient noise (CSV).
    EstimateNoise {
        /// Workload config with a [noise] section.
        spec: PathBuf,
        /// Output CSV path (overwritten).
        #[arg(long, default_value = "noise.csv")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config } => commands::train(&config),
        Command::Profile { spec, batches, reps, out } => {
            commands::profile(&spec, &batches, reps, &out)
        }
        Command::Plan {
            spec,
            profile,
            budget_bytes,
            dataset_size,
            candidates,
            t_sync,
            sync_period,
            optimizer_multiplier,
            out,
        } => commands::plan(
            &spec,
            &profile,
            budget_bytes,
            dataset_size,
            &candidates,
            t_sync,
            sync_period,
            optimizer_multiplier,
            &out,
        ),
        Command::SweepCompression { spec, out } => commands::sweep_compression(&spec, &out),
        Command::EstimateNoise { spec, out } => commands::estimate_noise(&spec, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}
