//! Command-line driver: runs scenarios, compares relay policies, fits
//! capacity models and reports topology statistics.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use thiserror::Error;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Environment variable naming the default output directory.
pub const OUT_ENV: &str = "SQUELCHSIM_OUT";

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad config, bad input file or bad arguments.
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "squelchsim",
    version,
    about = "Flooding vs squelched relaying simulator"
)]
pub struct Cli {
    /// Scenario config (TOML).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides scenario.seed.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Output directory. Defaults to output.dir, then $SQUELCHSIM_OUT, then ./squelchsim-out.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Dotted config override, e.g. protocol.max_selected=5. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one scenario and write metrics.csv and summary.json.
    Simulate,
    /// Run the scenario under flooding and under squelching and compare.
    Compare,
    /// Fit y = a + b*x to a CSV of points and print the model as JSON.
    Fit {
        /// CSV with a header and 2 columns (x,y) or 3 columns (peers,messages,cpu).
        points: PathBuf,
        /// Also report the inverse model x(y).
        #[arg(long)]
        invert: bool,
        /// Evaluate the model at X. Repeatable.
        #[arg(long, value_name = "X")]
        predict: Vec<f64>,
        /// Extrapolate the effect of saving FRACTION of messages at PEERS peers.
        #[arg(long, num_args = 2, value_names = ["PEERS", "FRACTION"])]
        gain: Option<Vec<String>>,
        /// Separate (peers,cpu) CSV for --gain when POINTS has only 2 columns.
        #[arg(long, value_name = "PATH")]
        cpu_points: Option<PathBuf>,
    },
    /// Print hop and degree statistics of an edge-list file as JSON.
    TopoStats { edge_list: PathBuf },
    /// Generate a random connected topology and print it as an edge list.
    TopoGen {
        #[arg(long)]
        nodes: usize,
        #[arg(long)]
        avg_degree: f64,
        #[arg(long, default_value_t = 0.17)]
        validator_fraction: f64,
        #[arg(long, default_value_t = 5.0)]
        latency_low_ms: f64,
        #[arg(long, default_value_t = 100.0)]
        latency_high_ms: f64,
    },
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Simulate => commands::simulate(&cli),
        Command::Compare => commands::compare(&cli),
        Command::Fit {
            points,
            invert,
            predict,
            gain,
            cpu_points,
        } => commands::fit(
            points,
            *invert,
            predict,
            gain.as_deref(),
            cpu_points.as_deref(),
        ),
        Command::TopoStats { edge_list } => commands::topo_stats(edge_list),
        Command::TopoGen {
            nodes,
            avg_degree,
            validator_fraction,
            latency_low_ms,
            latency_high_ms,
        } => commands::topo_gen(
            *nodes,
            *avg_degree,
            *validator_fraction,
            (*latency_low_ms, *latency_high_ms),
            cli.seed.unwrap_or(0),
        ),
    }
}
