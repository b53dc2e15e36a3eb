mod commands;
mod task;

use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use hrc_core::bench::BenchError;
use hrc_core::graph::GraphError;
use hrc_core::intent::IntentError;
use hrc_core::rl::TrainError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Budget(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Runtime(_) => 1,
            CliError::Config(_) => 2,
            CliError::Budget(_) => 3,
        }
    }
}

impl From<GraphError> for CliError {
    fn from(e: GraphError) -> Self {
        match e {
            GraphError::Budget { .. } => CliError::Budget(e.to_string()),
            GraphError::Stochastic(_) | GraphError::Format(_) => CliError::Config(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => CliError::Config(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<BenchError> for CliError {
    fn from(e: BenchError) -> Self {
        match e {
            BenchError::BadSize(_) | BenchError::Refused { .. } => CliError::Config(e.to_string()),
            BenchError::Graph(g) => g.into(),
            BenchError::Train(t) => t.into(),
            BenchError::Eval(_) => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<IntentError> for CliError {
    fn from(e: IntentError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Table,
    Csv,
    Json,
}

#[derive(Debug, Parser)]
#[command(name = "hrc", version, about = "Plan, learn and benchmark robot policies for shared assembly tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one episode and print its event trace.
    Simulate(commands::SimulateArgs),
    /// Build and solve the decision graph of a deterministic scenario.
    SolveGraph(commands::SolveArgs),
    /// Train a masked Q-learning policy.
    Train(commands::TrainArgs),
    /// Monte-Carlo comparison of policies.
    Bench(commands::BenchArgs),
    /// Goal inference on a recorded or synthetic hand trajectory.
    IntentDemo(commands::IntentArgs),
    /// Write a random task document.
    GenHtm(commands::GenArgs),
    /// Start the interactive session server.
    Serve(commands::ServeArgs),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => commands::simulate(a),
        Command::SolveGraph(a) => commands::solve_graph(a),
        Command::Train(a) => commands::train(a),
        Command::Bench(a) => commands::bench(a),
        Command::IntentDemo(a) => commands::intent_demo(a),
        Command::GenHtm(a) => commands::gen_htm(a),
        Command::Serve(a) => commands::serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
