//! `classlist`: run simulations, serve the task API, evaluate and export.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 bad configuration or input,
//! 3 task budget exhausted (a resumable checkpoint has been written).

mod evaluate;
mod ingest;
mod serve;
mod simulate;
mod world;

use std::fmt;
use std::path::Path;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "classlist", version, about = "Crowd-built class lists for fine-grained categories")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the whole workflow against simulated workers.
    Simulate(simulate::SimulateArgs),
    /// Serve tasks to live workers over HTTP.
    Serve(serve::ServeArgs),
    /// Score a class list against a reference grouping.
    Evaluate(evaluate::EvaluateArgs),
    /// Match listing posts to trims and verify the harvested images.
    Ingest(ingest::IngestArgs),
    /// Expert annotation cost for a number of annotations.
    Cost(evaluate::CostArgs),
    /// Write a synthetic taxonomy, gold bank, truth and listing corpus.
    World(world::WorldArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Fixture {
    /// Two years of red, green, yellow and blue trims.
    Fig4,
}

/// Why a command stopped, mapped onto the exit-code contract.
#[derive(Debug)]
pub enum Failure {
    Config(String),
    Budget(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Runtime(_) => 1,
            Failure::Config(_) => 2,
            Failure::Budget(_) => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "configuration error: {m}"),
            Failure::Budget(m) => write!(f, "budget exhausted: {m}"),
            Failure::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

pub type CmdResult = Result<(), Failure>;

/// Tags an error as a configuration or runtime failure.
pub trait Classify<T> {
    fn config(self, what: impl fmt::Display) -> Result<T, Failure>;
    fn runtime(self, what: impl fmt::Display) -> Result<T, Failure>;
}

impl<T, E: fmt::Display> Classify<T> for Result<T, E> {
    fn config(self, what: impl fmt::Display) -> Result<T, Failure> {
        self.map_err(|e| Failure::Config(format!("{what}: {e}")))
    }

    fn runtime(self, what: impl fmt::Display) -> Result<T, Failure> {
        self.map_err(|e| Failure::Runtime(format!("{what}: {e}")))
    }
}

pub fn read_text(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).config(path.display())
}

pub fn write_out(path: &Path, text: &str) -> Result<(), Failure> {
    classlist_core::checkpoint::write_atomic(path, text.as_bytes()).runtime(path.display())
}

pub fn to_json_pretty<T: serde::Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => simulate::run(a),
        Command::Serve(a) => serve::run(a),
        Command::Evaluate(a) => evaluate::run(a),
        Command::Ingest(a) => ingest::run(a),
        Command::Cost(a) => evaluate::cost(a),
        Command::World(a) => world::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{f}");
            ExitCode::from(f.code())
        }
    }
}
