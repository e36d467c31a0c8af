//! Command-line experiment runner.
//!
//! Subcommands:
//!
//! - `run CONFIG`: trains every `(theta, seed)` cell of an experiment and
//!   writes round logs, metric snapshots and a cross-seed summary.
//! - `gaussian-demo --out DIR`: the three-Gaussian illustration.
//! - `validate CONFIG`: checks a config and prints it with defaults filled in.
//!
//! Exit codes are 0 on success, 1 for invalid configs or arguments and 2 for
//! failures while running.

pub mod config;
pub mod demo;
pub mod runner;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use config::{AlgorithmChoice, ExperimentConfig, Overrides};
use demo::DemoConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "deltafl",
    version,
    about = "Superquantile federated learning experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run an experiment.
    Run {
        config: PathBuf,
        #[command(flatten)]
        overrides: OverrideArgs,
    },
    /// Reproduce the three-Gaussian illustration.
    GaussianDemo {
        #[arg(long)]
        out: PathBuf,
        /// JSON file with demo settings (means, nu, rounds, ...).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Check a config and print the effective settings.
    Validate {
        config: PathBuf,
        #[command(flatten)]
        overrides: OverrideArgs,
    },
}

#[derive(Debug, Clone, Default, clap::Args)]
pub struct OverrideArgs {
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Replaces the theta list; repeatable.
    #[arg(long = "theta")]
    pub thetas: Vec<f64>,
    /// Replaces the seed list; repeatable.
    #[arg(long = "seed")]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long, value_parser = parse_algorithm)]
    pub algorithm: Option<AlgorithmChoice>,
}

fn parse_algorithm(s: &str) -> Result<AlgorithmChoice, String> {
    serde_json::from_value(serde_json::Value::String(s.into()))
        .map_err(|_| format!("unknown algorithm `{s}` (expected fedavg, deltafl or am_meta)"))
}

impl From<OverrideArgs> for Overrides {
    fn from(a: OverrideArgs) -> Self {
        Overrides {
            output_dir: a.output_dir,
            thetas: a.thetas,
            seeds: a.seeds,
            rounds: a.rounds,
            algorithm: a.algorithm,
        }
    }
}

/// A failure and the exit code it maps to.
#[derive(Debug)]
pub enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Config(_) => EXIT_CONFIG,
            Failure::Runtime(_) => EXIT_RUNTIME,
        }
    }

    pub fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Config(e) | Failure::Runtime(e) => e,
        }
    }
}

/// Executes a parsed command, printing progress to stdout.
pub fn execute(command: Command) -> Result<(), Failure> {
    match command {
        Command::Run { config, overrides } => {
            let cfg =
                ExperimentConfig::load(&config, &overrides.into()).map_err(Failure::Config)?;
            let summary = runner::cmd_run(&cfg).map_err(Failure::Runtime)?;
            for t in &summary.thetas {
                let p90 = |m: &std::collections::BTreeMap<String, runner::Spread>| {
                    m.get("p90").map_or(String::from("n/a"), |s| {
                        format!("{:.4} +- {:.4}", s.mean, s.std)
                    })
                };
                let test = t.test_error.as_ref().map_or(String::from("n/a"), p90);
                println!(
                    "theta={} ({}) seeds={} train p90 loss {} | test p90 error {}",
                    t.theta,
                    t.label,
                    t.seeds.len(),
                    p90(&t.train_loss),
                    test
                );
            }
            println!("wrote {}", cfg.output_dir.display());
            Ok(())
        }
        Command::GaussianDemo { out, config } => {
            let cfg = match config {
                None => DemoConfig::default(),
                Some(path) => {
                    let text = std::fs::read_to_string(&path).map_err(|e| {
                        Failure::Config(anyhow::anyhow!("reading {}: {e}", path.display()))
                    })?;
                    serde_json::from_str(&text).map_err(|e| Failure::Config(e.into()))?
                }
            };
            cfg.validate().map_err(Failure::Config)?;
            let report = demo::cmd_gaussian_demo(&cfg, &out).map_err(Failure::Runtime)?;
            println!("{}", demo::describe(&report));
            Ok(())
        }
        Command::Validate { config, overrides } => {
            let cfg =
                ExperimentConfig::load(&config, &overrides.into()).map_err(Failure::Config)?;
            let text = serde_json::to_string_pretty(&cfg.normalized()).expect("config serializes");
            println!("{text}");
            Ok(())
        }
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            f.exit_code()
        }
    }
}
