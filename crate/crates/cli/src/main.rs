//! `sidthe-smpc`: simulate outbreaks, run receding-horizon experiments and
//! export invariant boxes and scenario sets.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{MpcMode, Overrides, PlantChoice};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "sidthe-smpc", version, about)]
struct Cli {
    /// JSON configuration file; defaults are used for absent fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Controller formulation.
    #[arg(long, global = true, value_enum)]
    mode: Option<MpcMode>,
    /// Which plants to simulate in `mpc`.
    #[arg(long, global = true, value_enum)]
    plants: Option<PlantChoice>,
    /// Plants file for `--plants file`.
    #[arg(long, global = true)]
    plants_file: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Prediction horizon in control blocks.
    #[arg(long, global = true)]
    horizon_blocks: Option<usize>,
    /// Simulated days.
    #[arg(long, global = true)]
    days: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Open-loop simulation of `model.theta` under `experiment.open_loop`.
    Simulate,
    /// Closed-loop MPC experiment over the selected plants.
    Mpc,
    /// Nominal and robust invariant boxes.
    InvariantSet,
    /// Export the controller's scenario set.
    Scenarios,
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("SIDTHE_SMPC_THREADS") else {
        return Ok(());
    };
    let n: usize = v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        CliError::Config(format!(
            "SIDTHE_SMPC_THREADS must be a positive integer, got `{v}`"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Runtime(e.to_string()))
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    let overrides = Overrides {
        mode: cli.mode,
        plants: cli.plants,
        plants_file: cli.plants_file,
        out: cli.out,
        seed: cli.seed,
        horizon_blocks: cli.horizon_blocks,
        days: cli.days,
    };
    let cfg = config::Config::load(cli.config.as_deref())?.resolve(&overrides)?;
    let path = cli.config.as_deref();
    match cli.command {
        Command::Simulate => commands::simulate(&cfg, path),
        Command::Mpc => commands::mpc(&cfg, path),
        Command::InvariantSet => commands::invariant_set(&cfg, path),
        Command::Scenarios => commands::scenarios(&cfg, path),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("sidthe-smpc: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
