//! `mixlab`: solve, sweep, analyze and simulate timing-anonymity mixes.
//!
//! Single results are printed as JSON records, grids as CSV. Exit codes are 0
//! on success, 1 for usage or domain errors and 2 when the requested rates
//! fall in a regime with no stationary answer.

mod commands;
mod grid;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mixlab_core::MixError;

use crate::grid::GridSpec;

#[derive(Debug, Parser)]
#[command(
    name = "mixlab",
    version,
    about = "Anonymity of timing-constrained mixes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Optimal single-output mix for one rate pair.
    Solve(SolveArgs),
    /// Solve over a rate grid and write one CSV row per cell.
    Sweep(SweepArgs),
    /// Two-output mix: threshold analysis, simulation, threshold staircase.
    Mix2 {
        #[command(subcommand)]
        command: Mix2Command,
    },
    /// Run the slot-level simulator and print its report.
    Simulate(SimulateArgs),
    /// Lower bound on the eavesdropper's error probability for an anonymity level.
    Fano {
        #[arg(long)]
        anonymity: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Debug, Args)]
struct SolveArgs {
    #[arg(long)]
    lambda_r: f64,
    #[arg(long)]
    lambda_b: f64,
    /// Strict delay bound in slots (0 or 1).
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(0..=1))]
    delay: u8,
    #[arg(long, default_value_t = mixlab_core::mix1::solver::DEFAULT_TOL)]
    tol: f64,
    #[arg(long, default_value_t = mixlab_core::mix1::solver::DEFAULT_MAX_ITER)]
    max_iter: usize,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
}

#[derive(Debug, Args)]
struct SweepArgs {
    /// Red rate axis as start:stop:steps.
    #[arg(long)]
    grid_r: GridSpec,
    /// Blue rate axis as start:stop:steps.
    #[arg(long)]
    grid_b: GridSpec,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(0..=1))]
    delay: u8,
    #[arg(long, default_value_t = mixlab_core::mix1::solver::DEFAULT_TOL)]
    tol: f64,
    #[arg(long, default_value_t = mixlab_core::mix1::solver::DEFAULT_MAX_ITER)]
    max_iter: usize,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Mix2Command {
    /// Traffic ratio, optimal threshold, mean backlog and drop rate.
    Analyze {
        #[arg(long)]
        lambda_r: f64,
        #[arg(long)]
        lambda_b: f64,
    },
    /// Simulate the optimal threshold policy, or head-of-line pairing with `--T`.
    Simulate {
        #[arg(long)]
        lambda_r: f64,
        #[arg(long)]
        lambda_b: f64,
        #[arg(long, default_value_t = 1_000_000)]
        horizon: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        warmup: Option<u64>,
        /// Strict delay for head-of-line pairing.
        #[arg(long = "T", alias = "delay")]
        delay: Option<u64>,
    },
    /// Optimal threshold and mean backlog over a grid of traffic ratios (CSV).
    Staircase {
        #[arg(long, default_value_t = 0.99)]
        rho_max: f64,
        #[arg(long, default_value_t = 991)]
        steps: usize,
        /// Print the ratios where the optimal threshold jumps instead.
        #[arg(long)]
        jumps: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ScenarioKind {
    Mix1T0,
    Mix1T1,
    Mix1General,
    Mix2Threshold,
    Mix2Hol,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StrategyKind {
    FixedDelayPermute,
    FifoPassThrough,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[arg(long, value_enum)]
    scenario: ScenarioKind,
    #[arg(long)]
    lambda_r: f64,
    #[arg(long)]
    lambda_b: f64,
    /// One-slot policy: `optimal`, `p,d,r`, or all 13 parameters comma-separated.
    #[arg(long, default_value = "optimal")]
    policy: String,
    /// Initial queue for mix1-t1: -, R, B or RB.
    #[arg(long, default_value = "-")]
    initial: String,
    /// Delay bound for mix1-general and mix2-hol.
    #[arg(long)]
    delay: Option<u64>,
    #[arg(long, value_enum, default_value_t = StrategyKind::FixedDelayPermute)]
    strategy: StrategyKind,
    /// Threshold for mix2-threshold; the optimum when absent.
    #[arg(long)]
    m: Option<u32>,
    #[arg(long, default_value_t = 1_000_000)]
    horizon: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    warmup: Option<u64>,
    /// Write one JSON line per slot to this file.
    #[arg(long)]
    dump_trace: Option<PathBuf>,
    /// Abort on the first delay violation.
    #[arg(long)]
    strict: bool,
}

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Mix(MixError),
    Io(std::io::Error),
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Mix(e) if e.is_regime() => 2,
            _ => 1,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(msg) => write!(f, "usage error: {msg}"),
            Failure::Mix(e) => write!(f, "{e}"),
            Failure::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

impl From<MixError> for Failure {
    fn from(e: MixError) -> Self {
        Failure::Mix(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Io(e)
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Failure::Io(e.into())
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Solve(a) => commands::solve(&a),
        Command::Sweep(a) => commands::sweep(&a),
        Command::Mix2 { command } => match command {
            Mix2Command::Analyze { lambda_r, lambda_b } => {
                commands::mix2_analyze(lambda_r, lambda_b)
            }
            Mix2Command::Simulate {
                lambda_r,
                lambda_b,
                horizon,
                seed,
                warmup,
                delay,
            } => commands::mix2_simulate(lambda_r, lambda_b, horizon, seed, warmup, delay),
            Mix2Command::Staircase {
                rho_max,
                steps,
                jumps,
                out,
            } => commands::mix2_staircase(rho_max, steps, jumps, out.as_deref()),
        },
        Command::Simulate(a) => commands::simulate(&a),
        Command::Fano { anonymity } => commands::fano(anonymity),
    }
}

fn main() -> ExitCode {
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
            eprintln!("mixlab: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
