use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ddmpc_core::controller::ConstraintMode;
use ddmpc_core::estimator::{build_stack, solve_theta_ls};
use ddmpc_core::harness::{cstr_scenario, run_acceptance, suite, CriterionResult, Scenario};
use ddmpc_core::model::dynamics_from_theta;
use ddmpc_core::simulator::read_trajectory_csv;
use ddmpc_core::Error;

#[derive(Parser)]
#[command(name = "ddmpc", version, about = "Data-driven predictive control: simulate, benchmark and identify")]
struct Cli {
    /// Output directory for CSV and JSON artifacts.
    #[arg(long, global = true, default_value = "results")]
    out: PathBuf,
    /// Seed for the excitation signal and synthetic checks.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Input constraint handling, overriding the scenario.
    #[arg(long, global = true, value_enum)]
    constraint: Option<Constraint>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Constraint {
    Saturate,
    Squash,
    None,
}

impl From<Constraint> for ConstraintMode {
    fn from(c: Constraint) -> Self {
        match c {
            Constraint::Saturate => Self::Saturate,
            Constraint::Squash => Self::Squash,
            Constraint::None => Self::None,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario file (TOML, or JSON by extension).
    Run { scenario: PathBuf },
    /// Run a built-in benchmark.
    Bench {
        #[arg(value_enum)]
        name: Benchmark,
    },
    /// Run the acceptance suite; exits nonzero if any check fails.
    Accept,
    /// Least-squares identification from a logged trajectory.
    Identify {
        trajectory: PathBuf,
        /// Window length in seconds; defaults to the logging step.
        #[arg(long)]
        delta_t: Option<f64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Benchmark {
    Cstr,
}

/// Failure classes mapped to exit codes.
enum Failure {
    /// Missing or unreadable input, malformed configuration.
    Input(Error),
    /// A numerical failure during the run.
    Run(Error),
    /// Checks ran but did not all pass.
    Checks,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Io(_) | Error::Parse(_) | Error::InvalidScenario(_) | Error::InvalidBounds(_) | Error::DimensionMismatch { .. } => {
                Self::Input(e)
            }
            other => Self::Run(other),
        }
    }
}

fn apply_overrides(scenario: &mut Scenario, cli: &Cli) {
    if let Some(seed) = cli.seed {
        scenario.seed = seed;
    }
    if let Some(c) = cli.constraint {
        scenario.config.constraint_mode = c.into();
    }
}

fn simulate(mut scenario: Scenario, cli: &Cli) -> Result<(), Failure> {
    apply_overrides(&mut scenario, cli);
    let eval = run_acceptance(&scenario)?;
    eval.write_to(&cli.out)?;
    print_results(&eval.report.criteria);
    if let Some(msg) = &eval.report.estimator_divergence {
        eprintln!("estimator diverged: {msg}");
    }
    println!("artifacts written to {}", cli.out.display());
    Ok(())
}

fn print_results(results: &[CriterionResult]) {
    for c in results {
        println!("{} [{}] {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.id, c.name, c.detail);
    }
}

fn accept(cli: &Cli) -> Result<(), Failure> {
    let mut scenario = cstr_scenario();
    apply_overrides(&mut scenario, cli);
    let eval = run_acceptance(&scenario)?;
    eval.write_to(&cli.out)?;
    let mut results = suite::run_suite(cli.seed.unwrap_or(scenario.seed))?;
    results.extend(eval.report.criteria.iter().cloned());
    results.sort_by_key(|c| c.id);
    print_results(&results);
    let path = cli.out.join("acceptance.json");
    let file = File::create(&path).map_err(Error::from)?;
    serde_json::to_writer_pretty(file, &results).map_err(|e| Error::Parse(e.to_string()))?;
    if results.iter().all(|c| c.pass) {
        Ok(())
    } else {
        Err(Failure::Checks)
    }
}

fn identify(path: &Path, delta_t: Option<f64>) -> Result<(), Failure> {
    let file = File::open(path).map_err(Error::from)?;
    let traj = read_trajectory_csv(BufReader::new(file))?;
    let dt = delta_t.unwrap_or(traj.step());
    let last = traj.last().map_or(0.0, |s| s.t);
    let start = traj.start_time().unwrap_or(0.0);
    let n_k = ((last - start) / dt).floor() as usize;
    let stack = build_stack(&traj, last, dt, n_k)?;
    let theta = solve_theta_ls(&stack)?;
    let (a, b) = dynamics_from_theta(&theta)?;
    println!("windows: {}, gram eigenvalues: [{:.3e}, {:.3e}]", stack.len(), stack.min_eig(), stack.max_eig());
    println!("A ={a}B ={b}");
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run { scenario } => Scenario::load(scenario).map_err(Failure::from).and_then(|s| simulate(s, &cli)),
        Command::Bench { name: Benchmark::Cstr } => simulate(cstr_scenario(), &cli),
        Command::Accept => accept(&cli),
        Command::Identify { trajectory, delta_t } => identify(trajectory, *delta_t),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(Failure::Checks) => ExitCode::from(1),
    }
}
