use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dtbregman::config::{compare, run_experiment, ExperimentConfig, Overrides};
use dtbregman::harness::{property_suite, CheckFamily, SuiteOptions};
use dtbregman::runtime::Backend;
use dtbregman::{AlgorithmKind, Error};

#[derive(Parser)]
#[command(
    name = "dtbregman",
    version,
    about = "Delay-tolerant asynchronous Bregman proximal gradient experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one variant and write its trace and summary.
    Run(ExperimentArgs),
    /// Run every variant listed in the config on the same problem.
    Compare(ExperimentArgs),
    /// Run the property suite and print a pass/fail table.
    Check(CheckArgs),
    /// Write the configured problem to disk.
    Gen(ExperimentArgs),
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    algo: Option<AlgorithmKind>,
    #[arg(long)]
    backend: Option<Backend>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; replaces the file's output section.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    only: Option<CheckFamily>,
    #[arg(long, default_value_t = 0.99)]
    gamma_multiplier: f64,
}

const EXIT_PROPERTY: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

fn load(args: &ExperimentArgs) -> dtbregman::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    cfg.apply(&Overrides {
        algo: args.algo,
        backend: args.backend,
        seed: args.seed,
        out: args.out.clone(),
    })?;
    Ok(cfg)
}

fn print_json<T: serde::Serialize>(value: &T) -> dtbregman::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn execute(command: Command) -> dtbregman::Result<u8> {
    match command {
        Command::Run(args) => {
            let cfg = load(&args)?;
            let (_, summary) = run_experiment(&cfg)?;
            print_json(&summary)?;
        }
        Command::Compare(args) => {
            let cfg = load(&args)?;
            let summary = compare(&cfg)?;
            print_json(&summary.best)?;
            for run in summary.runs.iter().filter(|r| r.error.is_some()) {
                eprintln!(
                    "{} at multiplier {}: {}",
                    run.variant,
                    run.gamma_multiplier,
                    run.error.as_deref().unwrap_or_default()
                );
            }
        }
        Command::Check(args) => {
            let report = property_suite(&SuiteOptions {
                seed: args.seed,
                gamma_multiplier: args.gamma_multiplier,
                only: args.only,
            });
            println!("{}", report.table());
            if !report.passed() {
                return Ok(EXIT_PROPERTY);
            }
        }
        Command::Gen(args) => {
            let Some(dir) = args.out.clone() else {
                return Err(Error::Config("gen needs --out".into()));
            };
            let mut cfg = load(&args)?;
            cfg.problem.path = None;
            let data = cfg.data_config();
            let problem = dtbregman::problem::generate(&data)?;
            problem.save(&dir, &data.meta(&problem))?;
            println!("wrote {}", dir.display());
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            let numerical = e.is_numerical() || matches!(e.root(), Error::Protocol(_));
            ExitCode::from(if numerical { EXIT_NUMERICAL } else { EXIT_CONFIG })
        }
    }
}
