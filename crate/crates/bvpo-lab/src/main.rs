use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use bvpo_lab::commands::{run_scenarios, Command};
use bvpo_lab::config::load_scenarios;

/// Estimator laboratory for trace-policy preference optimization.
#[derive(Parser)]
#[command(name = "bvpo-lab", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Commands,
}

#[derive(clap::Args)]
struct CommonArgs {
    /// Scenario config (one JSON object or an array of them).
    #[arg(long)]
    config: PathBuf,
    /// Override the run seed of every scenario.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory (prefixes scenario dirs for arrays).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads across scenarios; a single scenario always runs alone.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Commands {
    /// Materialize policies and datasets for inspection.
    GenScenario(CommonArgs),
    /// Exact moments, the MSE curve over alpha, and conditional variances.
    VarianceSweep(CommonArgs),
    /// SGD trajectory with exact per-step error tracking and bound verdicts.
    SgdRun(CommonArgs),
    /// Thinking vs no-thinking stochasticity statistics.
    Diagnostics(CommonArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, args) = match &cli.command {
        Commands::GenScenario(args) => (Command::GenScenario, args),
        Commands::VarianceSweep(args) => (Command::VarianceSweep, args),
        Commands::SgdRun(args) => (Command::SgdRun, args),
        Commands::Diagnostics(args) => (Command::Diagnostics, args),
    };
    let configs = match load_scenarios(&args.config) {
        Ok(configs) => configs,
        Err(err) => {
            eprintln!("{err}");
            return ExitCode::from(err.exit_code());
        }
    };
    let in_array = configs.len() > 1;
    let configs: Vec<_> = configs
        .into_iter()
        .map(|c| c.with_overrides(args.seed, args.out.as_deref(), in_array))
        .collect();
    match run_scenarios(command, &configs, args.jobs.max(1)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{err}");
            ExitCode::from(err.exit_code())
        }
    }
}
