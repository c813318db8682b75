//! `condmean`: analyse a trial dataset, run the simulation study, or plan the
//! number of bootstrap replicates.

mod analyze;
mod config;
mod manifest;
mod plan;
mod simulate;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "condmean", version, about = "Conditional mean imputation for longitudinal trials")]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate the treatment effect of a long-format CSV dataset.
    Analyze(analyze::AnalyzeArgs),
    /// Write the conditional-mean-imputed dataset with a provenance column.
    Impute(analyze::ImputeArgs),
    /// Run the simulation study and write a summary table.
    Simulate(simulate::SimulateArgs),
    /// Accuracy of bootstrap p-values for a given number of replicates.
    BootstrapPlan(plan::PlanArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build_global() {
            eprintln!("error: could not start {jobs} workers: {e}");
            return ExitCode::FAILURE;
        }
    }
    let args: Vec<String> = std::env::args().collect();
    let result = match cli.command {
        Command::Analyze(a) => analyze::run(a, &args),
        Command::Impute(a) => analyze::run_impute(a, &args),
        Command::Simulate(a) => simulate::run(a, &args),
        Command::BootstrapPlan(a) => plan::run(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

/// Output directory, created on demand.
fn ensure_dir(dir: &PathBuf) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| anyhow::anyhow!("cannot create output directory {}: {e}", dir.display()))
}
