use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use stefan_lob_core::cli;
use stefan_lob_core::config::Mode;

/// Moving-boundary limit order book model: simulation, estimation, and
/// limit-buy decision evaluation.
#[derive(Parser)]
#[command(name = "stefan-lob", version, about)]
struct CliArgs {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Path to the JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Override the config's RNG seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate the model forward and write a synthetic dataset.
    Simulate(RunArgs),
    /// Fit model parameters to a dataset and write report.json.
    Estimate(RunArgs),
    /// Evaluate the optimal limit-buy decision on a book snapshot.
    Optimize(RunArgs),
}

fn main() -> ExitCode {
    let args = CliArgs::parse();
    let (run_args, mode) = match &args.command {
        Command::Simulate(a) => (a, Mode::Simulate),
        Command::Estimate(a) => (a, Mode::Estimate),
        Command::Optimize(a) => (a, Mode::Optimize),
    };
    let code = cli::execute(
        &run_args.config,
        mode,
        run_args.seed,
        run_args.out.clone(),
    );
    ExitCode::from(code as u8)
}
