use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use decaylab::cli::{self, ExperimentConfig, Operation, Overrides, RunError};

/// Decay-rate experiments for nonuniformly hyperbolic maps and billiards.
#[derive(Parser)]
#[command(version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate first-return tails P(h > n).
    Tails(Common),
    /// Estimate correlation sequences.
    Correlate(Common),
    /// Compute the renewal sequence of the discretized LSV transfer operator.
    Renewal(Common),
    /// Sample normalized Birkhoff sums of the return time.
    Birkhoff(Common),
    /// Fit a power law to a CSV column.
    Fit(Common),
    /// Compare measured exponents and constants with predictions.
    Report(Common),
    /// Run the built-in numerical checks.
    Selftest(SelftestArgs),
}

#[derive(Args)]
struct Common {
    /// TOML experiment config.
    config: PathBuf,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct SelftestArgs {
    /// Optional TOML config; a default one is used otherwise.
    config: Option<PathBuf>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct RunArgs {
    /// Worker threads [default: config, then $DECAYLAB_WORKERS, then all cores]
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Parent directory of the run directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn execute(cli: Cli) -> Result<cli::RunOutcome, (RunError, Option<PathBuf>)> {
    let (op, config, run) = match cli.command {
        Command::Tails(c) => (Operation::Tails, Some(c.config), c.run),
        Command::Correlate(c) => (Operation::Correlate, Some(c.config), c.run),
        Command::Renewal(c) => (Operation::Renewal, Some(c.config), c.run),
        Command::Birkhoff(c) => (Operation::Birkhoff, Some(c.config), c.run),
        Command::Fit(c) => (Operation::Fit, Some(c.config), c.run),
        Command::Report(c) => (Operation::Report, Some(c.config), c.run),
        Command::Selftest(c) => (Operation::Selftest, c.config, c.run),
    };
    let cfg = match config {
        Some(path) => cli::load_config(&path).map_err(|e| (e, None))?,
        None => ExperimentConfig::selftest(),
    };
    let ov = Overrides { operation: Some(op), seed: run.seed, workers: run.workers, out: run.out };
    let resolved = cli::resolve(cfg, &ov).map_err(|e| (e, None))?;
    cli::run(&resolved).map_err(|e| (e, Some(resolved.dir.clone())))
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(outcome) => {
            if !outcome.console.is_empty() {
                println!("{}", outcome.console.trim_end());
            }
            let m = &outcome.manifest;
            println!("{} {}: {} output(s), content {}, {:.2}s", m.operation.name(), m.name, m.outputs.len(), &m.content_hash[..12], m.wall_time_s);
            ExitCode::SUCCESS
        }
        Err((e, dir)) => {
            let rec = e.record();
            eprintln!("{rec}");
            if let Some(dir) = dir {
                if fs::create_dir_all(&dir).is_ok() {
                    let _ = fs::write(dir.join("error.json"), format!("{rec:#}\n"));
                }
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
