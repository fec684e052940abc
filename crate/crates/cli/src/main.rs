//! `rrdr`: fit, predict, simulate and curve emission from the command line.
//!
//! Exit codes: 0 success, 1 other failure, 2 I/O, 3 invalid specification or
//! configuration, 4 non-convergence, 5 singular matrix. Failures are also
//! reported as a JSON object on stderr.

mod config;
mod curves;
mod fit;
mod output;
mod predict;
mod simulate;

use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rrdr_core::Error;

#[derive(Parser)]
#[command(name = "rrdr", version, about = "Relative risk and risk difference regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model to a CSV dataset.
    Fit(fit::FitArgs),
    /// Predict risks and effects at new covariate rows from a saved fit.
    Predict(predict::PredictArgs),
    /// Run a Monte Carlo study over misspecification scenarios.
    Simulate(simulate::SimulateArgs),
    /// Tabulate the map from (θ, φ) to the two arm risks.
    Curves(curves::CurvesArgs),
}

fn exit_code(err: &Error) -> u8 {
    match err.category() {
        "io" => 2,
        "spec" => 3,
        "convergence" => 4,
        "singularity" => 5,
        _ => 1,
    }
}

fn report(err: &Error) -> ExitCode {
    let code = exit_code(err);
    let body = serde_json::json!({
        "error": {
            "category": err.category(),
            "message": err.to_string(),
            "exit_code": code,
        }
    });
    eprintln!("{body}");
    ExitCode::from(code)
}

fn configure_workers() -> rrdr_core::Result<()> {
    let Ok(raw) = std::env::var("RRDR_WORKERS") else {
        return Ok(());
    };
    let threads: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&t| t > 0)
        .ok_or_else(|| Error::Spec(format!("RRDR_WORKERS must be a positive integer, got '{raw}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::Spec(format!("worker pool: {e}")))
}

fn run(cli: Cli) -> rrdr_core::Result<()> {
    configure_workers()?;
    match cli.command {
        Command::Fit(args) => fit::run(args),
        Command::Predict(args) => predict::run(args),
        Command::Simulate(args) => simulate::run(args),
        Command::Curves(args) => curves::run(args),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return report(&Error::Spec(e.to_string().trim_end().to_owned())),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(&e),
    }
}
