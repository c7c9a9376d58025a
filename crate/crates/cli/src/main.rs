//! `dmpc`: generate scenarios, plan transitions, run benchmark sweeps and
//! verify trajectory files.
//!
//! Exit codes: 0 success, 1 I/O error, 2 invalid input, 3 planner or check
//! failure, 64 usage error.

mod bench;
mod check;
mod common;
mod gen;
mod solve;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use common::CliError;

#[derive(Parser)]
#[command(name = "dmpc", version, about = "Distributed MPC planner for multiagent point-to-point transitions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a random scenario file.
    Gen(gen::GenArgs),
    /// Plan one transition and write its trajectory and metrics.
    Solve(solve::SolveArgs),
    /// Run a seeded benchmark sweep.
    Bench(bench::BenchArgs),
    /// Verify a trajectory file against its scenario.
    Check(check::CheckArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let _ = e.print();
            return ExitCode::from(common::EXIT_USAGE);
        }
    };
    let result = match cli.command {
        Command::Gen(a) => gen::run(a),
        Command::Solve(a) => solve::run(a),
        Command::Bench(a) => bench::run(a),
        Command::Check(a) => check::run(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(CliError { code, message }) => {
            eprintln!("error: {message}");
            ExitCode::from(code)
        }
    }
}
