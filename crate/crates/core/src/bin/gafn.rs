use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gafn::cli_runner::{self, ExperimentSpec};
use gafn::verify;

/// Train and evaluate flow networks with intrinsic intermediate rewards.
#[derive(Parser)]
#[command(name = "gafn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every cell of an experiment spec.
    Run {
        spec: PathBuf,
        /// Cells trained concurrently.
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Upper bound on the number of sweep cells (overrides the spec).
        #[arg(long)]
        cap: Option<usize>,
        /// Output directory (overrides the spec).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Mean and std across seeds of final L1, final modes and mode AUC.
    Summarize { dir: PathBuf },
    /// SVG curves with ±1 std bands, one file per metric.
    Plot { dir: PathBuf },
    /// Oracle, gradient, reduction and telescoping checks.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let code = match cli.command {
        Command::Run { spec, workers, cap, output } => run(&spec, workers, cap, output),
        Command::Summarize { dir } => match cli_runner::summarize(&dir) {
            Ok(s) => {
                print!("{}", s.to_table());
                0
            }
            Err(e) => fail(&e),
        },
        Command::Plot { dir } => match cli_runner::plot(&dir) {
            Ok(files) => {
                for f in files {
                    println!("{}", f.display());
                }
                0
            }
            Err(e) => fail(&e),
        },
        Command::Verify { seed } => match verify::run_all(seed) {
            Ok(checks) => {
                for c in &checks {
                    println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
                }
                if checks.iter().all(|c| c.passed) {
                    0
                } else {
                    3
                }
            }
            Err(e) => {
                eprintln!("error: {e}");
                3
            }
        },
    };
    ExitCode::from(code)
}

fn fail(e: &gafn::Error) -> u8 {
    eprintln!("error: {e}");
    cli_runner::exit_code(e) as u8
}

fn run(spec: &PathBuf, workers: usize, cap: Option<usize>, output: Option<PathBuf>) -> u8 {
    let mut spec = match ExperimentSpec::load(spec) {
        Ok(s) => s,
        Err(e) => return fail(&e),
    };
    if let Some(cap) = cap {
        spec.cap = cap;
    }
    match cli_runner::run(&spec, output.as_deref(), workers) {
        Ok(report) => {
            println!("{} cells, {} failed", report.cells.len(), report.failures.len());
            for (name, msg) in &report.failures {
                eprintln!("cell {name} failed: {msg}");
            }
            if report.failures.is_empty() {
                0
            } else {
                2
            }
        }
        Err(e) => fail(&e),
    }
}
