use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedkrso_cli::commands;
use fedkrso_cli::{code_for, exit_code};

#[derive(Parser)]
#[command(
    name = "fedkrso",
    version,
    about = "Deterministic federated-learning simulator: seed-based random-subspace \
             optimization with full fine-tuning and low-rank adapter baselines"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute one run and write trace.csv, timing.csv, manifest.json, and
    /// summary.json. Accepts a TOML config or a manifest.json for replay.
    Run {
        config: PathBuf,
        /// Output directory (default: <config stem>_out under $FEDKRSO_OUTPUT_ROOT).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the cross product of a sweep grid over a base config; writes one
    /// artifact directory per run plus a combined comparison.csv.
    Sweep {
        config: PathBuf,
        grid: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Parallel grid workers (overrides grid.workers).
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Print the per-round communication and memory cost table for all
    /// methods at this config's shapes.
    Costs {
        config: PathBuf,
        /// Also write the table as CSV to this path.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Bytes per parameter for the bytes view (8 = f64, 2 = bf16-equivalent).
        #[arg(long, default_value_t = 8)]
        element_width: usize,
    },
    /// Build the configured partition and report per-client label
    /// histograms and the mean total-variation distance.
    PartitionReport {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Run { config, out } => match commands::run_command(&config, out.as_deref()) {
            Ok(_) => exit_code::SUCCESS,
            Err(e) => fail(&e),
        },
        Command::Sweep {
            config,
            grid,
            out,
            workers,
        } => match commands::sweep_command(&config, &grid, out.as_deref(), workers) {
            Ok(outcome) => {
                println!(
                    "sweep complete: {}/{} runs succeeded -> {}",
                    outcome.completed,
                    outcome.points,
                    outcome.comparison_csv.display()
                );
                if outcome.failures.is_empty() {
                    exit_code::SUCCESS
                } else {
                    for (run_id, message) in &outcome.failures {
                        eprintln!("failed {run_id}: {message}");
                    }
                    exit_code::PARTIAL_SWEEP
                }
            }
            Err(e) => fail(&e),
        },
        Command::Costs {
            config,
            csv,
            element_width,
        } => match commands::costs_command(&config, csv.as_deref(), element_width) {
            Ok(table) => {
                print!("{table}");
                exit_code::SUCCESS
            }
            Err(e) => fail(&e),
        },
        Command::PartitionReport { config, out } => {
            match commands::partition_report_command(&config, out.as_deref()) {
                Ok(text) => {
                    print!("{text}");
                    exit_code::SUCCESS
                }
                Err(e) => fail(&e),
            }
        }
    };
    ExitCode::from(code as u8)
}

fn fail(err: &fedkrso::Error) -> i32 {
    eprintln!("error: {err}");
    code_for(err)
}
