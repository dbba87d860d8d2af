use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use augbias::experiment::{self, PlanError, RunOptions, EXIT_INVALID, EXIT_OK};

#[derive(Parser)]
#[command(name = "augbias", version, about = "Train and compare bias-corrected augmentation schemes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (cell, seed) pair of an experiment file.
    Run {
        config: PathBuf,
        /// Added to every seed in the file.
        #[arg(long, default_value_t = 0)]
        seed_offset: u64,
        /// Independent runs executed in parallel.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Check an experiment file and print the resolved plan.
    Validate { config: PathBuf },
    /// Rebuild the aggregate table of an output directory.
    Report { dir: PathBuf },
}

fn exit(code: i32) -> ExitCode {
    ExitCode::from(code as u8)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Run { config, seed_offset, jobs } => {
            let plan = match experiment::validate_config(&config) {
                Ok(p) => p,
                Err(e) => {
                    eprintln!("{e}");
                    return exit(EXIT_INVALID);
                }
            };
            match experiment::run_plan(&plan, RunOptions { jobs, seed_offset }) {
                Ok(out) => {
                    print!("{}", experiment::format_table(&out.aggregate));
                    for r in out.runs.iter().filter(|r| r.message.is_some()) {
                        eprintln!("{} seed {}: {}", r.cell, r.seed, r.message.as_deref().unwrap_or_default());
                    }
                    exit(out.exit_code())
                }
                Err(e @ (PlanError::Config(_) | PlanError::Io(_))) => {
                    eprintln!("{e}");
                    exit(EXIT_INVALID)
                }
            }
        }
        Command::Validate { config } => match experiment::validate_config(&config) {
            Ok(plan) => {
                println!("{}", serde_json::to_string_pretty(&plan).expect("plans serialise"));
                exit(EXIT_OK)
            }
            Err(e) => {
                eprintln!("{e}");
                exit(EXIT_INVALID)
            }
        },
        Command::Report { dir } => match experiment::report(&dir) {
            Ok(rows) => {
                print!("{}", experiment::format_table(&rows));
                exit(EXIT_OK)
            }
            Err(e) => {
                eprintln!("cannot report on {}: {e}", dir.display());
                exit(EXIT_INVALID)
            }
        },
    }
}
