use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "fediod",
    about = "Desk-scale simulator for one-way federated knowledge distillation",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a JSON config file.
    ///
    /// Writes report.json, losses.csv, ledger.csv, accuracy.svg and model
    /// checkpoints into the output directory. Set FEDIOD_LOG=quiet|info|debug
    /// to control progress output.
    Run {
        /// Path to the run configuration
        config: PathBuf,
        /// Override the config's output directory
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Replace the config's seed list with a single seed
        #[arg(long)]
        seed_override: Option<u64>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, output_dir, seed_override } => {
            match fediod::runner::run_from_path(&config, output_dir.as_deref(), seed_override) {
                Ok(report) => {
                    println!(
                        "{} finished: accuracy {:.4} +/- {:.4} over {} seed(s); report at {}/report.json",
                        report.config.mode,
                        report.final_mean,
                        report.final_std,
                        report.config.seeds.len(),
                        report.config.output_dir
                    );
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::FAILURE
                }
            }
        }
    }
}
