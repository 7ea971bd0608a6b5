//! `pstd` command-line runner.

mod config;
mod plot;
mod runner;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::ExperimentConfig;
use runner::{RunOptions, CACHE_ENV};

#[derive(Parser)]
#[command(name = "pstd", version, about = "Run predictive state TD experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a configuration file.
    Run {
        config: PathBuf,
        /// Overrides `output_dir` from the configuration.
        #[arg(long, short)]
        out: Option<PathBuf>,
        /// Worker threads for per-seed jobs.
        #[arg(long, short, default_value_t = 1)]
        workers: usize,
    },
    /// Write long-format plot tables for a results directory.
    EmitPlotData { results: PathBuf },
    /// Check a configuration file without running it.
    ValidateConfig { config: PathBuf },
}

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_PARTIAL: u8 = 3;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::ValidateConfig { config } => match ExperimentConfig::load(&config) {
            Ok(loaded) => {
                println!("{}: ok ({}, {} seeds, sha256 {})", config.display(), loaded.config.id(), loaded.config.seeds().len(), loaded.sha256);
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(EXIT_CONFIG)
            }
        },
        Command::Run { config, out, workers } => {
            let loaded = match ExperimentConfig::load(&config) {
                Ok(l) => l,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(EXIT_CONFIG);
                }
            };
            let options = RunOptions { output_dir: out, workers, cache_dir: std::env::var_os(CACHE_ENV).map(PathBuf::from) };
            match runner::run(&loaded, &options) {
                Ok(summary) if summary.complete() => {
                    println!("{}: {} seeds ok, results in {}", loaded.config.id(), summary.seeds_ok.len(), summary.output_dir.display());
                    ExitCode::SUCCESS
                }
                Ok(summary) => {
                    eprintln!(
                        "{}: {} seeds ok, {} failed {:?}; results in {}",
                        loaded.config.id(),
                        summary.seeds_ok.len(),
                        summary.seeds_failed.len(),
                        summary.seeds_failed,
                        summary.output_dir.display()
                    );
                    ExitCode::from(EXIT_PARTIAL)
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(EXIT_FAILURE)
                }
            }
        }
        Command::EmitPlotData { results } => match plot::emit_plot_data(&results) {
            Ok(path) => {
                println!("wrote {}", path.display());
                ExitCode::SUCCESS
            }
            Err(e @ plot::PlotError::Missing(_)) => {
                eprintln!("error: {e}");
                ExitCode::from(EXIT_CONFIG)
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(EXIT_FAILURE)
            }
        },
    }
}
