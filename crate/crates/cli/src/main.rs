//! `pvrank`: run attribution pipelines, generate synthetic inputs and
//! re-render reports.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use pvrank::corpus::SynthSpec;
use pvrank::features::SynthFeatureSpec;
use pvrank::pipeline::{self, RunConfig, RunOptions, SynthOptions, WORKERS_ENV};

#[derive(Debug, Parser)]
#[command(name = "pvrank", version, about = "Training-data attribution pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run every stage declared in a TOML config.
    Run {
        config: PathBuf,
        /// Worker threads; overrides the environment variable.
        #[arg(long, env = WORKERS_ENV)]
        workers: Option<usize>,
    },
    /// Write a synthetic corpus, feature bundles and a starter config.
    Synth {
        #[arg(long, default_value = "synth")]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        parents: usize,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 10.0)]
        snr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Target-model names; one query set per model.
        #[arg(long, value_delimiter = ',')]
        models: Vec<String>,
    },
    /// Re-render report.md from the cells of a finished run.
    Report { run_dir: PathBuf },
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, workers } => {
            let cfg = RunConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
            if workers == Some(0) {
                anyhow::bail!("--workers must be positive");
            }
            let outcome = pipeline::run(&cfg, &RunOptions { workers })?;
            log::info!(
                "{} stages executed, {} loaded from cache",
                outcome.executed.len(),
                outcome.cached.len()
            );
            println!("{}", outcome.run_dir.display());
        }
        Command::Synth {
            out,
            parents,
            dim,
            snr,
            seed,
            models,
        } => {
            let mut corpus = SynthSpec::default();
            if !models.is_empty() {
                corpus.target_models = models;
            }
            let options = SynthOptions {
                n_parents: parents,
                seed,
                corpus,
                features: SynthFeatureSpec {
                    dim,
                    snr,
                    ..Default::default()
                },
            };
            let written = pipeline::make_synth(&out, &options)?;
            println!("{}", written.config_path.display());
        }
        Command::Report { run_dir } => {
            let path = pipeline::report(&run_dir)?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
