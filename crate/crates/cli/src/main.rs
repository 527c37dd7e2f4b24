use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use fedrec_cli::commands;
use fedrec_cli::config::load_config;

/// Federated recommendation under Byzantine attack.
#[derive(Parser)]
#[command(name = "fedrec", version)]
struct Cli {
    /// Worker threads (defaults to the number of CPUs). Results do not depend on it.
    #[arg(long, global = true, env = "FEDREC_WORKERS")]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train, attack and evaluate; writes CSV series and a JSON summary.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `federation.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Summary JSON of a clean run to compute metric drops against.
        #[arg(long)]
        clean_baseline: Option<PathBuf>,
    },
    /// Fits a power law to item degrees and prints the breakdown table as CSV.
    Analyze {
        #[arg(long)]
        config: PathBuf,
    },
    /// Prints dataset statistics as JSON.
    Stats {
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring worker pool")?;
    }
    match cli.command {
        Command::Run {
            config,
            seed,
            clean_baseline,
        } => {
            let mut config = load_config(&config)?;
            if let Some(seed) = seed {
                config.federation.seed = seed;
            }
            let baseline = clean_baseline
                .map(|p| commands::read_baseline(&p))
                .transpose()?;
            let out = commands::run(&config, baseline)?;
            let f = &out.summary.final_report;
            println!(
                "epoch {} hr10 {} ndcg10 {} malicious {}{}",
                f.epoch,
                f.hr10,
                f.ndcg10,
                out.summary.malicious_count,
                if out.summary.diverged { " (diverged)" } else { "" }
            );
            for path in &out.files {
                println!("wrote {}", path.display());
            }
        }
        Command::Analyze { config } => {
            let table = commands::analyze(&load_config(&config)?)?;
            print!("{}", table.to_csv());
        }
        Command::Stats { config } => {
            let report = commands::stats(&load_config(&config)?)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
    }
    Ok(())
}
