//! Command-line front end: generate a synthetic dataset, train the
//! descriptor network, build the place map, localize single scans, and run
//! the evaluation sweep.

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use oreos::config::RunConfig;
use oreos::pipeline::{
    cmd_build_map, cmd_eval, cmd_generate, cmd_localize, cmd_train, format_localization,
    format_report,
};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "oreos", version, about = "LiDAR metric global localization pipeline")]
struct Cli {
    #[command(flatten)]
    common: CommonArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Plain-text key=value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Random seed (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides the config file).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Additional key=value overrides, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic world and write the train/eval datasets.
    Generate,
    /// Train the descriptor network on the training dataset.
    Train {
        /// Number of training epochs.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Extract descriptors for the map split and persist the place map.
    BuildMap,
    /// Localize one binary scan file against the persisted map.
    Localize {
        /// Scan file (packed float32 x, y, z, reflectance records).
        #[arg(long)]
        scan: PathBuf,
        /// Number of place candidates to retrieve.
        #[arg(long, default_value_t = 1)]
        k: usize,
    },
    /// Run the rotational-shift evaluation and write the CSV reports.
    Eval,
}

fn effective_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut overrides = Vec::new();
    if let Some(out) = &cli.common.out {
        overrides.push(format!("out_dir={}", out.display()));
    }
    if let Some(seed) = cli.common.seed {
        overrides.push(format!("seed={seed}"));
    }
    overrides.extend(cli.common.set.iter().cloned());
    if let Command::Train { epochs: Some(epochs) } = &cli.command {
        overrides.push(format!("train.epochs={epochs}"));
    }
    RunConfig::load(cli.common.config.as_deref(), &overrides).context("loading configuration")
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let config = effective_config(&cli)?;
    match &cli.command {
        Command::Generate => {
            let summary = cmd_generate(&config)?;
            println!(
                "wrote {} training scans ({}) and {} evaluation scans ({})",
                summary.train_scans,
                summary.train_manifest.display(),
                summary.eval_scans,
                summary.eval_manifest.display()
            );
        }
        Command::Train { .. } => {
            let summary = cmd_train(&config)?;
            println!(
                "trained {} steps, loss {:.4} -> {:.4}, checkpoint {}",
                summary.steps,
                summary.first_loss,
                summary.last_loss,
                summary.checkpoint.display()
            );
        }
        Command::BuildMap => {
            let summary = cmd_build_map(&config)?;
            println!("map with {} entries written to {}", summary.entries, summary.map_file.display());
        }
        Command::Localize { scan, k } => {
            let result = cmd_localize(&config, scan, *k)?;
            print!("{}", format_localization(&result));
        }
        Command::Eval => {
            let report = cmd_eval(&config)?;
            print!("{}", format_report(&report));
            println!("csv reports written to {}", config.out_dir.display());
        }
    }
    Ok(())
}
