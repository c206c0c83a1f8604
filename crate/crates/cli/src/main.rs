use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Parser, Subcommand};
use mmi_ssl_cli::commands::{
    run_ablate, run_grad_check, run_logdet_bench, run_mi_validate, run_probe, run_train, RunOptions,
};
use mmi_ssl_cli::{exit_code, ExperimentConfig, NumericalFailure};

#[derive(Parser)]
#[command(
    name = "mmi-ssl",
    version,
    about = "Log-det mutual-information self-supervised learning experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment config (strict JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to the config's output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed override; takes precedence over MMI_SSL_SEED and the file.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train one loss variant, then probe and write metrics and a checkpoint.
    Train(Common),
    /// Train all loss variants on one dataset and compare.
    Ablate(Common),
    /// Check closed-form GGD mutual information against KSG estimates.
    MiValidate(Common),
    /// Compare exact and truncated-series log-determinants.
    LogdetBench(Common),
    /// Compare analytic gradients with finite differences.
    GradCheck(Common),
    /// Probe a saved checkpoint on the configured dataset.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    let (common, checkpoint) = match &cli.command {
        Command::Train(c)
        | Command::Ablate(c)
        | Command::MiValidate(c)
        | Command::LogdetBench(c)
        | Command::GradCheck(c) => (c, None),
        Command::Probe { common, checkpoint } => (common, Some(checkpoint)),
    };
    let cfg = ExperimentConfig::load(&common.config, common.seed)?;
    let opts = RunOptions::new(&cfg, common.out.clone(), common.quiet);
    match cli.command {
        Command::Train(_) => {
            run_train(&cfg, &opts)?;
        }
        Command::Ablate(_) => {
            run_ablate(&cfg, &opts)?;
        }
        Command::MiValidate(_) => {
            run_mi_validate(&cfg, &opts)?;
        }
        Command::LogdetBench(_) => {
            run_logdet_bench(&cfg, &opts)?;
        }
        Command::GradCheck(_) => {
            if !run_grad_check(&cfg, &opts)?.all_pass {
                bail!(NumericalFailure("gradient check exceeded tolerance".into()));
            }
        }
        Command::Probe { .. } => {
            run_probe(&cfg, checkpoint.expect("probe has a checkpoint"), &opts)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
