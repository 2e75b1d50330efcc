use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use ttalab_cli::config::{ExperimentConfig, Overrides};
use ttalab_cli::VerifySuite;

/// Desk-scale laboratory for batch-coupled attacks on test-time adaptation.
#[derive(Parser)]
#[command(name = "ttalab", version, about)]
struct Cli {
    /// Experiment configuration file (TOML). Defaults are used when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overwrite existing output files.
    #[arg(long, global = true)]
    force: bool,
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the deployed model on clean data and store the checkpoint.
    Pretrain,
    /// Craft the perturbation artifact against a checkpoint.
    Attack {
        /// Checkpoint produced by `pretrain`.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Stream deployment with the paired no-attack baseline and metrics.
    Deploy {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Artifact produced by `attack`.
        #[arg(long)]
        artifact: PathBuf,
    },
    /// Run numerical verification suites.
    Verify {
        /// gradcheck, solver-oracle, descent-theorem, reduction-checks, all.
        #[arg(long, default_value = "all")]
        suite: VerifySuite,
    },
    /// Expand the configured sweep axes and run every point.
    Sweep,
    /// Print the effective configuration (file plus overrides) as TOML.
    ShowConfig,
}

fn effective_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    cli.overrides.apply(&mut config)?;
    Ok(config)
}

fn run(cli: Cli) -> Result<bool> {
    let config = effective_config(&cli)?;
    match &cli.command {
        Command::Pretrain => {
            ttalab_cli::cmd_pretrain(&config, &cli.out, cli.force)?;
            Ok(true)
        }
        Command::Attack { checkpoint } => {
            ttalab_cli::cmd_attack(&config, checkpoint, &cli.out, cli.force)?;
            Ok(true)
        }
        Command::Deploy {
            checkpoint,
            artifact,
        } => {
            ttalab_cli::cmd_deploy(&config, checkpoint, artifact, &cli.out, cli.force)?;
            Ok(true)
        }
        Command::Verify { suite } => {
            let pass = ttalab_cli::cmd_verify(*suite, config.spec.seed, Some(&cli.out), cli.force)?;
            Ok(pass)
        }
        Command::Sweep => {
            ttalab_cli::cmd_sweep(&config, &cli.out, cli.force)?;
            Ok(true)
        }
        Command::ShowConfig => {
            print!("{}", config.to_toml()?);
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
