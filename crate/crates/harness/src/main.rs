use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use klrl_harness::checkpoint::Checkpoint;
use klrl_harness::config::ExperimentConfig;
use klrl_harness::klfield;
use klrl_harness::runtime::{evaluate_policy, run_training};
use klrl_harness::verify;

/// Hierarchical KL-regularized reinforcement learning at desk scale.
#[derive(Parser)]
#[command(name = "klrl", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunFlags {
    /// Random seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory override.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Total learner frames override.
    #[arg(long)]
    frames: Option<u64>,
    /// Fresh-data training: replay holds one batch, sampled once.
    #[arg(long)]
    quasi_onpolicy: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train from scratch per the config file.
    Train {
        config: PathBuf,
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Train with components reused from a pretrained checkpoint.
    Transfer {
        config: PathBuf,
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Evaluate a checkpoint greedily on the configured environment.
    Eval {
        checkpoint: PathBuf,
        config: PathBuf,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run every oracle check; nonzero exit on any failure.
    Verify,
    /// Dump the per-cell, per-action KL-reward field of a grid checkpoint.
    KlField {
        checkpoint: PathBuf,
        config: PathBuf,
        /// Output file (defaults to stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: &PathBuf, flags: &RunFlags) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_file(path)?;
    if let Some(seed) = flags.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &flags.out_dir {
        cfg.out_dir = dir.clone();
    }
    if let Some(frames) = flags.frames {
        cfg.total_frames = frames;
    }
    if flags.quasi_onpolicy {
        cfg.quasi_onpolicy = true;
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run() -> Result<ExitCode> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train { config, flags } => {
            let cfg = load_config(&config, &flags)?;
            if cfg.transfer_mode.is_some() {
                bail!("config sets transfer.mode; use the `transfer` subcommand");
            }
            let outcome = run_training(&cfg)?;
            let last = outcome.evals.last().context("run produced no evaluations")?;
            println!(
                "done: {} frames, final success {:.3}, mean return {:.3}",
                last.learner_steps, last.success_rate, last.mean_return
            );
            println!("checkpoint: {}", outcome.checkpoint_path.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Transfer { config, flags } => {
            let cfg = load_config(&config, &flags)?;
            if cfg.transfer_mode.is_none() {
                bail!("transfer runs need transfer.mode and transfer.checkpoint in the config");
            }
            let outcome = run_training(&cfg)?;
            let last = outcome.evals.last().context("run produced no evaluations")?;
            println!(
                "done: {} frames, final success {:.3}, mean return {:.3}",
                last.learner_steps, last.success_rate, last.mean_return
            );
            println!("checkpoint: {}", outcome.checkpoint_path.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval { checkpoint, config, episodes, seed } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let seed = seed.unwrap_or(cfg.seed);
            let (success, mean_return) = evaluate_policy(&ckpt.stack, &cfg, episodes, seed)?;
            println!("episodes: {episodes}");
            println!("success_rate: {success}");
            println!("mean_return: {mean_return}");
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify => {
            let report = verify::run(None);
            print!("{}", report.render());
            if report.all_passed() {
                println!("verify: all {} checks passed", report.checks.len());
                Ok(ExitCode::SUCCESS)
            } else {
                println!("verify: FAILED ({:?})", report.failed_names());
                Ok(ExitCode::FAILURE)
            }
        }
        Command::KlField { checkpoint, config, out } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let rows = klfield::kl_field(
                &ckpt,
                &cfg.grid_config(),
                cfg.klfield_goal,
                cfg.klfield_prior_samples,
                cfg.seed,
            )?;
            let csv = klfield::render_csv(&rows);
            match out {
                Some(path) => std::fs::write(&path, csv)
                    .with_context(|| format!("writing {}", path.display()))?,
                None => print!("{csv}"),
            }
            let frac = klfield::goalward_fraction(&rows, cfg.klfield_goal);
            eprintln!("goalward fraction: {frac:.3}");
            Ok(ExitCode::SUCCESS)
        }
    }
}
