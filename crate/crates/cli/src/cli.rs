//! Argument parsing and dispatch.

use crate::checks::{self, Fault};
use crate::commands::{self, FieldSource, TrainOptions};
use crate::config::ExperimentConfig;
use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

#[derive(Debug, Parser)]
#[command(name = "scoregeom", version, about = "Local geometry of score-based generative models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// experiment config (JSON)
    #[arg(long)]
    pub config: PathBuf,
    /// output directory (defaults to the config's output_dir, then ./out)
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// master seed; replaces every seed in the config
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct FieldArgs {
    /// use the exact score of the configured density instead of a trained model
    #[arg(long)]
    pub analytic: bool,
    /// score checkpoint (defaults to <out>/score_checkpoint.json)
    #[arg(long, conflicts_with = "analytic")]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw the training set from the configured density
    GenData(Common),
    /// Train the MLP score network with denoising score matching
    TrainScore {
        #[command(flatten)]
        common: Common,
        /// continue from a checkpoint written with the same config
        #[arg(long)]
        resume: Option<PathBuf>,
        /// stop once this many total steps are done
        #[arg(long)]
        until: Option<usize>,
    },
    /// Train the VAE baseline and count active latents on held-out points
    TrainVae(Common),
    /// Run the reverse sampler and record snapshots
    Sample {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        field: FieldArgs,
    },
    /// Jacobian spectra, dimensionality and overlap at every snapshot
    Analyze {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        field: FieldArgs,
    },
    /// Re-render the SVG figures from summary.json
    Report {
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every oracle check and print a pass/fail table
    Selftest {
        #[arg(long, value_enum)]
        inject_fault: Option<Fault>,
    },
}

impl Common {
    fn load(&self) -> Result<(ExperimentConfig, PathBuf)> {
        let mut config = ExperimentConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            config.reseed(seed);
        }
        let out = commands::output_dir(self.out.clone(), Some(&config));
        commands::write_config(&config, &out).context("writing the resolved config")?;
        Ok((config, out))
    }
}

/// Runs one command; returns the process exit code.
pub fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::GenData(common) => {
            let (config, out) = common.load()?;
            let files = commands::cmd_gen_data(&config, &out)?;
            println!("wrote {} and {}", files.csv.display(), files.sidecar.display());
        }
        Command::TrainScore { common, resume, until } => {
            let (config, out) = common.load()?;
            let ckpt = commands::cmd_train_score(&config, &out, &TrainOptions { resume, until })?;
            let last = ckpt.loss_history.last().copied().unwrap_or(f64::NAN);
            println!("trained {} steps, final loss {last:.6}", ckpt.step());
        }
        Command::TrainVae(common) => {
            let (config, out) = common.load()?;
            let s = commands::cmd_train_vae(&config, &out)?;
            println!("modal active latents {} over {} held-out points", s.mode, s.n_heldout);
        }
        Command::Sample { common, field } => {
            let (config, out) = common.load()?;
            let source = FieldSource::resolve(field.analytic, field.checkpoint, &out);
            let paths = commands::cmd_sample(&config, &out, &source)?;
            println!("sampled {} paths", paths.len());
        }
        Command::Analyze { common, field } => {
            let (config, out) = common.load()?;
            let source = FieldSource::resolve(field.analytic, field.checkpoint, &out);
            let report = commands::cmd_analyze(&config, &out, &source)?;
            for s in &report.summaries {
                println!(
                    "t={:<6} sigma={:.4}  mean dim {:.3}  IQR {}",
                    s.requested_t,
                    s.noise_std,
                    s.dim_mean,
                    s.dim_quartiles.iqr()
                );
            }
        }
        Command::Report { out } => {
            for p in commands::cmd_report(&out)? {
                println!("wrote {}", p.display());
            }
        }
        Command::Selftest { inject_fault } => {
            let results = checks::run_all(inject_fault);
            print!("{}", checks::format_table(&results));
            if results.iter().any(|r| !r.passed) {
                return Ok(1);
            }
        }
    }
    Ok(0)
}
