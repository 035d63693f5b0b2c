//! Command-line harness: corpus generation, training, inference, evaluation,
//! ablations and gradient verification.

pub mod ablate;
pub mod commands;
pub mod config;
pub mod gradcheck;

use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};

use crate::ablate::AblationMode;
use crate::commands::InferArgs;
use crate::config::{resolve, write_run_metadata, ExperimentConfig, SEED_ENV};

#[derive(Debug, Parser)]
#[command(name = "elp", version, about = "Emotional listener head generation experiments")]
pub struct Cli {
    /// JSON experiment config; defaults apply to missing keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

/// Trailing `--section.key value` config overrides.
#[derive(Debug, Args)]
pub struct Overrides {
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, num_args = 0.., value_name = "--KEY VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus into `corpus_dir`.
    GenData(Overrides),
    /// Train a model; writes `<output>/train/`.
    Train(Overrides),
    /// Run a checkpoint on one clip file.
    Infer {
        #[arg(long)]
        clip: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Emotion slot or name; defaults to the classifier's choice.
        #[arg(long)]
        emotion: Option<String>,
        /// Output directory; defaults to `<output>/infer`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        rest: Overrides,
    },
    /// Metric report on the test split; writes `<output>/eval/`.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        rest: Overrides,
    },
    /// Train and compare model variants.
    Ablate {
        #[arg(long, value_enum, default_value = "space")]
        mode: AblationMode,
        #[command(flatten)]
        rest: Overrides,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        /// Corrupt one backward rule, as `op` or `op:factor`.
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
        #[command(flatten)]
        rest: Overrides,
    },
}

impl Command {
    fn overrides(&self) -> &[String] {
        match self {
            Command::GenData(o) | Command::Train(o) => &o.overrides,
            Command::Infer { rest, .. }
            | Command::Eval { rest, .. }
            | Command::Ablate { rest, .. }
            | Command::Gradcheck { rest, .. } => &rest.overrides,
        }
    }
}

pub fn resolve_config(cli: &Cli) -> Result<ExperimentConfig> {
    let env_seed = std::env::var(SEED_ENV).ok();
    resolve(cli.config.as_deref(), env_seed.as_deref(), cli.command.overrides())
}

pub fn run(cli: Cli) -> Result<()> {
    let config = resolve_config(&cli)?;
    match cli.command {
        Command::GenData(_) => {
            let dir = commands::gen_data(&config)?;
            println!("corpus written to {}", dir.display());
        }
        Command::Train(_) => {
            let out = commands::cmd_train(&config)?;
            println!(
                "trained {} steps: train loss {} -> {}",
                out.steps.len(),
                out.initial.total,
                out.last.total
            );
        }
        Command::Infer {
            clip,
            checkpoint,
            emotion,
            out,
            ..
        } => {
            let args = InferArgs {
                checkpoint,
                clip,
                emotion,
                out,
            };
            let res = commands::cmd_infer(&config, &args)?;
            println!("emotion {}; outputs in {}", res.emotion, res.dir.display());
        }
        Command::Eval { checkpoint, .. } => {
            let res = commands::cmd_eval(&config, checkpoint.as_deref())?;
            print!("{}", res.report.to_csv());
            if let Some(acc) = res.accuracy {
                println!("emotion accuracy {acc}");
            }
        }
        Command::Ablate { mode, .. } => {
            let res = ablate::cmd_ablate(&config, mode)?;
            for v in &res.variants {
                println!(
                    "{}: separation {} override shift {} accuracy {}",
                    v.name, v.separation, v.override_shift, v.emotion_accuracy
                );
            }
        }
        Command::Gradcheck { inject_fault, .. } => {
            let fault = inject_fault.as_deref().map(gradcheck::parse_fault).transpose()?;
            let summary = gradcheck::run_gradcheck(&config, fault)?;
            let dir = config.output.join("gradcheck");
            write_run_metadata(&dir, &config)?;
            commands::write(
                &dir.join("report.json"),
                serde_json::to_string_pretty(&summary)? + "\n",
            )?;
            for c in &summary.components {
                println!(
                    "{:<10} max_rel_error {:.3e} (raw {:.3e}, {} coords)",
                    c.name, c.max_rel_error, c.max_raw_error, c.checked
                );
            }
            for g in &summary.groups {
                println!("  {:<22} {:.3e} (raw {:.3e})", g.name, g.max_rel_error, g.max_raw_error);
            }
            if !summary.passed() {
                bail!(
                    "gradient check failed: max relative error {:.3e} >= {:.0e}",
                    summary.max_rel_error(),
                    summary.fail_threshold
                );
            }
        }
    }
    Ok(())
}
