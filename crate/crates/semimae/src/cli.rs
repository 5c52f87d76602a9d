//! `semimae train | eval | make-split | reconstruct`.
//!
//! Exit codes: 0 on success, 2 for usage errors, 1 for anything that fails
//! at run time. Failures print a single `error: ...` line on stderr.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use semimae_core::data::make_split;
use semimae_core::mae::random_masking;
use semimae_core::patch::patchify;
use semimae_core::train::evaluate;
use semimae_core::{Model, RngStreams, Stream, TrainConfig};

use crate::checkpoint::Checkpoint;
use crate::config_io;
use crate::datasets;
use crate::reconstruct;
use crate::runner::{self, RunOptions};

#[derive(Debug, Parser)]
#[command(
    name = "semimae",
    version,
    about = "Semi-supervised ViT training with a masked-autoencoder branch"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// TOML config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set ssl.mu_mae=0`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Print the fully resolved config to stdout before running.
    #[arg(long)]
    print_config: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run warmup and main training, writing metrics and checkpoints.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Run directory (created if absent).
        #[arg(long, default_value = "runs/semimae")]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many completed epochs; resume later with `--resume`.
        #[arg(long)]
        stop_after_epochs: Option<u64>,
        /// No per-epoch progress on stderr.
        #[arg(long)]
        quiet: bool,
    },
    /// Print top-1 accuracy of a checkpoint on the validation set as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Overrides applied to the checkpoint's config (data keys, batch size).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        print_config: bool,
    },
    /// Write a stratified labeled/unlabeled split manifest.
    MakeSplit {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write original / masked / reconstructed triptychs for validation images.
    Reconstruct {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Model to use; a freshly initialized one when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Masking ratio; defaults to `mae.mask_ratio`.
        #[arg(long)]
        mask_ratio: Option<f64>,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn resolve(args: &ConfigArgs) -> anyhow::Result<TrainConfig> {
    let cfg = config_io::load_with_overrides(args.config.as_deref(), &args.set)?;
    if args.print_config {
        print!("{}", config_io::render_config(&cfg));
    }
    Ok(cfg)
}

/// Model weights from a checkpoint, under its config plus `overrides`.
fn load_model(path: &Path, overrides: &[String]) -> anyhow::Result<(TrainConfig, Model)> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    let cfg = config_io::apply_overrides(&ck.config, overrides)?;
    let mut model = Model::new(&cfg, &mut RngStreams::new(cfg.seed))?;
    if model.params.specs() != ck.params.specs() {
        bail!(
            "overrides change the model architecture stored in {}",
            path.display()
        );
    }
    model.params = ck.params;
    Ok((cfg, model))
}

fn execute(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Train {
            cfg,
            out,
            resume,
            stop_after_epochs,
            quiet,
        } => {
            let config = resolve(&cfg)?;
            let opts = RunOptions {
                out_dir: out,
                resume,
                stop_after_epochs,
                quiet,
            };
            let summary = runner::train(&config, &opts)?;
            if let Some(r) = summary.final_eval {
                println!(
                    "final top1 {:.4} on {} samples",
                    r.top1_accuracy, r.num_samples
                );
            }
            Ok(())
        }
        Command::Eval {
            checkpoint,
            set,
            print_config,
        } => {
            let (cfg, model) = load_model(&checkpoint, &set)?;
            if print_config {
                print!("{}", config_io::render_config(&cfg));
            }
            let (_, val) = datasets::load_datasets(&cfg)?;
            let report = evaluate(&model, &val, cfg.trainer.eval_batch_size)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
        Command::MakeSplit { cfg, out } => {
            let config = resolve(&cfg)?;
            let (train, _) = datasets::load_datasets(&config)?;
            let split = make_split(
                train.len(),
                &train.labels,
                train.num_classes,
                config.data.labeled_fraction,
                config.seed,
            )?;
            datasets::save_split(&out, &split)?;
            println!(
                "{} labeled, {} unlabeled -> {}",
                split.labeled.len(),
                split.unlabeled.len(),
                out.display()
            );
            Ok(())
        }
        Command::Reconstruct {
            cfg,
            checkpoint,
            mask_ratio,
            count,
            out,
        } => {
            let (config, model) = match checkpoint {
                Some(path) => {
                    let loaded = load_model(&path, &cfg.set)?;
                    if cfg.print_config {
                        print!("{}", config_io::render_config(&loaded.0));
                    }
                    loaded
                }
                None => {
                    let config = resolve(&cfg)?;
                    let model = Model::new(&config, &mut RngStreams::new(config.seed))?;
                    (config, model)
                }
            };
            if model.branch.is_none() {
                bail!("reconstruction needs mae.enabled = true");
            }
            let ratio = mask_ratio.unwrap_or(config.mae.mask_ratio);
            if !(0.0..1.0).contains(&ratio) {
                bail!("--mask-ratio must lie in [0, 1), got {ratio}");
            }
            let (_, val) = datasets::load_datasets(&config)?;
            let n = count.min(val.len());
            let images = val.images.select(&(0..n).collect::<Vec<_>>());
            let grid = patchify(&images, config.model.patch_size)?;
            let (_, plan) = random_masking(
                &grid,
                ratio,
                RngStreams::new(config.seed).get(Stream::Masking),
            )?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            for p in reconstruct::write_triptychs(&model, &images, &plan, &out)? {
                println!("{}", p.display());
            }
            Ok(())
        }
    }
}
