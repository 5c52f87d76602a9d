//! The training driver: data setup, the warmup and main loops, periodic
//! evaluation, checkpointing and resume.
//!
//! A run directory holds `config.toml` (the resolved config),
//! `metrics.jsonl`, `last.ckpt` and `best.ckpt`. On a numerical failure the
//! state at that step is written to `failed.ckpt`.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use semimae_core::data::{DataPipeline, Dataset, SplitManifest};
use semimae_core::optim::Phase;
use semimae_core::train::{evaluate, EvalReport};
use semimae_core::{Error as CoreError, TrainConfig, Trainer};

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::config_io::{self, ConfigError};
use crate::datasets::{self, DatasetError};
use crate::metrics::{EvalMetrics, MetricsLogger, Record, StepMetrics};

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Core(#[from] CoreError),
}

pub type Result<T> = std::result::Result<T, RunError>;

fn io_at(path: &Path) -> impl FnOnce(io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    /// Continue from this checkpoint; its config replaces the given one.
    pub resume: Option<PathBuf>,
    /// Stop once this many epochs have completed (for staged runs).
    pub stop_after_epochs: Option<u64>,
    /// Suppress per-epoch progress lines on stderr.
    pub quiet: bool,
}

#[derive(Debug)]
pub struct RunSummary {
    pub trainer: Trainer,
    pub evals: Vec<EvalMetrics>,
    pub final_eval: Option<EvalReport>,
}

/// Everything a loop needs, borrowed from data owned by [`train`].
pub struct Session<'a> {
    pub trainer: Trainer,
    pub pipeline: DataPipeline<'a>,
    pub val: &'a Dataset,
    logger: MetricsLogger,
    out_dir: PathBuf,
    stop_after: Option<u64>,
    quiet: bool,
    pub evals: Vec<EvalMetrics>,
    pub last_eval: Option<EvalReport>,
}

impl std::fmt::Debug for Session<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Session")
            .field("out_dir", &self.out_dir)
            .field("state", &self.trainer.state.global_step)
            .finish()
    }
}

impl Session<'_> {
    fn stopped(&self) -> bool {
        self.trainer.is_finished()
            || self
                .stop_after
                .is_some_and(|n| self.trainer.state.epoch >= n)
    }

    fn log(&mut self, record: &Record) -> Result<()> {
        let path = self.out_dir.join("metrics.jsonl");
        self.logger.log(record).map_err(io_at(&path))
    }

    fn save(&self, name: &str) -> Result<()> {
        Checkpoint::from_trainer(&self.trainer).save(&self.out_dir.join(name))?;
        Ok(())
    }

    /// Runs the remainder of the current epoch, then evaluates and saves as
    /// configured.
    fn epoch(&mut self) -> Result<()> {
        let epoch = self.trainer.state.epoch;
        while !self.trainer.is_finished() && self.trainer.state.epoch == epoch {
            let record = match self.trainer.next_step(&self.pipeline) {
                Ok(r) => r,
                Err(e @ CoreError::Numerical(_)) => {
                    self.save("failed.ckpt")?;
                    return Err(e.into());
                }
                Err(e) => return Err(e.into()),
            };
            self.log(&Record::Step(StepMetrics::from(&record)))?;
        }
        self.end_epoch()
    }

    fn end_epoch(&mut self) -> Result<()> {
        let cfg = &self.trainer.config.trainer;
        let (every_eval, every_ckpt, batch) = (
            cfg.eval_every_epochs,
            cfg.checkpoint_every_epochs,
            cfg.eval_batch_size,
        );
        let epoch = self.trainer.state.epoch;
        let done = self.trainer.is_finished();
        let mut improved = false;
        if every_eval > 0 && (epoch.is_multiple_of(every_eval) || done) {
            let report = evaluate(&self.trainer.model, self.val, batch)?;
            let m = EvalMetrics::new(self.trainer.state.global_step, epoch, &report);
            self.log(&Record::Eval(m.clone()))?;
            if report.top1_accuracy > self.trainer.state.best_metric {
                self.trainer.state.best_metric = report.top1_accuracy;
                improved = true;
            }
            if !self.quiet {
                eprintln!(
                    "epoch {epoch}/{} step {} top1 {:.4} (best {:.4})",
                    self.trainer.schedule.total_epochs,
                    self.trainer.state.global_step,
                    report.top1_accuracy,
                    self.trainer.state.best_metric
                );
            }
            self.evals.push(m);
            self.last_eval = Some(report);
        }
        if improved {
            self.save("best.ckpt")?;
        }
        if every_ckpt > 0 && (epoch.is_multiple_of(every_ckpt) || done || self.stopped()) {
            self.save("last.ckpt")?;
        }
        Ok(())
    }
}

/// Epochs with the pseudo-label term off.
pub fn warmup_loop(s: &mut Session<'_>) -> Result<()> {
    while !s.stopped() && s.trainer.schedule.phase(s.trainer.state.global_step) == Phase::Warmup {
        s.epoch()?;
    }
    Ok(())
}

/// Epochs with the full objective until the schedule ends.
pub fn main_loop(s: &mut Session<'_>) -> Result<()> {
    while !s.stopped() {
        s.epoch()?;
    }
    Ok(())
}

/// Datasets and split for a config.
pub fn prepare_data(cfg: &TrainConfig) -> Result<(Dataset, Dataset, SplitManifest)> {
    let (train, val) = datasets::load_datasets(cfg)?;
    let split = datasets::split_for(cfg, &train)?;
    Ok((train, val, split))
}

/// Trains from scratch with `config`, or resumes when `opts.resume` is set.
pub fn train(config: &TrainConfig, opts: &RunOptions) -> Result<RunSummary> {
    fs::create_dir_all(&opts.out_dir).map_err(io_at(&opts.out_dir))?;
    let checkpoint = opts.resume.as_deref().map(Checkpoint::load).transpose()?;
    let config = checkpoint
        .as_ref()
        .map_or_else(|| config.clone(), |c| c.config.clone());
    config.validate()?;

    let (train_set, val, split) = prepare_data(&config)?;
    let pipeline = DataPipeline::new(&train_set, &split, &config)?;
    let steps = Trainer::steps_per_epoch(&config, pipeline.steps_per_epoch());
    let trainer = match checkpoint {
        Some(c) => c.into_trainer(steps)?,
        None => Trainer::new(config.clone(), steps)?,
    };

    let config_path = opts.out_dir.join("config.toml");
    fs::write(&config_path, config_io::render_config(&config)).map_err(io_at(&config_path))?;
    let metrics_path = opts.out_dir.join("metrics.jsonl");
    let logger = if opts.resume.is_some() {
        MetricsLogger::append(&metrics_path)
    } else {
        MetricsLogger::create(&metrics_path)
    }
    .map_err(io_at(&metrics_path))?;

    let mut session = Session {
        trainer,
        pipeline,
        val: &val,
        logger,
        out_dir: opts.out_dir.clone(),
        stop_after: opts.stop_after_epochs,
        quiet: opts.quiet,
        evals: Vec::new(),
        last_eval: None,
    };
    warmup_loop(&mut session)?;
    main_loop(&mut session)?;
    Ok(RunSummary {
        trainer: session.trainer,
        evals: session.evals,
        final_eval: session.last_eval,
    })
}
