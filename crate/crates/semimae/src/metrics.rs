//! Line-delimited JSON metrics: one record per call, flushed immediately.

use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use semimae_core::optim::Phase;
use semimae_core::train::{EvalReport, StepRecord};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub epoch: u64,
    pub phase: String,
    pub lr: f64,
    pub l_s: f64,
    pub l_u: f64,
    pub l_mae: f64,
    pub total: f64,
    pub acceptance_rate: f64,
}

impl From<&StepRecord> for StepMetrics {
    fn from(r: &StepRecord) -> Self {
        let b = &r.breakdown;
        Self {
            step: r.step,
            epoch: r.epoch,
            phase: match r.phase {
                Phase::Warmup => "warmup".into(),
                Phase::Main => "main".into(),
            },
            lr: r.lr,
            l_s: b.l_s,
            l_u: b.l_u,
            l_mae: b.l_mae,
            total: b.total,
            acceptance_rate: b.acceptance_rate,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// Global step count when the evaluation ran.
    pub step: u64,
    /// Completed epochs.
    pub epoch: u64,
    pub top1_accuracy: f64,
    pub num_samples: usize,
    pub per_class_accuracy: Vec<f64>,
}

impl EvalMetrics {
    pub fn new(step: u64, epoch: u64, r: &EvalReport) -> Self {
        Self {
            step,
            epoch,
            top1_accuracy: r.top1_accuracy,
            num_samples: r.num_samples,
            per_class_accuracy: r.per_class_accuracy.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Record {
    Step(StepMetrics),
    Eval(EvalMetrics),
}

#[derive(Debug)]
pub struct MetricsLogger {
    out: BufWriter<File>,
}

impl MetricsLogger {
    pub fn create(path: &Path) -> io::Result<Self> {
        Ok(Self {
            out: BufWriter::new(File::create(path)?),
        })
    }

    /// Opens for appending, e.g. when resuming a run.
    pub fn append(path: &Path) -> io::Result<Self> {
        Ok(Self {
            out: BufWriter::new(OpenOptions::new().create(true).append(true).open(path)?),
        })
    }

    pub fn log(&mut self, record: &Record) -> io::Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")?;
        self.out.flush()
    }
}

pub fn read_metrics(path: &Path) -> io::Result<Vec<Record>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
