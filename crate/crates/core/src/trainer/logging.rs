//! Per-step JSONL and per-epoch CSV training logs.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossReport;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: u64,
    pub bridged: usize,
    #[serde(flatten)]
    pub report: LossReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    pub bridged: usize,
    pub mean_l_d: f64,
    pub mean_l_o: f64,
    pub mean_l_t: f64,
    pub mean_l_overall: f64,
}

impl EpochSummary {
    pub fn from_steps(epoch: usize, steps: &[StepLog]) -> Self {
        let n = steps.len().max(1) as f64;
        let mean = |f: fn(&LossReport) -> f64| steps.iter().map(|s| f(&s.report)).sum::<f64>() / n;
        Self {
            epoch,
            steps: steps.len(),
            bridged: steps.iter().map(|s| s.bridged).sum(),
            mean_l_d: mean(|r| r.l_d),
            mean_l_o: mean(|r| r.l_o),
            mean_l_t: mean(|r| r.l_t),
            mean_l_overall: mean(|r| r.l_overall),
        }
    }
}

pub struct RunLogger {
    steps: BufWriter<File>,
    epochs: csv::Writer<File>,
}

impl RunLogger {
    /// Creates (or appends to) `steps.jsonl` and `epochs.csv` in `dir`.
    pub fn open(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let steps = fs::OpenOptions::new().create(true).append(true).open(dir.join("steps.jsonl"))?;
        let csv_path = dir.join("epochs.csv");
        let fresh = !csv_path.exists() || fs::metadata(&csv_path)?.len() == 0;
        let file = fs::OpenOptions::new().create(true).append(true).open(csv_path)?;
        let epochs = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
        Ok(Self {
            steps: BufWriter::new(steps),
            epochs,
        })
    }

    pub fn log_step(&mut self, s: &StepLog) -> Result<()> {
        serde_json::to_writer(&mut self.steps, s)?;
        self.steps.write_all(b"\n")?;
        Ok(())
    }

    pub fn log_epoch(&mut self, e: &EpochSummary) -> Result<()> {
        self.epochs.serialize(e).map_err(|err| Error::Io(std::io::Error::other(err)))?;
        self.epochs.flush()?;
        self.steps.flush()?;
        Ok(())
    }
}

pub fn read_step_log(path: &Path) -> Result<Vec<StepLog>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
