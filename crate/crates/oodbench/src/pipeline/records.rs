//! Run and evaluation records: the persistence layer of the sweep.
//!
//! Every record is one JSON object on one line. A run's record lives in
//! its own file under `runs/<run_id>.json`; evaluation records are
//! collected into a single line-delimited `eval_records.jsonl`.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::algo::{EpochLog, HyperParams, RunSeeds};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Pending,
    /// Claimed by a worker; left behind by a killed process, treated as
    /// failed-resumable on the next invocation.
    Running,
    Done,
    Failed,
}

/// Provenance and outcome of one training run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub algorithm: String,
    pub size_tier: String,
    pub spectral: bool,
    pub trial_index: usize,
    pub data_seed_index: usize,
    pub hyperparams: HyperParams,
    pub seeds: RunSeeds,
    /// Checkpoint path relative to the output directory.
    pub checkpoint: String,
    pub epoch_log: Vec<EpochLog>,
    /// Final-epoch validation NLL; the model-selection statistic.
    pub val_nll: f64,
    pub status: RunStatus,
    pub error: Option<String>,
    pub dataset_digest: String,
}

impl RunRecord {
    pub fn path_in(&self, out_dir: &Path) -> PathBuf {
        run_record_path(out_dir, &self.run_id)
    }

    pub fn write(&self, out_dir: &Path) -> Result<()> {
        let path = self.path_in(out_dir);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let line =
            serde_json::to_string(self).map_err(|e| Error::format(format!("run record: {e}")))?;
        let mut file = fs::File::create(&path)?;
        writeln!(file, "{line}")?;
        Ok(())
    }
}

pub fn run_record_path(out_dir: &Path, run_id: &str) -> PathBuf {
    out_dir.join("runs").join(format!("{run_id}.json"))
}

pub fn read_run_record(path: &Path) -> Result<RunRecord> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(text.trim()).map_err(|e| {
        Error::format(format!("run record {}: {e}", path.display()))
    })
}

/// Loads every run record under `out_dir/runs`, sorted by run id.
pub fn read_all_run_records(out_dir: &Path) -> Result<Vec<RunRecord>> {
    let dir = out_dir.join("runs");
    let mut records = Vec::new();
    if !dir.exists() {
        return Ok(records);
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(&dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map_or(false, |x| x == "json"))
        .collect();
    paths.sort();
    for path in paths {
        records.push(read_run_record(&path)?);
    }
    Ok(records)
}

/// One aggregated metric cell: the group key, the metric, the per-seed
/// values, and their mean/std (population estimator).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub algorithm: String,
    pub size_tier: String,
    pub spectral: bool,
    /// `initial` (tau = 1) or `learned`.
    pub calibration: String,
    pub k: usize,
    /// The uncertainty measure, absent for in-domain metrics.
    pub measure: Option<String>,
    pub metric: String,
    pub values: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

/// Population mean and standard deviation (divide by n).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl EvalRecord {
    pub fn new(
        algorithm: String,
        size_tier: String,
        spectral: bool,
        calibration: String,
        k: usize,
        measure: Option<String>,
        metric: String,
        values: Vec<f64>,
    ) -> Self {
        let (mean, std) = mean_std(&values);
        EvalRecord {
            algorithm,
            size_tier,
            spectral,
            calibration,
            k,
            measure,
            metric,
            values,
            mean,
            std,
        }
    }

    /// Checks that the stored aggregates are reproducible from the stored
    /// per-seed values.
    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::contract("eval record with no values"));
        }
        let (mean, std) = mean_std(&self.values);
        if (mean - self.mean).abs() > 1e-12 || (std - self.std).abs() > 1e-12 {
            return Err(Error::contract(format!(
                "eval record aggregates do not match values: stored ({}, {}), recomputed ({mean}, {std})",
                self.mean, self.std
            )));
        }
        Ok(())
    }
}

pub fn eval_records_path(out_dir: &Path) -> PathBuf {
    out_dir.join("eval_records.jsonl")
}

/// Writes evaluation records, one JSON object per line.
pub fn write_eval_records(out_dir: &Path, records: &[EvalRecord]) -> Result<()> {
    let mut file = fs::File::create(eval_records_path(out_dir))?;
    for record in records {
        let line = serde_json::to_string(record)
            .map_err(|e| Error::format(format!("eval record: {e}")))?;
        writeln!(file, "{line}")?;
    }
    Ok(())
}

/// Reads and validates evaluation records.
pub fn read_eval_records(out_dir: &Path) -> Result<Vec<EvalRecord>> {
    let path = eval_records_path(out_dir);
    let text = fs::read_to_string(&path)?;
    let mut records = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: EvalRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: idx + 1,
            message: format!("eval record: {e}"),
        })?;
        record.validate()?;
        records.push(record);
    }
    Ok(records)
}
