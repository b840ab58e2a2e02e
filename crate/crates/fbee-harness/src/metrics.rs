//! Append-only metrics stream: one JSON object per line, tagged by `kind`.
//! A crashed run leaves a valid prefix. All fields are deterministic given
//! the seed; wall-clock timing goes to a separate side log, never here.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use fbee_core::zeroshot::ZeroShotResult;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("metrics io on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("bad metrics line {line} in {path}: {source}")]
    Parse { path: PathBuf, line: usize, source: serde_json::Error },
}

/// Aggregated loss-term means since the previous record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    pub td: f64,
    pub attraction: f64,
    pub ortho: f64,
    pub total: f64,
    pub n_member_steps: u64,
    pub n_skipped: u64,
}

/// One zero-shot evaluation sweep over the task suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub global_step: u64,
    pub tasks: Vec<ZeroShotResult>,
    pub avg_ratio: f64,
    pub avg_return: f64,
    pub coverage: f64,
    pub loss: Option<LossSummary>,
    /// Score of the most recent exploration-z selection, when any happened.
    pub last_z_score: Option<f64>,
}

/// Per-episode collection row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExploreRecord {
    pub global_step: u64,
    pub episode: u64,
    pub z_norm: f64,
    pub score: f64,
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricsRecord {
    Eval(EvalRecord),
    Explore(ExploreRecord),
}

impl MetricsRecord {
    pub fn global_step(&self) -> u64 {
        match self {
            MetricsRecord::Eval(r) => r.global_step,
            MetricsRecord::Explore(r) => r.global_step,
        }
    }
}

/// Line-buffered appender; every record is flushed as soon as it is written.
pub struct MetricsWriter {
    file: File,
    path: PathBuf,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self, MetricsError> {
        let file = File::create(path)
            .map_err(|source| MetricsError::Io { path: path.to_path_buf(), source })?;
        Ok(Self { file, path: path.to_path_buf() })
    }

    pub fn append(path: &Path) -> Result<Self, MetricsError> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|source| MetricsError::Io { path: path.to_path_buf(), source })?;
        Ok(Self { file, path: path.to_path_buf() })
    }

    pub fn write(&mut self, record: &MetricsRecord) -> Result<(), MetricsError> {
        let line = serde_json::to_string(record).expect("record serializes");
        self.file
            .write_all(line.as_bytes())
            .and_then(|_| self.file.write_all(b"\n"))
            .and_then(|_| self.file.flush())
            .map_err(|source| MetricsError::Io { path: self.path.clone(), source })
    }
}

/// Read a whole metrics file back.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>, MetricsError> {
    let file = File::open(path)
        .map_err(|source| MetricsError::Io { path: path.to_path_buf(), source })?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line =
            line.map_err(|source| MetricsError::Io { path: path.to_path_buf(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|source| MetricsError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            source,
        })?;
        out.push(record);
    }
    Ok(out)
}

/// Only the evaluation records, in stream order.
pub fn eval_records(records: &[MetricsRecord]) -> Vec<&EvalRecord> {
    records
        .iter()
        .filter_map(|r| match r {
            MetricsRecord::Eval(e) => Some(e),
            _ => None,
        })
        .collect()
}
