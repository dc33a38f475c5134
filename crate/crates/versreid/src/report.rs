//! JSON-lines output: evaluation reports and training logs.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use versreid_core::eval::EvalRow;

use crate::error::{Error, Result};

/// One dataset row of an evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub dataset: String,
    pub rank1: f64,
    pub rank5: f64,
    pub map: f64,
    pub num_query: usize,
    pub num_gallery: usize,
    pub branch: String,
    pub checkpoint: String,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ensemble: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub noise: Option<f64>,
    /// Queries without a valid match after same-camera exclusion.
    pub skipped: usize,
}

impl ReportRow {
    pub fn new(row: &EvalRow, branch: &str, checkpoint: &str, seed: u64) -> Self {
        ReportRow {
            dataset: row.dataset.clone(),
            rank1: row.rank1,
            rank5: row.rank5,
            map: row.map,
            num_query: row.num_query,
            num_gallery: row.num_gallery,
            branch: branch.to_string(),
            checkpoint: checkpoint.to_string(),
            seed,
            ensemble: None,
            noise: None,
            skipped: row.num_skipped,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
}

impl EvalReport {
    pub fn joint(&self) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.dataset == "joint")
    }

    pub fn row(&self, dataset: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.dataset == dataset)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for r in &self.rows {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        Ok(s)
    }

    pub fn from_jsonl(text: &str) -> Result<EvalReport> {
        let rows = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        Ok(EvalReport { rows })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()?).map_err(|e| Error::io(path, e))
    }
}

/// One training-log record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub stage: String,
    pub epoch: usize,
    pub step: usize,
    pub lr: f32,
    pub loss: f32,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub triplet: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub cls: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub distill: Option<f32>,
}

/// Appends JSON lines to `<checkpoint>.log.jsonl`, truncated when opened.
pub struct TrainLog {
    path: PathBuf,
    out: BufWriter<File>,
}

impl TrainLog {
    pub fn path_for(checkpoint: &Path) -> PathBuf {
        let mut s = checkpoint.as_os_str().to_owned();
        s.push(".log.jsonl");
        PathBuf::from(s)
    }

    pub fn create(checkpoint: &Path) -> Result<TrainLog> {
        let path = Self::path_for(checkpoint);
        let f = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(TrainLog {
            path,
            out: BufWriter::new(f),
        })
    }

    pub fn record(&mut self, r: &LogRecord) -> Result<()> {
        let line = serde_json::to_string(r)?;
        writeln!(self.out, "{line}").map_err(|e| Error::io(&self.path, e))
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
