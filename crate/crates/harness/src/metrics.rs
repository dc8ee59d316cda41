//! Per-epoch training metrics, one JSON object per line.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Phase;
use crate::error::{IoContext, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    pub diff_left: f64,
    pub diff_right: f64,
    /// Absent when the phase has no quantisation loss.
    pub vq: Option<f64>,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub phase: Phase,
    /// 1-based epoch within the phase.
    pub epoch: usize,
    pub steps: u64,
    pub losses: LossSummary,
    /// Codebook perplexity per level over the epoch.
    pub perplexity: Vec<f64>,
    /// Fraction of entries used per level over the epoch.
    pub usage: Vec<f64>,
    pub codes_reset: usize,
    pub lr: f64,
    /// Seconds since the phase started.
    pub wall_clock: f64,
}

/// Appending writer; each row is flushed as soon as it is written.
pub struct MetricsWriter {
    path: PathBuf,
    file: File,
}

impl MetricsWriter {
    pub fn append(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path).at(path)?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        let mut line = serde_json::to_vec(row)?;
        line.push(b'\n');
        self.file.write_all(&line).at(&self.path)?;
        self.file.flush().at(&self.path)
    }
}

/// Reads every complete row; a truncated final line is ignored.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let file = File::open(path).at(path)?;
    let mut rows = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.at(path)?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line) {
            Ok(r) => rows.push(r),
            Err(e) if e.is_eof() => break,
            Err(e) => return Err(e.into()),
        }
    }
    Ok(rows)
}
