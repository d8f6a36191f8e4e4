use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub phase: String,
    pub epoch: usize,
    /// `SD` / `TD` for evaluations, `train` for training-set statistics.
    pub split: String,
    pub metric: String,
    pub value: f64,
    pub sigma: Option<f64>,
    /// Seconds since the log was opened; the only non-deterministic field.
    pub wallclock: f64,
}

/// In-memory record list, optionally mirrored to a line-delimited JSON file.
#[derive(Debug)]
pub struct MetricsLog {
    records: Vec<MetricRecord>,
    sink: Option<(PathBuf, File)>,
    start: Instant,
}

impl Default for MetricsLog {
    fn default() -> Self {
        Self::in_memory()
    }
}

impl MetricsLog {
    pub fn in_memory() -> Self {
        Self { records: Vec::new(), sink: None, start: Instant::now() }
    }

    /// Appends to `path`, creating it if needed.
    pub fn to_file(path: &Path) -> Result<Self> {
        let f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
        Ok(Self { records: Vec::new(), sink: Some((path.to_path_buf(), f)), start: Instant::now() })
    }

    pub fn record(&mut self, phase: &str, epoch: usize, split: &str, metric: &str, value: f64, sigma: Option<f64>) -> Result<()> {
        let r = MetricRecord {
            phase: phase.to_string(),
            epoch,
            split: split.to_string(),
            metric: metric.to_string(),
            value,
            sigma,
            wallclock: self.start.elapsed().as_secs_f64(),
        };
        if let Some((path, f)) = &mut self.sink {
            let mut line = serde_json::to_vec(&r)?;
            line.push(b'\n');
            f.write_all(&line).map_err(|e| Error::io(path.as_path(), e))?;
        }
        self.records.push(r);
        Ok(())
    }

    pub fn records(&self) -> &[MetricRecord] {
        &self.records
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some((path, f)) = &mut self.sink {
            f.sync_data().map_err(|e| Error::io(path.as_path(), e))?;
        }
        Ok(())
    }

    /// Parses a log written by [`MetricsLog::to_file`].
    pub fn read(path: &Path) -> Result<Vec<MetricRecord>> {
        let text = crate::fsio::read_string(path)?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(Error::from))
            .collect()
    }
}
