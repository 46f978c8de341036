//! Per-epoch training metrics as newline-delimited JSON.
//!
//! One object per line so logs survive interrupted runs and stream into
//! standard tooling. Validation loss is also broken out per branch; those
//! extra keys ride along with the core record.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: u64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr_text: f64,
    pub lr_vision: f64,
    pub wall_ms: u64,
    pub val_loss_text: f64,
    pub val_loss_vision: f64,
}

/// Collects records in memory and, when given a path, appends each to the
/// file as it arrives.
#[derive(Debug)]
pub struct MetricsLog {
    writer: Option<BufWriter<File>>,
    records: Vec<EpochMetrics>,
}

impl MetricsLog {
    /// `path = None` keeps records in memory only.
    pub fn create(path: Option<&Path>) -> Result<MetricsLog> {
        let writer = match path {
            Some(p) => {
                let file = File::create(p).map_err(|e| Error::io(p.display().to_string(), e))?;
                Some(BufWriter::new(file))
            }
            None => None,
        };
        Ok(MetricsLog { writer, records: Vec::new() })
    }

    pub fn push(&mut self, record: EpochMetrics) -> Result<()> {
        if let Some(w) = &mut self.writer {
            let line = serde_json::to_string(&record)
                .map_err(|e| Error::Format { message: format!("metrics encode: {e}"), offset: None })?;
            writeln!(w, "{line}").and_then(|_| w.flush()).map_err(|e| {
                Error::Io { path: "metrics log".into(), source: e }
            })?;
        }
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[EpochMetrics] {
        &self.records
    }

    pub fn into_records(self) -> Vec<EpochMetrics> {
        self.records
    }
}

/// Parse a metrics file written by [`MetricsLog`].
pub fn read_metrics(path: &Path) -> Result<Vec<EpochMetrics>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    text.lines()
        .enumerate()
        .filter(|(_, line)| !line.trim().is_empty())
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| Error::Format {
                message: format!("metrics line {}: {e}", i + 1),
                offset: None,
            })
        })
        .collect()
}
