//! Per-epoch metrics as JSONL, one object per line, plus the config echo.
//!
//! The first line of every metrics file is `{"config": {...}}` with the
//! resolved RunConfig; each following line is one MetricsRecord. Records are
//! flushed as they are written so an interrupted run keeps every completed
//! epoch.
//!
//! `wall_seconds` exists in the record contract but is serialized as null:
//! persisted wall-clock values would break the byte-determinism guarantee
//! that two identically configured runs produce identical metrics files.
//! Measured times are printed to stdout instead.

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_ce: f64,
    pub train_sparsity: f64,
    pub val_accuracy: f64,
    /// Test accuracy of the best checkpoint; present only on the final record.
    pub test_accuracy: Option<f64>,
    pub mean_attention_mass: Option<f64>,
    pub pointing_hit_rate: Option<f64>,
    pub iou_mean: Option<f64>,
    pub lr: f64,
    /// Always null in the file (see module docs).
    pub wall_seconds: Option<f64>,
}

pub struct MetricsWriter {
    file: std::fs::File,
}

impl MetricsWriter {
    pub fn create(path: &Path, cfg: &RunConfig) -> Result<Self> {
        let mut file = std::fs::File::create(path)
            .map_err(|e| CliError::Io(format!("creating {}: {e}", path.display())))?;
        let header = serde_json::json!({ "config": cfg });
        writeln!(file, "{header}").map_err(CliError::from)?;
        file.flush()?;
        Ok(MetricsWriter { file })
    }

    pub fn append(&mut self, record: &MetricsRecord) -> Result<()> {
        let line = serde_json::to_string(record)
            .map_err(|e| CliError::Io(format!("serializing metrics: {e}")))?;
        writeln!(self.file, "{line}")?;
        self.file.flush()?;
        Ok(())
    }
}

/// Read back the records (skipping the config header line).
pub fn read_records(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("reading {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for line in text.lines().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(line)
                .map_err(|e| CliError::Config(format!("corrupt metrics line: {e}")))?,
        );
    }
    Ok(out)
}
