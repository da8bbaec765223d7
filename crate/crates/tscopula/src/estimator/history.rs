//! Training history records (the series behind NLL-vs-FLOPs curves).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One epoch of training, serialized as one JSON line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    /// Global epoch index across stages.
    pub epoch: usize,
    /// "stage1", "stage2", or "joint".
    pub stage: String,
    /// Mean training loss over the epoch's batches.
    pub train_loss: f64,
    /// Validation NLL (per dimension) after the epoch.
    pub val_nll: f64,
    /// Whether this epoch improved the best validation NLL of its stage.
    pub improved: bool,
    /// Cumulative FLOPs (all stages, forward + backward) after the epoch.
    pub cum_flops: u64,
    pub wall_secs: f64,
}

/// How a training run ended.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    EarlyStopped,
    MaxEpochs,
    WallClock,
    /// Loss went non-finite or above the divergence threshold; the best
    /// checkpoint so far was returned.
    Diverged,
}

pub fn write_history_jsonl(path: &Path, records: &[EpochRecord]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Data(e.to_string()))?;
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_history_jsonl(path: &Path) -> Result<Vec<EpochRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| Error::Parse { row: i + 1, msg: e.to_string() })?,
        );
    }
    Ok(out)
}
