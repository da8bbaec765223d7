//! JSON-lines window snapshots for experiment reproducibility.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{TimeSeriesWindow, Token};

#[derive(Serialize, Deserialize)]
struct WindowRecord {
    n_series: usize,
    tokens: Vec<Token>,
}

/// Writes one window per line.
pub fn write_windows_jsonl(path: &Path, windows: &[TimeSeriesWindow]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for w in windows {
        let rec = WindowRecord { n_series: w.n_series(), tokens: w.tokens().to_vec() };
        let line = serde_json::to_string(&rec).map_err(|e| Error::Data(e.to_string()))?;
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a JSON-lines snapshot produced by [`write_windows_jsonl`].
pub fn read_windows_jsonl(path: &Path) -> Result<Vec<TimeSeriesWindow>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: WindowRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Parse { row: i + 1, msg: e.to_string() })?;
        out.push(TimeSeriesWindow::new(rec.tokens, rec.n_series)?);
    }
    Ok(out)
}
