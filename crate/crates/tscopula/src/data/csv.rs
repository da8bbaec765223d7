//! Long-format CSV ingestion.
//!
//! Expected layout: a UTF-8 header row, one observation per row with
//! configurable column names for series, timestamp, value, and optional
//! covariates. Rows must be time-ascending within each series.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{SeriesSet, TimeSeriesWindow};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CsvSchema {
    #[serde(default = "default_series_col")]
    pub series_col: String,
    #[serde(default = "default_timestamp_col")]
    pub timestamp_col: String,
    #[serde(default = "default_value_col")]
    pub value_col: String,
    #[serde(default)]
    pub covariate_cols: Vec<String>,
    pub prediction_length: usize,
    #[serde(default = "default_ratio")]
    pub history_ratio: usize,
}

fn default_series_col() -> String {
    "series".into()
}
fn default_timestamp_col() -> String {
    "timestamp".into()
}
fn default_value_col() -> String {
    "value".into()
}
fn default_ratio() -> usize {
    3
}

impl CsvSchema {
    pub fn new(prediction_length: usize, history_ratio: usize) -> Self {
        CsvSchema {
            series_col: default_series_col(),
            timestamp_col: default_timestamp_col(),
            value_col: default_value_col(),
            covariate_cols: Vec::new(),
            prediction_length,
            history_ratio,
        }
    }

    /// Window length in tokens per series: history + prediction.
    pub fn window_len(&self) -> usize {
        (self.history_ratio + 1) * self.prediction_length
    }

    /// Number of trailing steps reserved for validation: 7x prediction length.
    pub fn validation_reservation(&self) -> usize {
        7 * self.prediction_length
    }
}

/// Loads the raw series without slicing into windows.
pub fn load_csv_series(path: &Path, schema: &CsvSchema) -> Result<SeriesSet> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Parse { row: 0, msg: e.to_string() })?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse { row: 0, msg: e.to_string() })?
        .clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Parse { row: 0, msg: format!("missing column '{name}'") })
    };
    let c_series = col(&schema.series_col)?;
    let c_time = col(&schema.timestamp_col)?;
    let c_value = col(&schema.value_col)?;
    let c_covs: Vec<usize> = schema
        .covariate_cols
        .iter()
        .map(|c| col(c))
        .collect::<Result<_>>()?;

    let mut order: Vec<String> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut set = SeriesSet { names: Vec::new(), timestamps: Vec::new(), values: Vec::new(), covariates: Vec::new() };

    for (i, record) in reader.records().enumerate() {
        let row = i + 2; // 1-based, after the header
        let record = record.map_err(|e| Error::Parse { row, msg: e.to_string() })?;
        let name = record
            .get(c_series)
            .ok_or_else(|| Error::Parse { row, msg: "short row".into() })?
            .to_string();
        let parse = |c: usize, what: &str| -> Result<f64> {
            record
                .get(c)
                .ok_or_else(|| Error::Parse { row, msg: format!("missing {what}") })?
                .trim()
                .parse::<f64>()
                .map_err(|e| Error::Parse { row, msg: format!("bad {what}: {e}") })
        };
        let t = parse(c_time, "timestamp")?;
        let v = parse(c_value, "value")?;
        let covs: Vec<f64> = c_covs
            .iter()
            .map(|&c| parse(c, "covariate"))
            .collect::<Result<_>>()?;

        let sid = *index.entry(name.clone()).or_insert_with(|| {
            order.push(name.clone());
            set.names.push(name);
            set.timestamps.push(Vec::new());
            set.values.push(Vec::new());
            set.covariates.push(Vec::new());
            set.names.len() - 1
        });
        if let Some(&last) = set.timestamps[sid].last() {
            if t <= last {
                return Err(Error::Parse {
                    row,
                    msg: format!("non-monotone timestamp {t} after {last} in series '{}'", set.names[sid]),
                });
            }
        }
        set.timestamps[sid].push(t);
        set.values[sid].push(v);
        set.covariates[sid].push(covs);
    }
    Ok(set)
}

/// Slices a series set into training windows of `window_len` tokens per
/// series, hopping by the prediction length, over `[0, end_idx)`.
pub fn slice_windows(set: &SeriesSet, schema: &CsvSchema, end_idx: usize) -> Vec<TimeSeriesWindow> {
    let len = schema.window_len();
    let hop = schema.prediction_length.max(1);
    let mut out = Vec::new();
    if set.min_len() == 0 {
        return out;
    }
    let usable = end_idx.min(set.min_len());
    let mut start = 0;
    while start + len <= usable {
        if let Ok(w) = set.window_by_index(start, len) {
            out.push(w);
        }
        start += hop;
    }
    out
}

/// Loads training windows from a long-format CSV: windows of
/// `(history_ratio + 1) * prediction_length` tokens per series, with the
/// last `7 * prediction_length` steps reserved for validation and excluded.
///
/// An empty file yields an empty list with a warning on stderr.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<Vec<TimeSeriesWindow>> {
    let set = load_csv_series(path, schema)?;
    if set.n_series() == 0 {
        eprintln!("warning: {} contains no data rows", path.display());
        return Ok(Vec::new());
    }
    let total = set.min_len();
    let end = total.saturating_sub(schema.validation_reservation());
    Ok(slice_windows(&set, schema, end))
}
