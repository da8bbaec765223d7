//! Data model for masked, possibly unaligned multivariate series.
//!
//! A window is a flat set of tokens, each carrying its series index,
//! timestamp, value, covariates, and an observed/missing mask bit. Nothing
//! assumes a shared time grid: series may have different lengths, different
//! timestamps, and uneven spacing. Prediction tasks are expressed by mask
//! bits; corruption processes (uneven or unaligned sampling) delete tokens
//! outright. All objects are immutable after construction.

mod csv;
mod jsonl;
mod synthetic;

pub use csv::{load_csv, load_csv_series, slice_windows, CsvSchema};
pub use jsonl::{read_windows_jsonl, write_windows_jsonl};
pub use synthetic::{corrupt_unaligned, corrupt_uneven, gen_noisy_sines, SineSpec};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One observation slot: a (series, timestamp) pair with its value,
/// covariates, and mask bit (`true` = observed, `false` = to infer).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Token {
    pub series_id: usize,
    pub timestamp: f64,
    pub value: f64,
    #[serde(default)]
    pub covariates: Vec<f64>,
    pub observed: bool,
}

impl Token {
    pub fn new(series_id: usize, timestamp: f64, value: f64) -> Self {
        Token { series_id, timestamp, value, covariates: Vec::new(), observed: true }
    }
}

/// A ragged multivariate window of tokens, grouped by series and
/// time-ascending within each series (canonical order).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeriesWindow {
    tokens: Vec<Token>,
    n_series: usize,
}

impl TimeSeriesWindow {
    /// Builds a window, sorting tokens into canonical order and validating
    /// the invariants: strictly increasing timestamps within each series and
    /// a constant covariate width.
    pub fn new(mut tokens: Vec<Token>, n_series: usize) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Data("window has no tokens".into()));
        }
        tokens.sort_by(|a, b| {
            (a.series_id, a.timestamp)
                .partial_cmp(&(b.series_id, b.timestamp))
                .expect("NaN timestamp")
        });
        let p = tokens[0].covariates.len();
        for pair in tokens.windows(2) {
            if pair[1].covariates.len() != p {
                return Err(Error::Data(format!(
                    "covariate width mismatch: {} vs {}",
                    p,
                    pair[1].covariates.len()
                )));
            }
            if pair[0].series_id == pair[1].series_id && pair[0].timestamp >= pair[1].timestamp {
                return Err(Error::Data(format!(
                    "timestamps not strictly increasing in series {} at t={}",
                    pair[0].series_id, pair[0].timestamp
                )));
            }
        }
        if let Some(max_id) = tokens.iter().map(|t| t.series_id).max() {
            if max_id >= n_series {
                return Err(Error::Data(format!(
                    "series id {max_id} out of range for n_series={n_series}"
                )));
            }
        }
        Ok(TimeSeriesWindow { tokens, n_series })
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn n_series(&self) -> usize {
        self.n_series
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn covariate_width(&self) -> usize {
        self.tokens[0].covariates.len()
    }

    /// Token indices of the observed partition, in canonical order.
    pub fn observed_indices(&self) -> Vec<usize> {
        (0..self.tokens.len()).filter(|&i| self.tokens[i].observed).collect()
    }

    /// Token indices of the missing partition, in canonical order
    /// (series-major, time-ascending).
    pub fn missing_indices(&self) -> Vec<usize> {
        (0..self.tokens.len()).filter(|&i| !self.tokens[i].observed).collect()
    }

    /// Dimensionality of the joint distribution to estimate.
    pub fn n_missing(&self) -> usize {
        self.tokens.iter().filter(|t| !t.observed).count()
    }

    /// Token indices of one series, time-ascending.
    pub fn series_token_indices(&self, series_id: usize) -> Vec<usize> {
        (0..self.tokens.len()).filter(|&i| self.tokens[i].series_id == series_id).collect()
    }

    /// Returns a copy with new mask bits (same length as tokens).
    fn with_masks(&self, observed: &[bool]) -> Self {
        assert_eq!(observed.len(), self.tokens.len());
        let tokens = self
            .tokens
            .iter()
            .zip(observed)
            .map(|(t, &m)| Token { observed: m, ..t.clone() })
            .collect();
        TimeSeriesWindow { tokens, n_series: self.n_series }
    }

    /// Returns a copy with transformed values.
    fn with_values(&self, values: &[f64]) -> Self {
        assert_eq!(values.len(), self.tokens.len());
        let tokens = self
            .tokens
            .iter()
            .zip(values)
            .map(|(t, &v)| Token { value: v, ..t.clone() })
            .collect();
        TimeSeriesWindow { tokens, n_series: self.n_series }
    }
}

/// Prediction task kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Forecast,
    Interpolation,
    CustomMask,
}

/// Deterministic mask recipe for a window.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Forecast: mask the last `horizon` time steps of every series.
    #[serde(default)]
    pub horizon: usize,
    /// Interpolation: mask positions `inner_range.0 ..= inner_range.1`
    /// (1-based, inclusive) of every series.
    #[serde(default)]
    pub inner_range: (usize, usize),
    /// History length divided by prediction length (window sizing).
    #[serde(default = "default_history_ratio")]
    pub history_ratio: usize,
}

fn default_history_ratio() -> usize {
    3
}

impl TaskSpec {
    pub fn forecast(horizon: usize, history_ratio: usize) -> Self {
        TaskSpec { kind: TaskKind::Forecast, horizon, inner_range: (0, 0), history_ratio }
    }

    /// Centered interpolation window: `pred_len` masked positions in the
    /// middle of a length-`window_len` series, with equal observed counts
    /// before and after (the leftover odd position goes to the front).
    pub fn centered_interpolation(window_len: usize, pred_len: usize) -> Result<Self> {
        if pred_len == 0 || pred_len >= window_len {
            return Err(Error::Bounds(format!(
                "interpolation length {pred_len} does not fit window of {window_len}"
            )));
        }
        let before = (window_len - pred_len).div_ceil(2);
        let k = before + 1;
        let p = before + pred_len;
        Ok(TaskSpec {
            kind: TaskKind::Interpolation,
            horizon: 0,
            inner_range: (k, p),
            history_ratio: default_history_ratio(),
        })
    }

    pub fn custom() -> Self {
        TaskSpec { kind: TaskKind::CustomMask, horizon: 0, inner_range: (0, 0), history_ratio: default_history_ratio() }
    }

    /// Number of masked trailing steps (forecast) or inner positions
    /// (interpolation) per series.
    pub fn masked_per_series(&self) -> usize {
        match self.kind {
            TaskKind::Forecast => self.horizon,
            TaskKind::Interpolation => self.inner_range.1 - self.inner_range.0 + 1,
            TaskKind::CustomMask => 0,
        }
    }
}

/// Applies a task mask to a window. Forecast masks the last `horizon`
/// time steps of every series; interpolation masks the inner positions;
/// custom-mask leaves the existing bits untouched.
pub fn apply_task_mask(window: &TimeSeriesWindow, task: &TaskSpec) -> Result<TimeSeriesWindow> {
    match task.kind {
        TaskKind::CustomMask => Ok(window.clone()),
        TaskKind::Forecast => {
            let k = task.horizon;
            if k == 0 {
                return Err(Error::Bounds("forecast horizon must be >= 1".into()));
            }
            let mut observed = vec![true; window.len()];
            for s in 0..window.n_series() {
                let idx = window.series_token_indices(s);
                if idx.is_empty() {
                    continue;
                }
                if k >= idx.len() {
                    return Err(Error::Bounds(format!(
                        "forecast horizon {k} >= length {} of series {s}",
                        idx.len()
                    )));
                }
                for &i in idx.iter().rev().take(k) {
                    observed[i] = false;
                }
            }
            Ok(window.with_masks(&observed))
        }
        TaskKind::Interpolation => {
            let (k, p) = task.inner_range;
            if k == 0 || p < k {
                return Err(Error::Bounds(format!("invalid interpolation range [{k}, {p}]")));
            }
            let mut observed = vec![true; window.len()];
            for s in 0..window.n_series() {
                let idx = window.series_token_indices(s);
                if idx.is_empty() {
                    continue;
                }
                if p > idx.len() || (k == 1 && p == idx.len()) {
                    return Err(Error::Bounds(format!(
                        "interpolation range [{k}, {p}] does not fit series {s} of length {}",
                        idx.len()
                    )));
                }
                for (pos, &i) in idx.iter().enumerate() {
                    let j = pos + 1;
                    if j >= k && j <= p {
                        observed[i] = false;
                    }
                }
            }
            Ok(window.with_masks(&observed))
        }
    }
}

/// Per-series affine normalization state, computed from observed tokens only.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NormalizationState {
    /// (mean, std) per series; std is floored at `STD_FLOOR`.
    pub per_series: Vec<(f64, f64)>,
}

/// Floor applied to per-series standard deviations (constant series).
pub const STD_FLOOR: f64 = 1e-8;

impl NormalizationState {
    pub fn mean(&self, series_id: usize) -> f64 {
        self.per_series[series_id].0
    }

    pub fn std(&self, series_id: usize) -> f64 {
        self.per_series[series_id].1
    }

    /// Identity state (used when normalization is disabled).
    pub fn identity(n_series: usize) -> Self {
        NormalizationState { per_series: vec![(0.0, 1.0); n_series] }
    }

    pub fn normalize(&self, series_id: usize, x: f64) -> f64 {
        let (m, s) = self.per_series[series_id];
        (x - m) / s
    }

    pub fn denormalize(&self, series_id: usize, z: f64) -> f64 {
        let (m, s) = self.per_series[series_id];
        z * s + m
    }
}

/// Standardizes a window per series using statistics of the observed tokens
/// only (masked values must not leak into the statistics; population std).
/// Missing values are transformed with the same affine map.
pub fn standardize(window: &TimeSeriesWindow) -> Result<(TimeSeriesWindow, NormalizationState)> {
    let mut per_series = Vec::with_capacity(window.n_series());
    for s in 0..window.n_series() {
        let observed: Vec<f64> = window
            .tokens()
            .iter()
            .filter(|t| t.series_id == s && t.observed)
            .map(|t| t.value)
            .collect();
        let has_tokens = window.tokens().iter().any(|t| t.series_id == s);
        if observed.is_empty() {
            if has_tokens {
                return Err(Error::Data(format!(
                    "series {s} has no observed tokens; cannot standardize"
                )));
            }
            per_series.push((0.0, 1.0));
            continue;
        }
        let n = observed.len() as f64;
        let mean = observed.iter().sum::<f64>() / n;
        let var = observed.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        per_series.push((mean, var.sqrt().max(STD_FLOOR)));
    }
    let state = NormalizationState { per_series };
    let values: Vec<f64> = window
        .tokens()
        .iter()
        .map(|t| state.normalize(t.series_id, t.value))
        .collect();
    Ok((window.with_values(&values), state))
}

/// Inverts [`standardize`].
pub fn destandardize(window: &TimeSeriesWindow, state: &NormalizationState) -> TimeSeriesWindow {
    let values: Vec<f64> = window
        .tokens()
        .iter()
        .map(|t| state.denormalize(t.series_id, t.value))
        .collect();
    window.with_values(&values)
}

/// A collection of full-length raw series (pre-windowing).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeriesSet {
    pub names: Vec<String>,
    /// Per series: (timestamps, values, covariates per step).
    pub timestamps: Vec<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
    pub covariates: Vec<Vec<Vec<f64>>>,
}

impl SeriesSet {
    pub fn n_series(&self) -> usize {
        self.values.len()
    }

    /// Restricts every series to timestamps in `[t0, t1)`.
    pub fn time_range(&self, t0: f64, t1: f64) -> SeriesSet {
        let mut out = SeriesSet {
            names: self.names.clone(),
            timestamps: Vec::new(),
            values: Vec::new(),
            covariates: Vec::new(),
        };
        for s in 0..self.n_series() {
            let keep: Vec<usize> = (0..self.timestamps[s].len())
                .filter(|&j| self.timestamps[s][j] >= t0 && self.timestamps[s][j] < t1)
                .collect();
            out.timestamps.push(keep.iter().map(|&j| self.timestamps[s][j]).collect());
            out.values.push(keep.iter().map(|&j| self.values[s][j]).collect());
            out.covariates.push(keep.iter().map(|&j| self.covariates[s][j].clone()).collect());
        }
        out
    }

    /// Builds a window from per-series index ranges `[start, start+len)`.
    pub fn window_by_index(&self, start: usize, len: usize) -> Result<TimeSeriesWindow> {
        let mut tokens = Vec::new();
        for s in 0..self.n_series() {
            if start + len > self.timestamps[s].len() {
                return Err(Error::Bounds(format!(
                    "window [{start}, {}) exceeds series {s} of length {}",
                    start + len,
                    self.timestamps[s].len()
                )));
            }
            for j in start..start + len {
                tokens.push(Token {
                    series_id: s,
                    timestamp: self.timestamps[s][j],
                    value: self.values[s][j],
                    covariates: self.covariates[s][j].clone(),
                    observed: true,
                });
            }
        }
        TimeSeriesWindow::new(tokens, self.n_series())
    }

    /// Builds one window holding everything.
    pub fn full_window(&self) -> Result<TimeSeriesWindow> {
        let mut tokens = Vec::new();
        for s in 0..self.n_series() {
            for j in 0..self.timestamps[s].len() {
                tokens.push(Token {
                    series_id: s,
                    timestamp: self.timestamps[s][j],
                    value: self.values[s][j],
                    covariates: self.covariates[s][j].clone(),
                    observed: true,
                });
            }
        }
        TimeSeriesWindow::new(tokens, self.n_series())
    }

    pub fn min_len(&self) -> usize {
        self.timestamps.iter().map(|t| t.len()).min().unwrap_or(0)
    }

    pub fn from_window(window: &TimeSeriesWindow) -> SeriesSet {
        let n = window.n_series();
        let mut out = SeriesSet {
            names: (0..n).map(|i| format!("s{i}")).collect(),
            timestamps: vec![Vec::new(); n],
            values: vec![Vec::new(); n],
            covariates: vec![Vec::new(); n],
        };
        for t in window.tokens() {
            out.timestamps[t.series_id].push(t.timestamp);
            out.values[t.series_id].push(t.value);
            out.covariates[t.series_id].push(t.covariates.clone());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn grid_window(n_series: usize, len: usize) -> TimeSeriesWindow {
        let mut tokens = Vec::new();
        for s in 0..n_series {
            for j in 0..len {
                tokens.push(Token::new(s, j as f64, (s * len + j) as f64));
            }
        }
        TimeSeriesWindow::new(tokens, n_series).unwrap()
    }

    #[test]
    fn forecast_mask_matches_definition() {
        // 1 series, len 5, horizon 2 -> [1,1,1,0,0]
        let w = grid_window(1, 5);
        let masked = apply_task_mask(&w, &TaskSpec::forecast(2, 3)).unwrap();
        let bits: Vec<bool> = masked.tokens().iter().map(|t| t.observed).collect();
        assert_eq!(bits, vec![true, true, true, false, false]);
    }

    #[test]
    fn interpolation_mask_matches_definition() {
        // 1 series, len 6, range [3,4] -> [1,1,0,0,1,1]
        let w = grid_window(1, 6);
        let task = TaskSpec {
            kind: TaskKind::Interpolation,
            horizon: 0,
            inner_range: (3, 4),
            history_ratio: 1,
        };
        let masked = apply_task_mask(&w, &task).unwrap();
        let bits: Vec<bool> = masked.tokens().iter().map(|t| t.observed).collect();
        assert_eq!(bits, vec![true, true, false, false, true, true]);
    }

    #[test]
    fn forecast_two_series_counts_missing() {
        let w = grid_window(2, 4);
        let masked = apply_task_mask(&w, &TaskSpec::forecast(1, 3)).unwrap();
        assert_eq!(masked.n_missing(), 2);
    }

    #[test]
    fn horizon_exceeding_length_errors() {
        let w = grid_window(1, 3);
        assert!(apply_task_mask(&w, &TaskSpec::forecast(3, 1)).is_err());
        assert!(apply_task_mask(&w, &TaskSpec::forecast(7, 1)).is_err());
    }

    #[test]
    fn masking_is_idempotent() {
        let w = grid_window(3, 8);
        let task = TaskSpec::forecast(2, 3);
        let once = apply_task_mask(&w, &task).unwrap();
        let twice = apply_task_mask(&once, &task).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn partitions_cover_everything() {
        let w = grid_window(2, 6);
        let masked = apply_task_mask(&w, &TaskSpec::forecast(2, 3)).unwrap();
        let obs = masked.observed_indices();
        let miss = masked.missing_indices();
        assert_eq!(obs.len() + miss.len(), masked.len());
        let mut all: Vec<usize> = obs.iter().chain(miss.iter()).cloned().collect();
        all.sort_unstable();
        assert_eq!(all, (0..masked.len()).collect::<Vec<_>>());
    }

    #[test]
    fn standardize_hand_example() {
        // values [2,4] observed -> [-1, 1], mean 3, population std 1
        let tokens = vec![Token::new(0, 0.0, 2.0), Token::new(0, 1.0, 4.0)];
        let w = TimeSeriesWindow::new(tokens, 1).unwrap();
        let (std_w, state) = standardize(&w).unwrap();
        assert!((state.mean(0) - 3.0).abs() < 1e-12);
        assert!((state.std(0) - 1.0).abs() < 1e-12);
        assert!((std_w.tokens()[0].value + 1.0).abs() < 1e-12);
        assert!((std_w.tokens()[1].value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn standardize_constant_series_floors_std() {
        let tokens = (0..3).map(|j| Token::new(0, j as f64, 5.0)).collect();
        let w = TimeSeriesWindow::new(tokens, 1).unwrap();
        let (std_w, state) = standardize(&w).unwrap();
        assert_eq!(state.std(0), STD_FLOOR);
        for t in std_w.tokens() {
            assert_eq!(t.value, 0.0);
        }
    }

    #[test]
    fn standardize_roundtrip_identity() {
        let w = grid_window(2, 7);
        let masked = apply_task_mask(&w, &TaskSpec::forecast(2, 3)).unwrap();
        let (std_w, state) = standardize(&masked).unwrap();
        let back = destandardize(&std_w, &state);
        for (a, b) in back.tokens().iter().zip(masked.tokens()) {
            assert!((a.value - b.value).abs() < 1e-10);
        }
    }

    #[test]
    fn standardize_all_masked_series_errors() {
        let tokens = vec![
            Token { observed: false, ..Token::new(0, 0.0, 1.0) },
            Token { observed: false, ..Token::new(0, 1.0, 2.0) },
        ];
        let w = TimeSeriesWindow::new(tokens, 1).unwrap();
        assert!(standardize(&w).is_err());
    }

    #[test]
    fn stats_use_observed_only() {
        let tokens = vec![
            Token::new(0, 0.0, 2.0),
            Token::new(0, 1.0, 4.0),
            Token { observed: false, ..Token::new(0, 2.0, 1000.0) },
        ];
        let w = TimeSeriesWindow::new(tokens, 1).unwrap();
        let (_, state) = standardize(&w).unwrap();
        assert!((state.mean(0) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn non_monotone_timestamps_rejected() {
        let tokens = vec![Token::new(0, 1.0, 1.0), Token::new(0, 1.0, 2.0)];
        assert!(TimeSeriesWindow::new(tokens, 1).is_err());
    }

    #[test]
    fn centered_interpolation_is_centered() {
        let task = TaskSpec::centered_interpolation(10, 4).unwrap();
        assert_eq!(task.inner_range, (4, 7));
        // 3 observed before (1..=3), 3 after (8..=10)
        let w = grid_window(1, 10);
        let masked = apply_task_mask(&w, &task).unwrap();
        let before = masked.tokens().iter().take(3).all(|t| t.observed);
        let after = masked.tokens().iter().rev().take(3).all(|t| t.observed);
        assert!(before && after);
        assert_eq!(masked.n_missing(), 4);
    }
}
