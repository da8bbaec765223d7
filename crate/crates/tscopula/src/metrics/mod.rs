//! Proper scoring rules and their aggregation.
//!
//! CRPS is computed from samples through the energy form
//! `E|X - x*| - 0.5 E|X - X'|` of the quantile integral, exactly in
//! O(m log m) from sorted samples (the plug-in CRPS of the empirical
//! forecast distribution). The energy score uses all distinct unordered
//! sample pairs for its `X - X'` term. Standard errors of aggregate means
//! use the Bartlett-kernel autocovariance estimator with 3 lags.

mod backtest;

pub use backtest::{backtest, BacktestOutcome, BacktestSchedule, BacktestTask, TrainedModel};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor for per-series normalization by mean absolute ground truth.
const NORM_FLOOR: f64 = 1e-8;

/// Sample-based CRPS against a scalar ground truth (raw, unnormalized):
/// `mean_i |x_i - x*| - (1/(2 m^2)) sum_ij |x_i - x_j|`.
pub fn crps(samples: &[f64], x_star: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Data("crps of empty sample vector".into()));
    }
    let m = samples.len();
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("NaN sample"));
    let term1: f64 = sorted.iter().map(|x| (x - x_star).abs()).sum::<f64>() / m as f64;
    // sum over ordered pairs of |x_i - x_j| from the sorted order:
    // sum_j x_(j) * (2j - m + 1), j zero-based
    let mut pair_sum = 0.0;
    for (j, &x) in sorted.iter().enumerate() {
        pair_sum += x * (2.0 * j as f64 - m as f64 + 1.0);
    }
    Ok(term1 - pair_sum / (m as f64 * m as f64))
}

/// CRPS averaged over a (series x time) grid with per-series normalization
/// by the mean absolute ground truth of that series.
///
/// `samples[k]` is the k-th joint sample, shaped series x time.
pub fn crps_grid(samples: &[Array2<f64>], truth: &Array2<f64>) -> Result<f64> {
    check_grid(samples, truth)?;
    let (n_series, n_time) = truth.dim();
    let mut total = 0.0;
    for i in 0..n_series {
        let norm = (0..n_time).map(|t| truth[[i, t]].abs()).sum::<f64>() / n_time as f64;
        let norm = norm.max(NORM_FLOOR);
        for t in 0..n_time {
            let vals: Vec<f64> = samples.iter().map(|s| s[[i, t]]).collect();
            total += crps(&vals, truth[[i, t]])? / norm;
        }
    }
    Ok(total / (n_series * n_time) as f64)
}

/// CRPS-Sum: forecasts and ground truth are summed across series per time
/// step, then CRPS is computed over the sums and averaged, normalized by
/// the mean absolute summed ground truth.
pub fn crps_sum(samples: &[Array2<f64>], truth: &Array2<f64>) -> Result<f64> {
    check_grid(samples, truth)?;
    let (n_series, n_time) = truth.dim();
    let truth_sums: Vec<f64> = (0..n_time).map(|t| (0..n_series).map(|i| truth[[i, t]]).sum()).collect();
    let norm = truth_sums.iter().map(|v| v.abs()).sum::<f64>() / n_time as f64;
    let norm = norm.max(NORM_FLOOR);
    let mut total = 0.0;
    for (t, &ts) in truth_sums.iter().enumerate() {
        let sums: Vec<f64> = samples
            .iter()
            .map(|s| (0..n_series).map(|i| s[[i, t]]).sum())
            .collect();
        total += crps(&sums, ts)? / norm;
    }
    Ok(total / n_time as f64)
}

fn check_grid(samples: &[Array2<f64>], truth: &Array2<f64>) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Data("no samples".into()));
    }
    for s in samples {
        if s.dim() != truth.dim() {
            return Err(Error::Data(format!(
                "sample grid {:?} does not match truth grid {:?}",
                s.dim(),
                truth.dim()
            )));
        }
    }
    Ok(())
}

/// Energy score with beta = 1:
/// `mean_i ||x_i - x*|| - 0.5 * mean_{i != j} ||x_i - x_j||`,
/// the second term over all distinct unordered pairs.
pub fn energy_score(samples: &Array2<f64>, x_star: &[f64]) -> Result<f64> {
    let m = samples.nrows();
    if m == 0 {
        return Err(Error::Data("energy score of empty sample set".into()));
    }
    if samples.ncols() != x_star.len() {
        return Err(Error::Data(format!(
            "sample dim {} does not match truth dim {}",
            samples.ncols(),
            x_star.len()
        )));
    }
    let norm = |a: ndarray::ArrayView1<f64>, b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    };
    let term1: f64 = (0..m).map(|i| norm(samples.row(i), x_star)).sum::<f64>() / m as f64;
    if m == 1 {
        return Ok(term1);
    }
    let mut pair_sum = 0.0;
    for i in 0..m {
        for j in i + 1..m {
            let d: f64 = samples
                .row(i)
                .iter()
                .zip(samples.row(j))
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            pair_sum += d;
        }
    }
    let term2 = pair_sum / (m as f64 * (m as f64 - 1.0) / 2.0);
    Ok(term1 - 0.5 * term2)
}

/// Standard error of the mean under the Bartlett-kernel HAC variance:
/// `sqrt((gamma_0 + 2 sum_{l=1..L} (1 - l/(L+1)) gamma_l) / T)` with
/// `gamma_l` the lag-l autocovariance (1/T convention). Lags are truncated
/// to T-1 with a warning when the series is too short.
pub fn newey_west_se(values: &[f64], lags: usize) -> Result<f64> {
    let t = values.len();
    if t < 2 {
        return Err(Error::Data("newey_west_se needs at least 2 values".into()));
    }
    let mut lags = lags;
    if t <= lags {
        eprintln!("warning: newey-west lags {lags} truncated to {} (length {t})", t - 1);
        lags = t - 1;
    }
    // shift by the first element before centering: autocovariances are
    // shift-invariant, and this makes constant input exactly zero
    let shifted: Vec<f64> = values.iter().map(|v| v - values[0]).collect();
    let mean = shifted.iter().sum::<f64>() / t as f64;
    let gamma = |l: usize| -> f64 {
        (l..t).map(|i| (shifted[i] - mean) * (shifted[i - l] - mean)).sum::<f64>() / t as f64
    };
    let mut var = gamma(0);
    for l in 1..=lags {
        let w = 1.0 - l as f64 / (lags as f64 + 1.0);
        var += 2.0 * w * gamma(l);
    }
    Ok((var.max(0.0) / t as f64).sqrt())
}

/// Per-window metric values from one backtest evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WindowMetrics {
    pub cutoff: f64,
    pub crps: f64,
    pub crps_sum: f64,
    pub energy: f64,
    /// Joint NLL per dimension, original units.
    pub nll: f64,
}

/// Aggregate of one metric: arithmetic mean of window values and its
/// Newey-West standard error.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MetricAggregate {
    pub mean: f64,
    pub newey_west_se: f64,
}

/// Backtest report: per-window values plus aggregates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub windows: Vec<WindowMetrics>,
    /// Cutoffs skipped for insufficient history.
    pub skipped_cutoffs: Vec<f64>,
    pub crps: MetricAggregate,
    pub crps_sum: MetricAggregate,
    pub energy: MetricAggregate,
    pub nll: MetricAggregate,
}

impl MetricReport {
    pub fn from_windows(windows: Vec<WindowMetrics>, skipped_cutoffs: Vec<f64>) -> Result<Self> {
        if windows.is_empty() {
            return Ok(MetricReport {
                windows,
                skipped_cutoffs,
                crps: MetricAggregate { mean: f64::NAN, newey_west_se: f64::NAN },
                crps_sum: MetricAggregate { mean: f64::NAN, newey_west_se: f64::NAN },
                energy: MetricAggregate { mean: f64::NAN, newey_west_se: f64::NAN },
                nll: MetricAggregate { mean: f64::NAN, newey_west_se: f64::NAN },
            });
        }
        let agg = |pick: fn(&WindowMetrics) -> f64| -> Result<MetricAggregate> {
            let vals: Vec<f64> = windows.iter().map(pick).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let se = if vals.len() >= 2 { newey_west_se(&vals, 3)? } else { 0.0 };
            Ok(MetricAggregate { mean, newey_west_se: se })
        };
        Ok(MetricReport {
            crps: agg(|w| w.crps)?,
            crps_sum: agg(|w| w.crps_sum)?,
            energy: agg(|w| w.energy)?,
            nll: agg(|w| w.nll)?,
            windows,
            skipped_cutoffs,
        })
    }

    /// Fixed-schema CSV: one row per window plus an aggregate row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("cutoff,crps,crps_sum,energy,nll\n");
        for w in &self.windows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                w.cutoff, w.crps, w.crps_sum, w.energy, w.nll
            ));
        }
        out.push_str(&format!(
            "mean,{},{},{},{}\n",
            self.crps.mean, self.crps_sum.mean, self.energy.mean, self.nll.mean
        ));
        out.push_str(&format!(
            "newey_west_se,{},{},{},{}\n",
            self.crps.newey_west_se,
            self.crps_sum.newey_west_se,
            self.energy.newey_west_se,
            self.nll.newey_west_se
        ));
        out
    }
}
