//! Synthetic generators and sampling-corruption processes.

use rand::Rng as _;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

use super::{TimeSeriesWindow, Token};

/// Configuration of the noisy-sines generator. The reference experiment is a
/// bivariate sine process with irregularly spaced observations; amplitudes,
/// phases, spacing jitter, and noise level are exposed here.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SineSpec {
    pub n_series: usize,
    pub length: usize,
    /// Cycles per time unit, one entry per series (or a single entry reused).
    pub frequencies: Vec<f64>,
    /// Amplitudes per series (default all 1).
    #[serde(default)]
    pub amplitudes: Vec<f64>,
    /// Phases per series in radians (default: evenly spread over a cycle).
    #[serde(default)]
    pub phases: Vec<f64>,
    pub noise_std: f64,
    /// Base spacing between observations.
    #[serde(default = "default_time_step")]
    pub time_step: f64,
    /// Uniform timestamp jitter as a fraction of the step, in [0, 0.45].
    /// Zero keeps a regular grid; positive values give per-series irregular,
    /// unaligned grids.
    #[serde(default)]
    pub jitter: f64,
    /// Correlation of the additive noise across series (shared component).
    #[serde(default)]
    pub noise_correlation: f64,
}

fn default_time_step() -> f64 {
    1.0
}

impl SineSpec {
    pub fn bivariate(length: usize, noise_std: f64) -> Self {
        SineSpec {
            n_series: 2,
            length,
            frequencies: vec![0.05, 0.1],
            amplitudes: vec![],
            phases: vec![],
            noise_std,
            time_step: 1.0,
            jitter: 0.0,
            noise_correlation: 0.0,
        }
    }

    fn frequency(&self, s: usize) -> f64 {
        if self.frequencies.len() == 1 {
            self.frequencies[0]
        } else {
            self.frequencies[s]
        }
    }

    fn amplitude(&self, s: usize) -> f64 {
        self.amplitudes.get(s).copied().unwrap_or(1.0)
    }

    fn phase(&self, s: usize) -> f64 {
        self.phases
            .get(s)
            .copied()
            .unwrap_or(2.0 * std::f64::consts::PI * s as f64 / self.n_series.max(1) as f64)
    }

    fn validate(&self) -> Result<()> {
        if self.n_series == 0 || self.length == 0 {
            return Err(Error::Config("sines: n_series and length must be positive".into()));
        }
        if self.frequencies.len() != 1 && self.frequencies.len() != self.n_series {
            return Err(Error::Config("sines.frequencies: need 1 or n_series entries".into()));
        }
        if self.frequencies.iter().any(|&f| f <= 0.0) {
            return Err(Error::Config("sines.frequencies: must be positive".into()));
        }
        if !(0.0..=0.45).contains(&self.jitter) {
            return Err(Error::Config("sines.jitter: must be in [0, 0.45]".into()));
        }
        if !(0.0..=1.0).contains(&self.noise_correlation) {
            return Err(Error::Config("sines.noise_correlation: must be in [0, 1]".into()));
        }
        if self.noise_std < 0.0 {
            return Err(Error::Config("sines.noise_std: must be >= 0".into()));
        }
        Ok(())
    }
}

/// Generates sinusoids with additive Gaussian noise on per-series timestamp
/// grids. Deterministic under `seed`.
pub fn gen_noisy_sines(spec: &SineSpec, seed: u64) -> Result<TimeSeriesWindow> {
    spec.validate()?;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let rho = spec.noise_correlation;
    let shared_w = rho.sqrt();
    let idio_w = (1.0 - rho).sqrt();

    // Shared noise component per time index, so series drawn on different
    // grids still correlate index-wise.
    let mut shared_rng = rng::stream(seed, &[0xC0]);
    let shared: Vec<f64> = (0..spec.length).map(|_| normal.sample(&mut shared_rng)).collect();

    let mut tokens = Vec::with_capacity(spec.n_series * spec.length);
    for s in 0..spec.n_series {
        let mut r = rng::stream(seed, &[0xC1, s as u64]);
        let jitter = Uniform::new(-spec.jitter, spec.jitter.max(f64::MIN_POSITIVE)).expect("jitter range");
        for j in 0..spec.length {
            let base = j as f64 * spec.time_step;
            let t = if spec.jitter > 0.0 { base + jitter.sample(&mut r) * spec.time_step } else { base };
            let clean =
                spec.amplitude(s) * (2.0 * std::f64::consts::PI * spec.frequency(s) * t + spec.phase(s)).sin();
            let eps = if spec.noise_std > 0.0 {
                spec.noise_std * (shared_w * shared[j] + idio_w * normal.sample(&mut r))
            } else {
                // keep the RNG stream aligned whether or not noise is used
                let _ = normal.sample(&mut r);
                0.0
            };
            tokens.push(Token::new(s, t, clean + eps));
        }
    }
    TimeSeriesWindow::new(tokens, spec.n_series)
}

fn check_evenly_sampled(window: &TimeSeriesWindow) -> Result<()> {
    for s in 0..window.n_series() {
        let idx = window.series_token_indices(s);
        if idx.len() < 3 {
            continue;
        }
        let t: Vec<f64> = idx.iter().map(|&i| window.tokens()[i].timestamp).collect();
        let step = t[1] - t[0];
        for pair in t.windows(2) {
            if ((pair[1] - pair[0]) - step).abs() > 1e-9 * step.abs().max(1.0) {
                return Err(Error::Data(format!("series {s} is not evenly sampled")));
            }
        }
    }
    Ok(())
}

/// Uneven-sampling corruption: per series, after keeping the observation at
/// step `t`, the next kept observation is at `t + delta` with `delta` drawn
/// uniformly from {1, 2, 3}. Removed tokens are deleted, not masked.
pub fn corrupt_uneven(window: &TimeSeriesWindow, seed: u64) -> Result<TimeSeriesWindow> {
    let mut r = rng::stream(seed, &[0xD1]);
    corrupt_uneven_with(window, |_series| r.random_range(1..=3usize))
}

/// Uneven corruption with an injected gap sampler (`delta` in {1,2,3}).
pub fn corrupt_uneven_with(
    window: &TimeSeriesWindow,
    mut next_gap: impl FnMut(usize) -> usize,
) -> Result<TimeSeriesWindow> {
    check_evenly_sampled(window)?;
    let mut keep = vec![false; window.len()];
    for s in 0..window.n_series() {
        let idx = window.series_token_indices(s);
        let mut j = 0usize;
        while j < idx.len() {
            keep[idx[j]] = true;
            let delta = next_gap(s);
            assert!((1..=3).contains(&delta), "gap must be in 1..=3");
            j += delta;
        }
    }
    let tokens: Vec<Token> = window
        .tokens()
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(t, _)| t.clone())
        .collect();
    TimeSeriesWindow::new(tokens, window.n_series())
}

/// Unaligned-sampling corruption: per series, the sampling frequency is
/// drawn uniformly from {original, half, quarter}; tokens off the chosen
/// grid are deleted.
pub fn corrupt_unaligned(window: &TimeSeriesWindow, seed: u64) -> Result<TimeSeriesWindow> {
    check_evenly_sampled(window)?;
    let mut r = rng::stream(seed, &[0xD2]);
    let mut keep = vec![false; window.len()];
    for s in 0..window.n_series() {
        let factor = [1usize, 2, 4][r.random_range(0..3usize)];
        let idx = window.series_token_indices(s);
        for (pos, &i) in idx.iter().enumerate() {
            if pos % factor == 0 {
                keep[i] = true;
            }
        }
    }
    let tokens: Vec<Token> = window
        .tokens()
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(t, _)| t.clone())
        .collect();
    TimeSeriesWindow::new(tokens, window.n_series())
}
