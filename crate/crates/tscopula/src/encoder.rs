//! Dual transformer encoders over masked token windows.
//!
//! Both encoders see the same inputs: masked value, covariates, mask bit,
//! series embedding, and an additive sinusoidal positional encoding of the
//! timestamp: but share no parameters: one feeds the marginal path, the
//! other the copula path. Attention runs over the flat token set of each
//! window (full, non-causal), which is what lets unaligned and unevenly
//! sampled windows pass through without a grid.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::TimeSeriesWindow;
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear, ParamStore};
use crate::rng::Rng;
use crate::tape::{AttnBlock, NodeId, Tape};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Token embedding width (= heads * head_dim).
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    /// Feed-forward hidden width.
    pub ff_hidden: usize,
    /// Series-embedding vocabulary size.
    pub n_series: usize,
    pub n_covariates: usize,
    pub max_tokens: usize,
    /// Sinusoidal positional encoding base.
    pub positional_base: f64,
}

impl EncoderConfig {
    /// Desk-scale defaults: 2 layers, 4 heads of dim 16.
    pub fn default_for(n_series: usize, n_covariates: usize) -> Self {
        EncoderConfig {
            width: 64,
            layers: 2,
            heads: 4,
            ff_hidden: 64,
            n_series,
            n_covariates,
            max_tokens: 4096,
            positional_base: 10_000.0,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn validate(&self, path: &str) -> Result<()> {
        if self.width == 0 || self.layers == 0 || self.heads == 0 {
            return Err(Error::Config(format!("{path}: width/layers/heads must be positive")));
        }
        if self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "{path}.width: {} not divisible by heads {}",
                self.width, self.heads
            )));
        }
        if self.n_series == 0 {
            return Err(Error::Config(format!("{path}.n_series must be positive")));
        }
        Ok(())
    }
}

/// Stacked token-level inputs for a batch of windows.
#[derive(Debug, Clone)]
pub struct TokenBatch {
    /// N x (2 + p): [value * mask, covariates..., mask].
    pub features: Array2<f64>,
    pub series_ids: Vec<usize>,
    /// Timestamps affinely rescaled to [0, 100] per window.
    pub rescaled_times: Vec<f64>,
    /// Values of all tokens (standardized space), N x 1.
    pub values: Vec<f64>,
    pub windows: Vec<WindowSpan>,
}

/// One window's row ranges within the stacked batch.
#[derive(Debug, Clone)]
pub struct WindowSpan {
    pub token_range: (usize, usize),
    /// Global row indices of observed tokens, canonical order.
    pub observed: Vec<usize>,
    /// Global row indices of missing tokens, canonical order.
    pub missing: Vec<usize>,
}

impl TokenBatch {
    pub fn from_windows(windows: &[&TimeSeriesWindow], n_covariates: usize) -> Result<Self> {
        let total: usize = windows.iter().map(|w| w.len()).sum();
        let mut features = Array2::zeros((total, 2 + n_covariates));
        let mut series_ids = Vec::with_capacity(total);
        let mut rescaled_times = Vec::with_capacity(total);
        let mut values = Vec::with_capacity(total);
        let mut spans = Vec::with_capacity(windows.len());
        let mut row = 0usize;
        for w in windows {
            if w.covariate_width() != n_covariates {
                return Err(Error::Config(format!(
                    "covariate width mismatch: window has {}, model expects {n_covariates}",
                    w.covariate_width()
                )));
            }
            let start = row;
            let t_min = w.tokens().iter().map(|t| t.timestamp).fold(f64::INFINITY, f64::min);
            let t_max = w.tokens().iter().map(|t| t.timestamp).fold(f64::NEG_INFINITY, f64::max);
            let scale = if t_max > t_min { 100.0 / (t_max - t_min) } else { 0.0 };
            let mut observed = Vec::new();
            let mut missing = Vec::new();
            for tok in w.tokens() {
                let m = if tok.observed { 1.0 } else { 0.0 };
                features[[row, 0]] = tok.value * m;
                for (k, &c) in tok.covariates.iter().enumerate() {
                    features[[row, 1 + k]] = c;
                }
                features[[row, 1 + n_covariates]] = m;
                series_ids.push(tok.series_id);
                rescaled_times.push((tok.timestamp - t_min) * scale);
                values.push(tok.value);
                if tok.observed {
                    observed.push(row);
                } else {
                    missing.push(row);
                }
                row += 1;
            }
            spans.push(WindowSpan { token_range: (start, row), observed, missing });
        }
        Ok(TokenBatch { features, series_ids, rescaled_times, values, windows: spans })
    }

    pub fn n_tokens(&self) -> usize {
        self.features.nrows()
    }

    /// Total missing-token count across the batch.
    pub fn n_missing(&self) -> usize {
        self.windows.iter().map(|w| w.missing.len()).sum()
    }
}

/// Sinusoidal positional features of the rescaled timestamps: per pair
/// (sin(t / base^(2j/W)), cos(t / base^(2j/W))), bounded in [-1, 1].
pub fn positional_encoding(times: &[f64], width: usize, base: f64) -> Array2<f64> {
    let mut pe = Array2::zeros((times.len(), width));
    for (i, &t) in times.iter().enumerate() {
        for j in 0..width / 2 {
            let freq = base.powf(-(2.0 * j as f64) / width as f64);
            pe[[i, 2 * j]] = (t * freq).sin();
            pe[[i, 2 * j + 1]] = (t * freq).cos();
        }
        if width % 2 == 1 {
            let freq = base.powf(-((width - 1) as f64) / width as f64);
            pe[[i, width - 1]] = (t * freq).sin();
        }
    }
    pe
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EncoderLayer {
    ln1: LayerNorm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

/// One transformer encoder (pre-norm, full self-attention per window).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransformerEncoder {
    pub config: EncoderConfig,
    input_proj: Linear,
    series_embed: usize,
    layers: Vec<EncoderLayer>,
}

impl TransformerEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, config: EncoderConfig) -> Self {
        let w = config.width;
        let input_proj = Linear::new(store, rng, &format!("{name}.input"), 2 + config.n_covariates, w);
        let series_embed = store.add(
            &format!("{name}.series_embed"),
            crate::nn::embedding_init(rng, config.n_series, w),
        );
        let layers = (0..config.layers)
            .map(|l| {
                let p = format!("{name}.layer{l}");
                EncoderLayer {
                    ln1: LayerNorm::new(store, &format!("{p}.ln1"), w),
                    wq: Linear::new(store, rng, &format!("{p}.wq"), w, w),
                    wk: Linear::new(store, rng, &format!("{p}.wk"), w, w),
                    wv: Linear::new(store, rng, &format!("{p}.wv"), w, w),
                    wo: Linear::new(store, rng, &format!("{p}.wo"), w, w),
                    ln2: LayerNorm::new(store, &format!("{p}.ln2"), w),
                    ff1: Linear::new(store, rng, &format!("{p}.ff1"), w, config.ff_hidden),
                    ff2: Linear::new(store, rng, &format!("{p}.ff2"), config.ff_hidden, w),
                }
            })
            .collect();
        TransformerEncoder { config, input_proj, series_embed, layers }
    }

    /// Input featurization: learned projection of [x*m ; covariates ; m]
    /// plus the series embedding plus the positional encoding.
    pub fn embed_input(&self, tape: &mut Tape, store: &ParamStore, batch: &TokenBatch) -> NodeId {
        let feats = tape.constant(batch.features.clone());
        let projected = self.input_proj.forward(tape, store, feats);
        let table = store.node(tape, self.series_embed);
        let series = tape.select_rows(table, batch.series_ids.clone());
        let with_series = tape.add(projected, series);
        let pe = positional_encoding(&batch.rescaled_times, self.config.width, self.config.positional_base);
        let pe_n = tape.constant(pe);
        tape.add(with_series, pe_n)
    }

    /// Full forward pass: token embeddings, N x width.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, batch: &TokenBatch) -> Result<NodeId> {
        if batch.n_tokens() > self.config.max_tokens {
            return Err(Error::Capacity { actual: batch.n_tokens(), max: self.config.max_tokens });
        }
        let blocks: Vec<AttnBlock> = batch
            .windows
            .iter()
            .map(|w| AttnBlock::full(w.token_range.0, w.token_range.1, w.token_range.0, w.token_range.1))
            .collect();
        let dk = self.config.head_dim();
        let scale = 1.0 / (dk as f64).sqrt();

        let mut h = self.embed_input(tape, store, batch);
        for layer in &self.layers {
            let a = layer.ln1.forward(tape, store, h);
            let q = layer.wq.forward(tape, store, a);
            let k = layer.wk.forward(tape, store, a);
            let v = layer.wv.forward(tape, store, a);
            let mut heads = Vec::with_capacity(self.config.heads);
            for hd in 0..self.config.heads {
                let (c0, c1) = (hd * dk, (hd + 1) * dk);
                let qh = tape.slice_cols(q, c0, c1);
                let kh = tape.slice_cols(k, c0, c1);
                let vh = tape.slice_cols(v, c0, c1);
                heads.push(tape.attention(qh, kh, vh, scale, blocks.clone()));
            }
            let mut ctx = heads[0];
            for &hn in &heads[1..] {
                ctx = tape.concat_cols(ctx, hn);
            }
            let proj = layer.wo.forward(tape, store, ctx);
            h = tape.add(h, proj);

            let b = layer.ln2.forward(tape, store, h);
            let f1 = layer.ff1.forward(tape, store, b);
            let act = tape.relu(f1);
            let f2 = layer.ff2.forward(tape, store, act);
            h = tape.add(h, f2);
        }
        Ok(h)
    }
}

/// The two parameter-disjoint encoders: marginal path and copula path.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DualEncoder {
    pub marginal: TransformerEncoder,
    pub copula: TransformerEncoder,
}

impl DualEncoder {
    pub fn new(
        store_m: &mut ParamStore,
        store_c: &mut ParamStore,
        rng: &mut Rng,
        marginal_cfg: EncoderConfig,
        copula_cfg: EncoderConfig,
    ) -> Self {
        DualEncoder {
            marginal: TransformerEncoder::new(store_m, rng, "enc_m", marginal_cfg),
            copula: TransformerEncoder::new(store_c, rng, "enc_c", copula_cfg),
        }
    }

    /// Produces (z_M, z_C) for a batch. The stores are disjoint, so
    /// gradients of either output w.r.t. the other store are identically
    /// zero by construction.
    pub fn encode(
        &self,
        tape: &mut Tape,
        store_m: &ParamStore,
        store_c: &ParamStore,
        batch: &TokenBatch,
    ) -> Result<(NodeId, NodeId)> {
        let z_m = self.marginal.forward(tape, store_m, batch)?;
        let z_c = self.copula.forward(tape, store_c, batch)?;
        Ok((z_m, z_c))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Token;
    use crate::rng;

    fn small_config(n_series: usize) -> EncoderConfig {
        EncoderConfig {
            width: 8,
            layers: 1,
            heads: 2,
            ff_hidden: 8,
            n_series,
            n_covariates: 0,
            max_tokens: 512,
            positional_base: 10_000.0,
        }
    }

    fn two_token_window() -> TimeSeriesWindow {
        let tokens = vec![
            Token::new(0, 0.0, 0.7),
            Token { observed: false, ..Token::new(0, 1.0, 42.0) },
        ];
        TimeSeriesWindow::new(tokens, 1).unwrap()
    }

    #[test]
    fn masked_value_channel_is_zero() {
        let w = two_token_window();
        let batch = TokenBatch::from_windows(&[&w], 0).unwrap();
        assert_eq!(batch.features[[1, 0]], 0.0); // x*m with m=0
        assert_eq!(batch.features[[1, 1]], 0.0); // mask bit
        assert_eq!(batch.features[[0, 0]], 0.7);
        assert_eq!(batch.features[[0, 1]], 1.0);
    }

    #[test]
    fn positional_encoding_at_zero_alternates() {
        let pe = positional_encoding(&[0.0], 8, 10_000.0);
        for j in 0..4 {
            assert_eq!(pe[[0, 2 * j]], 0.0);
            assert_eq!(pe[[0, 2 * j + 1]], 1.0);
        }
    }

    #[test]
    fn positional_encoding_bounded() {
        let times: Vec<f64> = (0..50).map(|i| i as f64 * 2.0).collect();
        let pe = positional_encoding(&times, 16, 10_000.0);
        for v in pe.iter() {
            assert!((-1.0..=1.0).contains(v));
        }
    }

    #[test]
    fn timestamp_only_difference_shows_only_in_positional_part() {
        let mut r = rng::stream(20, &[]);
        let mut store = ParamStore::new(0);
        let enc = TransformerEncoder::new(&mut store, &mut r, "e", small_config(1));
        let mk = |t: f64| {
            let tokens = vec![Token::new(0, 0.0, 0.5), Token::new(0, t, 0.5)];
            TimeSeriesWindow::new(tokens, 1).unwrap()
        };
        // both windows rescale to [0,100]; tokens share value/series/mask
        let w = mk(4.0);
        let batch = TokenBatch::from_windows(&[&w], 0).unwrap();
        let mut tape = Tape::new();
        let h = enc.embed_input(&mut tape, &store, &batch);
        let pe = positional_encoding(&batch.rescaled_times, 8, 10_000.0);
        let diff_embed: Vec<f64> = (0..8).map(|j| tape.value(h)[[1, j]] - tape.value(h)[[0, j]]).collect();
        let diff_pe: Vec<f64> = (0..8).map(|j| pe[[1, j]] - pe[[0, j]]).collect();
        for (a, b) in diff_embed.iter().zip(&diff_pe) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn covariate_width_mismatch_is_config_error() {
        let w = two_token_window();
        assert!(TokenBatch::from_windows(&[&w], 3).is_err());
    }

    #[test]
    fn capacity_error_on_oversized_window() {
        let mut r = rng::stream(21, &[]);
        let mut store = ParamStore::new(0);
        let mut cfg = small_config(1);
        cfg.max_tokens = 1;
        let enc = TransformerEncoder::new(&mut store, &mut r, "e", cfg);
        let w = two_token_window();
        let batch = TokenBatch::from_windows(&[&w], 0).unwrap();
        let mut tape = Tape::new();
        match enc.forward(&mut tape, &store, &batch) {
            Err(Error::Capacity { actual: 2, max: 1 }) => {}
            other => panic!("expected capacity error, got {other:?}"),
        }
    }

    #[test]
    fn encoding_is_deterministic() {
        let mut r = rng::stream(22, &[]);
        let mut store = ParamStore::new(0);
        let enc = TransformerEncoder::new(&mut store, &mut r, "e", small_config(1));
        let w = two_token_window();
        let batch = TokenBatch::from_windows(&[&w], 0).unwrap();
        let run = || {
            let mut tape = Tape::new();
            let h = enc.forward(&mut tape, &store, &batch).unwrap();
            tape.value(h).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn duplicated_window_duplicates_embeddings() {
        let mut r = rng::stream(23, &[]);
        let mut store = ParamStore::new(0);
        let enc = TransformerEncoder::new(&mut store, &mut r, "e", small_config(2));
        let tokens = vec![
            Token::new(0, 0.0, 0.3),
            Token::new(0, 1.0, -0.8),
            Token::new(1, 0.5, 1.2),
        ];
        let w = TimeSeriesWindow::new(tokens, 2).unwrap();
        let batch = TokenBatch::from_windows(&[&w, &w], 0).unwrap();
        let mut tape = Tape::new();
        let h = enc.forward(&mut tape, &store, &batch).unwrap();
        let out = tape.value(h);
        for i in 0..3 {
            for j in 0..8 {
                assert!(
                    (out[[i, j]] - out[[i + 3, j]]).abs() < 1e-12,
                    "cross-window leakage at token {i} dim {j}"
                );
            }
        }
    }

    #[test]
    fn parameter_groups_are_disjoint() {
        let mut r = rng::stream(24, &[]);
        let mut store_m = ParamStore::new(0);
        let mut store_c = ParamStore::new(1);
        let dual = DualEncoder::new(&mut store_m, &mut store_c, &mut r, small_config(1), small_config(1));
        let w = two_token_window();
        let batch = TokenBatch::from_windows(&[&w], 0).unwrap();
        let mut tape = Tape::new();
        let (z_m, z_c) = dual.encode(&mut tape, &store_m, &store_c, &batch).unwrap();
        // gradient of sum(z_C) w.r.t. theta_M is identically zero (absent)
        let loss_c = tape.sum_all(z_c);
        let grads = tape.backward(loss_c);
        assert!(grads.iter().all(|((g, _), _)| *g == 1));
        // and vice versa
        let loss_m = tape.sum_all(z_m);
        let grads = tape.backward(loss_m);
        assert!(grads.iter().all(|((g, _), _)| *g == 0));
    }

    #[test]
    fn permuting_tokens_permutes_outputs() {
        // attention over a set: same tokens in a different row order yield
        // the same embeddings, row-permuted
        let mut r = rng::stream(25, &[]);
        let mut store = ParamStore::new(0);
        let enc = TransformerEncoder::new(&mut store, &mut r, "e", small_config(2));
        let tokens = vec![
            Token::new(0, 0.0, 0.3),
            Token::new(0, 1.0, -0.8),
            Token::new(1, 0.5, 1.2),
            Token { observed: false, ..Token::new(1, 2.0, 0.0) },
        ];
        let w = TimeSeriesWindow::new(tokens, 2).unwrap();
        let base = TokenBatch::from_windows(&[&w], 0).unwrap();
        let perm = [2usize, 0, 3, 1];
        let mut permuted = base.clone();
        let mut feats = Array2::zeros(base.features.dim());
        for (new_row, &old_row) in perm.iter().enumerate() {
            feats.row_mut(new_row).assign(&base.features.row(old_row));
            permuted.series_ids[new_row] = base.series_ids[old_row];
            permuted.rescaled_times[new_row] = base.rescaled_times[old_row];
            permuted.values[new_row] = base.values[old_row];
        }
        permuted.features = feats;

        let run = |batch: &TokenBatch| {
            let mut tape = Tape::new();
            let h = enc.forward(&mut tape, &store, batch).unwrap();
            tape.value(h).clone()
        };
        let out_base = run(&base);
        let out_perm = run(&permuted);
        for (new_row, &old_row) in perm.iter().enumerate() {
            for j in 0..8 {
                assert!(
                    (out_perm[[new_row, j]] - out_base[[old_row, j]]).abs() < 1e-10,
                    "row {new_row} dim {j}"
                );
            }
        }
    }

    #[test]
    fn two_token_single_layer_matches_hand_rolled_attention() {
        // identity-initialized projections, zeroed feed-forward: the layer
        // output is h0 + softmax(LN(h0) LN(h0)^T / sqrt(d)) LN(h0)
        let mut r = rng::stream(26, &[]);
        let mut store = ParamStore::new(0);
        let cfg = EncoderConfig {
            width: 4,
            layers: 1,
            heads: 1,
            ff_hidden: 4,
            n_series: 1,
            n_covariates: 0,
            max_tokens: 64,
            positional_base: 10_000.0,
        };
        let enc = TransformerEncoder::new(&mut store, &mut r, "e", cfg);
        let layer = &enc.layers[0];
        let eye = Array2::from_shape_fn((4, 4), |(i, j)| if i == j { 1.0 } else { 0.0 });
        for lin in [&layer.wq, &layer.wk, &layer.wv, &layer.wo] {
            store.data_mut(lin.w).copy_from_slice(eye.as_slice().unwrap());
            for v in store.data_mut(lin.b) {
                *v = 0.0;
            }
        }
        for lin in [&layer.ff1, &layer.ff2] {
            for v in store.data_mut(lin.w) {
                *v = 0.0;
            }
            for v in store.data_mut(lin.b) {
                *v = 0.0;
            }
        }

        let w = two_token_window();
        let batch = TokenBatch::from_windows(&[&w], 0).unwrap();
        let mut tape = Tape::new();
        let h0_node = enc.embed_input(&mut tape, &store, &batch);
        let h0 = tape.value(h0_node).clone();
        let out_node = enc.forward(&mut tape, &store, &batch).unwrap();
        let out = tape.value(out_node).clone();

        // hand-rolled oracle
        let ln = |row: &[f64]| -> Vec<f64> {
            let w = row.len() as f64;
            let mean = row.iter().sum::<f64>() / w;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w;
            let inv = 1.0 / (var + 1e-5).sqrt();
            row.iter().map(|v| (v - mean) * inv).collect()
        };
        let a0 = ln(h0.row(0).as_slice().unwrap());
        let a1 = ln(h0.row(1).as_slice().unwrap());
        let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
        let scale = 1.0 / 2.0; // 1/sqrt(4)
        let rows = [a0.clone(), a1.clone()];
        for (i, ai) in rows.iter().enumerate() {
            let s0 = dot(ai, &a0) * scale;
            let s1 = dot(ai, &a1) * scale;
            let m = s0.max(s1);
            let (e0, e1) = ((s0 - m).exp(), (s1 - m).exp());
            let z = e0 + e1;
            for j in 0..4 {
                let ctx = (e0 / z) * a0[j] + (e1 / z) * a1[j];
                let expect = h0[[i, j]] + ctx;
                assert!(
                    (out[[i, j]] - expect).abs() < 1e-10,
                    "token {i} dim {j}: {} vs {expect}",
                    out[[i, j]]
                );
            }
        }
    }
}
