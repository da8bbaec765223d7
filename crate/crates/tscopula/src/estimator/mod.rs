//! The assembled density estimator and its training curriculum.
//!
//! The joint density of a window's missing values factors into
//! per-variable marginal densities (flow path) and a copula density over
//! their PIT values (copula path). The two paths have disjoint parameter
//! groups: theta_M drives the marginal encoder and hypernetwork, theta_C
//! drives the copula encoder and decoder. Training proceeds either as the
//! two-stage curriculum: marginals under an independence copula, then a
//! frozen-marginal copula stage: or as the single-stage joint ablation.

mod checkpoint;
mod flops;
mod history;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use flops::{FlopLedger, StageFlops};
pub use history::{read_history_jsonl, write_history_jsonl, EpochRecord, Termination};
pub use train::{train_curriculum, train_joint_ablation, TrainConfig, TrainData, TrainReport};

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::copula::{CopulaConfig, CopulaDecoder, CopulaFlags, CopulaInput, CopulaSpan};
use crate::data::{standardize, NormalizationState, TimeSeriesWindow};
use crate::encoder::{DualEncoder, EncoderConfig, TokenBatch};
use crate::error::{Error, Result};
use crate::flow::{cdf_inverse, flow_forward, DsfParams, FlowConfig, Hypernet};
use crate::nn::ParamStore;
use crate::rng::Rng;
use crate::tape::{NodeId, Tape};

/// Which parameter group is being trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Stage1,
    Stage2,
    Joint,
}

/// Full model shape. `build` derives the parameter layout deterministically,
/// so a config plus a store snapshot reconstructs the exact model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_series: usize,
    pub n_covariates: usize,
    pub marginal_encoder: EncoderConfig,
    pub copula_encoder: EncoderConfig,
    pub flow: FlowConfig,
    pub hypernet_hidden: usize,
    pub copula: CopulaConfig,
    /// Standardize each window from its observed tokens before modeling.
    pub standardize: bool,
}

impl ModelConfig {
    /// Desk-scale defaults.
    pub fn default_for(n_series: usize, n_covariates: usize) -> Self {
        let marginal_encoder = EncoderConfig::default_for(n_series, n_covariates);
        let copula_encoder = EncoderConfig::default_for(n_series, n_covariates);
        let copula = CopulaConfig::default_for(copula_encoder.width);
        ModelConfig {
            n_series,
            n_covariates,
            marginal_encoder,
            copula_encoder,
            flow: FlowConfig::default(),
            hypernet_hidden: 32,
            copula,
            standardize: true,
        }
    }

    /// A small configuration for tests and demos.
    pub fn tiny(n_series: usize, n_covariates: usize) -> Self {
        let mut cfg = Self::default_for(n_series, n_covariates);
        cfg.marginal_encoder.width = 16;
        cfg.marginal_encoder.layers = 1;
        cfg.marginal_encoder.heads = 2;
        cfg.marginal_encoder.ff_hidden = 16;
        cfg.copula_encoder.width = 16;
        cfg.copula_encoder.layers = 1;
        cfg.copula_encoder.heads = 2;
        cfg.copula_encoder.ff_hidden = 16;
        cfg.flow = FlowConfig { layers: 2, hidden: 4 };
        cfg.hypernet_hidden = 16;
        cfg.copula = CopulaConfig {
            bins: 20,
            u_embed_dim: 4,
            heads: 2,
            head_dim: 4,
            mlp_hidden: 16,
            z_width: 16,
        };
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.marginal_encoder.validate("model.marginal_encoder")?;
        self.copula_encoder.validate("model.copula_encoder")?;
        self.flow.validate()?;
        self.copula.validate("model.copula")?;
        if self.copula.z_width != self.copula_encoder.width {
            return Err(Error::Config(format!(
                "model.copula.z_width {} != copula encoder width {}",
                self.copula.z_width, self.copula_encoder.width
            )));
        }
        if self.marginal_encoder.n_series != self.n_series
            || self.copula_encoder.n_series != self.n_series
        {
            return Err(Error::Config("encoder n_series out of sync with model.n_series".into()));
        }
        if self.hypernet_hidden == 0 {
            return Err(Error::Config("model.hypernet_hidden must be positive".into()));
        }
        Ok(())
    }

    /// Builds the architecture and freshly initialized parameter groups.
    pub fn build(&self, seed: u64) -> Result<(Model, ModelState)> {
        self.validate()?;
        let mut store_m = ParamStore::new(GROUP_MARGINAL);
        let mut store_c = ParamStore::new(GROUP_COPULA);
        let mut r = crate::rng::stream(seed, &[0x1217]);
        let encoder = DualEncoder::new(
            &mut store_m,
            &mut store_c,
            &mut r,
            self.marginal_encoder.clone(),
            self.copula_encoder.clone(),
        );
        let hypernet = Hypernet::new(
            &mut store_m,
            &mut r,
            "hypernet",
            self.marginal_encoder.width,
            self.hypernet_hidden,
            self.flow,
        );
        let decoder = CopulaDecoder::new(&mut store_c, &mut r, "copula", self.copula.clone());
        let model = Model { config: self.clone(), encoder, hypernet, decoder };
        let state = ModelState { theta_m: store_m, theta_c: store_c, phase: Phase::Stage1 };
        Ok((model, state))
    }
}

pub const GROUP_MARGINAL: u32 = 0;
pub const GROUP_COPULA: u32 = 1;

/// The architecture: module definitions and parameter indices.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: DualEncoder,
    pub hypernet: Hypernet,
    pub decoder: CopulaDecoder,
}

/// Learnable state: the two disjoint parameter groups and the phase.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelState {
    pub theta_m: ParamStore,
    pub theta_c: ParamStore,
    pub phase: Phase,
}

/// A window after task masking and (optional) per-window standardization.
#[derive(Debug, Clone)]
pub struct PreparedWindow {
    pub window: TimeSeriesWindow,
    pub norm: NormalizationState,
    /// Sum of ln(sigma) over missing tokens: the log-density Jacobian
    /// correction when reporting in original units.
    pub log_sigma_sum: f64,
}

/// Masks-applied window -> model-space window.
pub fn prepare_window(config: &ModelConfig, window: &TimeSeriesWindow) -> Result<PreparedWindow> {
    if window.n_missing() == 0 {
        return Err(Error::Data("window has no missing tokens; nothing to predict".into()));
    }
    let (std_window, norm) = if config.standardize {
        standardize(window)?
    } else {
        (window.clone(), NormalizationState::identity(window.n_series()))
    };
    let log_sigma_sum = std_window
        .tokens()
        .iter()
        .filter(|t| !t.observed)
        .map(|t| norm.std(t.series_id).ln())
        .sum();
    Ok(PreparedWindow { window: std_window, norm, log_sigma_sum })
}

/// How the forward graph is wired.
enum ForwardMode {
    /// theta_M path only (stage-1 objective; the copula path is not
    /// evaluated at all).
    MarginalOnly,
    /// Copula path in-graph; u values come from a gradient-free side pass
    /// through the frozen marginal path. The side pass's forward FLOPs are
    /// reported back through the first tuple element.
    CopulaDetached,
    /// Everything in one graph (joint NLL).
    Full,
}

/// Per-window loss nodes: total log-likelihood contributions (not negated).
struct WindowNodes {
    marg: Option<NodeId>,
    cop: Option<NodeId>,
    /// Frozen marginal log-likelihood value in detached mode.
    marg_value: f64,
    d: usize,
}

struct BatchForward {
    tape: Tape,
    windows: Vec<WindowNodes>,
    flags: CopulaFlags,
    /// Forward FLOPs of the detached side pass (zero otherwise).
    side_flops: u64,
}

fn canonical_orderings(prepared: &[&PreparedWindow]) -> Vec<Vec<usize>> {
    prepared.iter().map(|p| (0..p.window.n_missing()).collect()).collect()
}

fn random_orderings(prepared: &[&PreparedWindow], rng: &mut Rng) -> Vec<Vec<usize>> {
    prepared
        .iter()
        .map(|p| {
            let mut ord: Vec<usize> = (0..p.window.n_missing()).collect();
            ord.shuffle(rng);
            ord
        })
        .collect()
}

/// Builds the forward graph for a batch. `orderings[w]` is a permutation of
/// window w's missing tokens (local indices, canonical base order).
fn run_forward(
    model: &Model,
    state: &ModelState,
    prepared: &[&PreparedWindow],
    mode: ForwardMode,
    orderings: &[Vec<usize>],
) -> Result<BatchForward> {
    let refs: Vec<&TimeSeriesWindow> = prepared.iter().map(|p| &p.window).collect();
    let batch = TokenBatch::from_windows(&refs, model.config.n_covariates)?;
    let n_tokens = batch.n_tokens();
    let x_all = Array2::from_shape_fn((n_tokens, 1), |(i, _)| batch.values[i]);

    let mut tape = Tape::new();
    let mut flags = CopulaFlags::default();
    let mut side_flops = 0u64;

    // ----- marginal path -----
    let mut marg_nodes: Vec<Option<NodeId>> = vec![None; prepared.len()];
    let mut marg_values: Vec<f64> = vec![0.0; prepared.len()];
    let mut u_node: Option<NodeId> = None;

    match mode {
        ForwardMode::MarginalOnly => {
            let z_m = model.encoder.marginal.forward(&mut tape, &state.theta_m, &batch)?;
            let miss_rows: Vec<usize> =
                batch.windows.iter().flat_map(|s| s.missing.iter().cloned()).collect();
            let z_miss = tape.select_rows(z_m, miss_rows.clone());
            let raw = model.hypernet.forward(&mut tape, &state.theta_m, z_miss);
            let x_miss = Array2::from_shape_fn((miss_rows.len(), 1), |(i, _)| x_all[[miss_rows[i], 0]]);
            let x_node = tape.constant(x_miss);
            let (_, logf) = flow_forward(&mut tape, raw, x_node, &model.config.flow);
            let mut pos = 0usize;
            for (w, span) in batch.windows.iter().enumerate() {
                let rows: Vec<usize> = (pos..pos + span.missing.len()).collect();
                pos += span.missing.len();
                let sel = tape.select_rows(logf, rows);
                marg_nodes[w] = Some(tape.sum_all(sel));
            }
        }
        ForwardMode::Full => {
            let (z_m, _) = (
                model.encoder.marginal.forward(&mut tape, &state.theta_m, &batch)?,
                (),
            );
            let raw = model.hypernet.forward(&mut tape, &state.theta_m, z_m);
            let x_node = tape.constant(x_all.clone());
            let (u, logf) = flow_forward(&mut tape, raw, x_node, &model.config.flow);
            u_node = Some(u);
            for (w, span) in batch.windows.iter().enumerate() {
                let sel = tape.select_rows(logf, span.missing.clone());
                marg_nodes[w] = Some(tape.sum_all(sel));
            }
        }
        ForwardMode::CopulaDetached => {
            // frozen marginal side pass, values only
            let mut side = Tape::new();
            let z_m = model.encoder.marginal.forward(&mut side, &state.theta_m, &batch)?;
            let raw = model.hypernet.forward(&mut side, &state.theta_m, z_m);
            let x_node = side.constant(x_all.clone());
            let (u, logf) = flow_forward(&mut side, raw, x_node, &model.config.flow);
            side_flops = side.forward_flops();
            let u_vals = side.value(u).clone();
            let logf_vals = side.value(logf);
            for (w, span) in batch.windows.iter().enumerate() {
                marg_values[w] = span.missing.iter().map(|&r| logf_vals[[r, 0]]).sum();
            }
            u_node = Some(tape.constant(u_vals));
        }
    }

    // ----- copula path -----
    let mut cop_nodes: Vec<Option<NodeId>> = vec![None; prepared.len()];
    if !matches!(mode, ForwardMode::MarginalOnly) {
        let z_c = model.encoder.copula.forward(&mut tape, &state.theta_c, &batch)?;
        let u_all = u_node.expect("u values available");
        // windows with d >= 2 get copula factors; a single-variable copula
        // has density 1 by definition, so d = 1 windows contribute zero
        let mut spans = Vec::new();
        let mut span_windows = Vec::new();
        for (w, span) in batch.windows.iter().enumerate() {
            if span.missing.len() < 2 {
                continue;
            }
            let ordered: Vec<usize> = orderings[w].iter().map(|&j| span.missing[j]).collect();
            spans.push(CopulaSpan { obs_rows: span.observed.clone(), miss_rows: ordered });
            span_windows.push(w);
        }
        if !spans.is_empty() {
            let (terms, f) = model
                .decoder
                .log_density_nodes(&mut tape, &state.theta_c, z_c, u_all, &spans);
            flags.merge(f);
            let mut pos = 0usize;
            for (si, span) in spans.iter().enumerate() {
                let rows: Vec<usize> = (pos..pos + span.miss_rows.len()).collect();
                pos += span.miss_rows.len();
                let sel = tape.select_rows(terms, rows);
                cop_nodes[span_windows[si]] = Some(tape.sum_all(sel));
            }
        }
    }

    let windows = (0..prepared.len())
        .map(|w| WindowNodes {
            marg: marg_nodes[w],
            cop: cop_nodes[w],
            marg_value: marg_values[w],
            d: batch.windows[w].missing.len(),
        })
        .collect();
    Ok(BatchForward { tape, windows, flags, side_flops })
}

/// Per-window evaluation of both likelihood parts (values, no gradients).
/// Returns (marginal_loglik_total, copula_loglik_total, d) per window.
fn eval_parts(
    model: &Model,
    state: &ModelState,
    prepared: &[&PreparedWindow],
    orderings: &[Vec<usize>],
) -> Result<(Vec<(f64, f64, usize)>, u64, CopulaFlags)> {
    let fwd = run_forward(model, state, prepared, ForwardMode::Full, orderings)?;
    let out = fwd
        .windows
        .iter()
        .map(|w| {
            let m = w.marg.map(|n| fwd.tape.scalar(n)).unwrap_or(w.marg_value);
            let c = w.cop.map(|n| fwd.tape.scalar(n)).unwrap_or(0.0);
            (m, c, w.d)
        })
        .collect();
    Ok((out, fwd.tape.forward_flops(), fwd.flags))
}

/// Options for likelihood evaluation.
#[derive(Debug, Clone)]
pub struct EvalOptions {
    /// Number of random orderings to average the copula term over;
    /// 1 = the canonical series-major, time-ascending ordering.
    pub orderings: usize,
    /// Report in original units (adds the standardization Jacobian).
    pub original_units: bool,
    /// Seed for the ordering draws when `orderings > 1`.
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { orderings: 1, original_units: false, seed: 0 }
    }
}

/// Joint negative log-likelihood of a window, per dimension
/// (`-(log c + sum log f) / d`), with the Jacobian correction
/// (`+ sum ln sigma / d`) when reporting in original units.
pub fn joint_nll(model: &Model, state: &ModelState, window: &TimeSeriesWindow, opts: &EvalOptions) -> Result<f64> {
    Ok(batch_joint_nll(model, state, std::slice::from_ref(window), opts)?[0])
}

/// Joint NLL for a set of windows (one forward pass per ordering draw;
/// chunked to the encoder's token capacity).
pub fn batch_joint_nll(
    model: &Model,
    state: &ModelState,
    windows: &[TimeSeriesWindow],
    opts: &EvalOptions,
) -> Result<Vec<f64>> {
    let prepared: Vec<PreparedWindow> =
        windows.iter().map(|w| prepare_window(&model.config, w)).collect::<Result<_>>()?;
    let mut totals = vec![0.0; prepared.len()];
    let rounds = opts.orderings.max(1);
    let capacity = model
        .config
        .marginal_encoder
        .max_tokens
        .min(model.config.copula_encoder.max_tokens)
        .max(1);
    // split into chunks that fit the encoders
    let mut chunks: Vec<(usize, usize)> = Vec::new();
    let mut start = 0usize;
    let mut tokens = 0usize;
    for (i, p) in prepared.iter().enumerate() {
        if i > start && tokens + p.window.len() > capacity {
            chunks.push((start, i));
            start = i;
            tokens = 0;
        }
        tokens += p.window.len();
    }
    chunks.push((start, prepared.len()));

    for round in 0..rounds {
        for &(c0, c1) in &chunks {
            let prefs: Vec<&PreparedWindow> = prepared[c0..c1].iter().collect();
            let orderings = if round == 0 {
                canonical_orderings(&prefs)
            } else {
                let mut r = crate::rng::stream(opts.seed, &[0x0D, round as u64, c0 as u64]);
                random_orderings(&prefs, &mut r)
            };
            let (parts, _, _) = eval_parts(model, state, &prefs, &orderings)?;
            for (w, (m, c, _)) in parts.iter().enumerate() {
                totals[c0 + w] += -(m + c) / rounds as f64;
            }
        }
    }
    for (w, p) in prepared.iter().enumerate() {
        let d = p.window.n_missing() as f64;
        totals[w] /= d;
        if opts.original_units {
            totals[w] += p.log_sigma_sum / d;
        }
        if !totals[w].is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite NLL on window {w} (d={d}, {} tokens)",
                p.window.len()
            )));
        }
    }
    Ok(totals)
}

/// Stage-1 objective value for one window: the total marginal NLL
/// `-sum log f` over missing tokens (the copula path is not evaluated).
pub fn stage1_loss(model: &Model, state: &ModelState, window: &TimeSeriesWindow) -> Result<f64> {
    let prepared = prepare_window(&model.config, window)?;
    let prefs = [&prepared];
    let orderings = canonical_orderings(&prefs);
    let fwd = run_forward(model, state, &prefs, ForwardMode::MarginalOnly, &orderings)?;
    Ok(-fwd.tape.scalar(fwd.windows[0].marg.expect("marginal node")))
}

/// Stage-2 objective value for one window: the total copula NLL
/// `-log c` with u computed through the frozen marginals.
pub fn stage2_loss(model: &Model, state: &ModelState, window: &TimeSeriesWindow) -> Result<f64> {
    let prepared = prepare_window(&model.config, window)?;
    let prefs = [&prepared];
    let orderings = canonical_orderings(&prefs);
    let fwd = run_forward(model, state, &prefs, ForwardMode::CopulaDetached, &orderings)?;
    Ok(-fwd.windows[0].cop.map(|n| fwd.tape.scalar(n)).unwrap_or(0.0))
}

/// Samples from the estimated joint distribution of a window's missing
/// values, in original units. Copula samples feed the inverse marginal
/// CDFs; samples whose inverse fails to bracket are dropped and counted.
#[derive(Debug, Clone)]
pub struct SampleOutput {
    /// kept_samples x d, columns in canonical missing-token order.
    pub samples: Array2<f64>,
    pub dropped: usize,
    /// (series_id, timestamp) per sampled dimension.
    pub targets: Vec<(usize, f64)>,
}

/// Everything the trained model says about one window, extracted once:
/// copula embeddings and observed PIT values (canonical ordering, no
/// missing u values), per-missing-token flow parameters, normalization,
/// and the (series, timestamp) identity of each missing token.
#[derive(Debug, Clone)]
pub struct WindowView {
    pub copula_input: CopulaInput,
    pub flow_params: Vec<DsfParams>,
    pub norm: NormalizationState,
    pub targets: Vec<(usize, f64)>,
}

/// Runs a gradient-free forward pass and extracts the window view.
pub fn window_view(model: &Model, state: &ModelState, window: &TimeSeriesWindow) -> Result<WindowView> {
    let prepared = prepare_window(&model.config, window)?;
    let refs = [&prepared.window];
    let batch = TokenBatch::from_windows(&refs, model.config.n_covariates)?;
    let span = &batch.windows[0];
    let d = span.missing.len();
    let targets: Vec<(usize, f64)> = span
        .missing
        .iter()
        .map(|&r| (batch.series_ids[r], prepared.window.tokens()[r].timestamp))
        .collect();

    let mut tape = Tape::new();
    let z_m = model.encoder.marginal.forward(&mut tape, &state.theta_m, &batch)?;
    let raw = model.hypernet.forward(&mut tape, &state.theta_m, z_m);
    let x_all = Array2::from_shape_fn((batch.n_tokens(), 1), |(i, _)| batch.values[i]);
    let x_node = tape.constant(x_all);
    let (u, _) = flow_forward(&mut tape, raw, x_node, &model.config.flow);
    let z_c = model.encoder.copula.forward(&mut tape, &state.theta_c, &batch)?;

    let raw_vals = tape.value(raw);
    let u_vals = tape.value(u);
    let z_c_vals = tape.value(z_c);

    let z_width = model.config.copula.z_width;
    let mut z_obs = Array2::zeros((span.observed.len(), z_width));
    let mut u_obs = Vec::with_capacity(span.observed.len());
    for (i, &r) in span.observed.iter().enumerate() {
        z_obs.row_mut(i).assign(&z_c_vals.row(r));
        u_obs.push(u_vals[[r, 0]].clamp(crate::copula::U_CLAMP, 1.0 - crate::copula::U_CLAMP));
    }
    let mut z_miss = Array2::zeros((d, z_width));
    for (i, &r) in span.missing.iter().enumerate() {
        z_miss.row_mut(i).assign(&z_c_vals.row(r));
    }
    let flow_params: Vec<DsfParams> = span
        .missing
        .iter()
        .map(|&r| DsfParams::from_raw(raw_vals.row(r).as_slice().expect("contiguous"), &model.config.flow))
        .collect();
    Ok(WindowView {
        copula_input: CopulaInput { u_obs, z_obs, u_miss: Vec::new(), z_miss, ordering: (0..d).collect() },
        flow_params,
        norm: prepared.norm,
        targets,
    })
}

pub fn predict_samples(
    model: &Model,
    state: &ModelState,
    window: &TimeSeriesWindow,
    n_samples: usize,
    rng: &mut Rng,
) -> Result<SampleOutput> {
    let view = window_view(model, state, window)?;
    let d = view.flow_params.len();
    if n_samples == 0 {
        return Ok(SampleOutput { samples: Array2::zeros((0, d)), dropped: 0, targets: view.targets });
    }
    let u_draws = model.decoder.sample(&state.theta_c, &view.copula_input, n_samples, rng)?;

    // inverse CDFs per missing token, then back to original units
    let mut kept: Vec<Vec<f64>> = Vec::with_capacity(n_samples);
    let mut dropped = 0usize;
    for s in 0..n_samples {
        let mut row = Vec::with_capacity(d);
        let mut ok = true;
        for (i, p) in view.flow_params.iter().enumerate() {
            match cdf_inverse(p, u_draws[[s, i]]) {
                Ok(x) => {
                    let (sid, _) = view.targets[i];
                    row.push(view.norm.denormalize(sid, x));
                }
                Err(_) => {
                    ok = false;
                    break;
                }
            }
        }
        if ok {
            kept.push(row);
        } else {
            dropped += 1;
        }
    }
    let mut samples = Array2::zeros((kept.len(), d));
    for (s, row) in kept.iter().enumerate() {
        for (i, &v) in row.iter().enumerate() {
            samples[[s, i]] = v;
        }
    }
    Ok(SampleOutput { samples, dropped, targets: view.targets })
}
