//! Per-variable marginal CDF as a monotone deep sigmoidal flow on (0, 1).
//!
//! Each variable's CDF is a stack of sigmoid-mixture layers whose
//! parameters come from a hypernetwork conditioned on the token's marginal
//! embedding. Intermediate layers map through logit(sigmoid-mixture) so
//! their output lives back on the real line; the final layer omits the
//! logit, leaving the output in (0, 1) so the flow is directly a CDF.
//! The log density is accumulated analytically alongside the forward pass
//! as a sum of per-layer log derivatives.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Mlp, ParamStore};
use crate::rng::Rng;
use crate::tape::{sigmoid, softplus, NodeId, Tape};

/// Log-density floor: derivative underflow clamps here (and is flagged in
/// the tape diagnostics).
pub const DERIV_FLOOR: f64 = 1e-290;

/// Flow shape: `layers` sigmoid-mixture layers of width `hidden`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FlowConfig {
    pub layers: usize,
    pub hidden: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig { layers: 2, hidden: 8 }
    }
}

impl FlowConfig {
    /// Unconstrained parameter count per token: per layer [a | b | w] blocks.
    pub fn raw_param_count(&self) -> usize {
        self.layers * 3 * self.hidden
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden == 0 {
            return Err(Error::Config("flow.layers and flow.hidden must be positive".into()));
        }
        Ok(())
    }
}

/// Constrained parameters of one flow layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DsfLayer {
    /// Positive slopes.
    pub slopes: Vec<f64>,
    pub biases: Vec<f64>,
    /// Softmax mixture weights (sum to 1).
    pub weights: Vec<f64>,
}

/// Constrained per-variable flow parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DsfParams {
    pub layers: Vec<DsfLayer>,
}

impl DsfParams {
    /// Maps one row of unconstrained hypernetwork output (layout: per-layer
    /// [a_raw | b | w_logits] blocks) into the constrained space.
    pub fn from_raw(raw: &[f64], cfg: &FlowConfig) -> Self {
        assert_eq!(raw.len(), cfg.raw_param_count(), "raw param width");
        let h = cfg.hidden;
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let base = l * 3 * h;
            let slopes: Vec<f64> = raw[base..base + h].iter().map(|&a| softplus(a)).collect();
            let biases: Vec<f64> = raw[base + h..base + 2 * h].to_vec();
            let logits = &raw[base + 2 * h..base + 3 * h];
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|&x| (x - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            let weights: Vec<f64> = exps.iter().map(|&e| e / z).collect();
            layers.push(DsfLayer { slopes, biases, weights });
        }
        DsfParams { layers }
    }

    /// A single-unit flow that reduces to a plain sigmoid (testing aid).
    pub fn sigmoid_unit() -> Self {
        DsfParams {
            layers: vec![DsfLayer { slopes: vec![1.0], biases: vec![0.0], weights: vec![1.0] }],
        }
    }
}

/// CDF value and log density at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowEval {
    pub u: f64,
    pub log_density: f64,
}

/// Evaluates the flow CDF and log density at `x` (the plain, non-tape path;
/// bit-compatible with the tape path).
pub fn cdf_forward(params: &DsfParams, x: f64) -> FlowEval {
    assert!(x.is_finite(), "cdf_forward on non-finite x");
    let n_layers = params.layers.len();
    let mut h = x;
    let mut log_density = 0.0;
    let mut u = 0.5;
    for (l, layer) in params.layers.iter().enumerate() {
        let mut mix = 0.0;
        let mut deriv = 0.0;
        for k in 0..layer.slopes.len() {
            let s = sigmoid(layer.slopes[k] * h + layer.biases[k]);
            mix += layer.weights[k] * s;
            deriv += layer.weights[k] * layer.slopes[k] * s * (1.0 - s);
        }
        log_density += deriv.max(DERIV_FLOOR).ln();
        if l + 1 < n_layers {
            let m = mix.clamp(1e-300, 1.0 - 1e-16);
            let ln_m = m.ln();
            let ln_1m = (1.0 - m).max(1e-300).ln();
            // logit transfer, with its log-derivative -ln(m) - ln(1-m)
            h = ln_m - ln_1m;
            log_density += -ln_m - ln_1m;
        } else {
            u = mix;
        }
    }
    FlowEval { u, log_density }
}

/// Inverse CDF by bracketed bisection with an expanding initial bracket.
pub fn cdf_inverse(params: &DsfParams, u: f64) -> Result<f64> {
    if !(0.0 < u && u < 1.0) {
        return Err(Error::Numeric(format!("cdf_inverse: u={u} outside (0,1)")));
    }
    let f = |x: f64| cdf_forward(params, x).u;
    let mut lo = -1.0;
    let mut hi = 1.0;
    while f(lo) > u {
        lo *= 2.0;
        if lo < -1e8 {
            return Err(Error::Numeric("cdf_inverse: bracket expansion exceeded 1e8".into()));
        }
    }
    while f(hi) < u {
        hi *= 2.0;
        if hi > 1e8 {
            return Err(Error::Numeric("cdf_inverse: bracket expansion exceeded 1e8".into()));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let fm = f(mid);
        if (fm - u).abs() <= 1e-9 {
            return Ok(mid);
        }
        if fm < u {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-13 * (1.0 + mid.abs()) {
            return Ok(mid);
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Hypernetwork producing per-token flow parameters from marginal
/// embeddings. The output head is zero-initialized over a structured bias
/// (unit slopes, biases spread over [-2, 2], uniform mixture weights), so a
/// fresh flow is a well-behaved sigmoid mixture regardless of the input.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Hypernet {
    pub mlp: Mlp,
    pub flow: FlowConfig,
}

impl Hypernet {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        in_dim: usize,
        hidden: usize,
        flow: FlowConfig,
    ) -> Self {
        let out = flow.raw_param_count();
        let mut mlp = Mlp::new(store, rng, name, &[in_dim, hidden, out], true);
        // structured bias on the zero-initialized output layer
        let mut bias = Array2::zeros((1, out));
        let h = flow.hidden;
        let inv_softplus_one = (1f64.exp() - 1.0).ln(); // softplus(x) = 1
        for l in 0..flow.layers {
            let base = l * 3 * h;
            for k in 0..h {
                bias[[0, base + k]] = inv_softplus_one;
                bias[[0, base + h + k]] = if h == 1 {
                    0.0
                } else {
                    -2.0 + 4.0 * k as f64 / (h as f64 - 1.0)
                };
                // w logits stay at zero: uniform mixture
            }
        }
        let out_layer = mlp.layers.last_mut().expect("output layer");
        let b_idx = out_layer.b;
        store.data_mut(b_idx).copy_from_slice(bias.as_slice().expect("contiguous"));
        Hypernet { mlp, flow }
    }

    /// Raw (unconstrained) parameter rows for a batch of embeddings.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, z: NodeId) -> NodeId {
        self.mlp.forward(tape, store, z)
    }

    pub fn forward_plain(&self, store: &ParamStore, z: &Array2<f64>) -> Array2<f64> {
        self.mlp.forward_plain(store, z)
    }

    /// Constrained per-token parameters for one embedding row; errors on
    /// non-finite input.
    pub fn marginal_params(&self, store: &ParamStore, z: &[f64]) -> Result<DsfParams> {
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "hypernet input contains non-finite values: {:?}",
                z.iter().take(8).collect::<Vec<_>>()
            )));
        }
        let zm = Array2::from_shape_vec((1, z.len()), z.to_vec()).expect("row");
        let raw = self.forward_plain(store, &zm);
        Ok(DsfParams::from_raw(raw.row(0).as_slice().expect("contiguous"), &self.flow))
    }
}

/// Tape-side flow evaluation for a batch of tokens.
///
/// `raw`: N x raw_param_count hypernet output; `x`: N x 1 values.
/// Returns (u, log_density) nodes, both N x 1.
pub fn flow_forward(tape: &mut Tape, raw: NodeId, x: NodeId, cfg: &FlowConfig) -> (NodeId, NodeId) {
    let n = tape.value(x).nrows();
    let h = cfg.hidden;
    let ones = tape.constant(Array2::from_elem((n, h), 1.0));
    let mut state = x;
    let mut log_density: Option<NodeId> = None;
    let mut u = x;
    for l in 0..cfg.layers {
        let base = l * 3 * h;
        let a_raw = tape.slice_cols(raw, base, base + h);
        let a = tape.softplus(a_raw);
        let b = tape.slice_cols(raw, base + h, base + 2 * h);
        let w_logits = tape.slice_cols(raw, base + 2 * h, base + 3 * h);
        let w_log = tape.log_softmax_rows(w_logits);
        let w = tape.exp(w_log);

        let xh = tape.repeat_cols(state, h);
        let ax = tape.mul(a, xh);
        let pre = tape.add(ax, b);
        let s = tape.sigmoid(pre);
        let ws = tape.mul(w, s);
        let mix = tape.sum_rows(ws);

        let one_minus_s = tape.sub(ones, s);
        let wa = tape.mul(w, a);
        let was = tape.mul(wa, s);
        let deriv_terms = tape.mul(was, one_minus_s);
        let deriv = tape.sum_rows(deriv_terms);
        let log_deriv = tape.ln_clamped(deriv, DERIV_FLOOR);
        log_density = Some(match log_density {
            Some(ld) => tape.add(ld, log_deriv),
            None => log_deriv,
        });

        if l + 1 < cfg.layers {
            // logit transfer back to the real line, with its log-derivative
            let ln_m = tape.ln_clamped(mix, 1e-300);
            let one_n = tape.constant(Array2::from_elem((n, 1), 1.0));
            let one_minus_m = tape.sub(one_n, mix);
            let ln_1m = tape.ln_clamped(one_minus_m, 1e-300);
            state = tape.sub(ln_m, ln_1m);
            let neg_sum = tape.add(ln_m, ln_1m);
            let logit_deriv = tape.scale(neg_sum, -1.0);
            let ld = log_density.expect("accumulated");
            log_density = Some(tape.add(ld, logit_deriv));
        } else {
            u = mix;
        }
    }
    (u, log_density.expect("at least one layer"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng as _;

    fn random_params(r: &mut rng::Rng, cfg: &FlowConfig) -> DsfParams {
        let raw: Vec<f64> = (0..cfg.raw_param_count()).map(|_| r.random_range(-1.5..1.5)).collect();
        DsfParams::from_raw(&raw, cfg)
    }

    #[test]
    fn single_unit_flow_is_sigmoid() {
        let p = DsfParams::sigmoid_unit();
        let e = cdf_forward(&p, 0.0);
        assert!((e.u - 0.5).abs() < 1e-12);
        assert!((e.log_density.exp() - 0.25).abs() < 1e-12);
        let e1 = cdf_forward(&p, 1.0);
        assert!((e1.u - sigmoid(1.0)).abs() < 1e-12);
    }

    #[test]
    fn flow_is_strictly_increasing() {
        let cfg = FlowConfig::default();
        let mut r = rng::stream(5, &[]);
        for _ in 0..50 {
            let p = random_params(&mut r, &cfg);
            let mut prev = cdf_forward(&p, -30.0).u;
            for i in 1..=60 {
                let x = -30.0 + i as f64;
                let u = cdf_forward(&p, x).u;
                assert!(u > prev, "not increasing at x={x}");
                prev = u;
            }
        }
    }

    #[test]
    fn log_density_matches_finite_difference() {
        let cfg = FlowConfig::default();
        let mut r = rng::stream(6, &[]);
        for _ in 0..100 {
            let p = random_params(&mut r, &cfg);
            let x: f64 = r.random_range(-4.0..4.0);
            let h = 1e-4;
            let fd = (cdf_forward(&p, x + h).u - cdf_forward(&p, x - h).u) / (2.0 * h);
            let an = cdf_forward(&p, x).log_density.exp();
            assert!(
                (fd - an).abs() / fd.abs().max(1e-12) < 1e-3,
                "x={x}: fd={fd} analytic={an}"
            );
        }
    }

    #[test]
    fn inverse_of_half_for_sigmoid_is_zero() {
        let p = DsfParams::sigmoid_unit();
        let x = cdf_inverse(&p, 0.5).unwrap();
        assert!(x.abs() < 1e-8);
    }

    #[test]
    fn inverse_roundtrip_and_monotone() {
        let cfg = FlowConfig::default();
        let mut r = rng::stream(7, &[]);
        let p = random_params(&mut r, &cfg);
        let mut prev_x = f64::NEG_INFINITY;
        for i in 1..=1000 {
            let u = i as f64 / 1001.0;
            let x = cdf_inverse(&p, u).unwrap();
            assert!(x >= prev_x, "inverse not monotone at u={u}");
            prev_x = x;
            let back = cdf_forward(&p, x).u;
            assert!((back - u).abs() <= 1e-8, "roundtrip u={u}: {back}");
        }
    }

    #[test]
    fn default_initialized_flow_saturates_at_20() {
        let mut store = ParamStore::new(0);
        let mut r = rng::stream(8, &[]);
        let hn = Hypernet::new(&mut store, &mut r, "hn", 4, 8, FlowConfig::default());
        let p = hn.marginal_params(&store, &[0.3, -0.2, 0.5, 0.0]).unwrap();
        assert!(cdf_forward(&p, -20.0).u < 0.01);
        assert!(cdf_forward(&p, 20.0).u > 0.99);
    }

    #[test]
    fn density_mass_between_extreme_quantiles() {
        let cfg = FlowConfig::default();
        let mut r = rng::stream(9, &[]);
        for _ in 0..10 {
            let p = random_params(&mut r, &cfg);
            let lo = cdf_inverse(&p, 0.001).unwrap();
            let hi = cdf_inverse(&p, 0.999).unwrap();
            let n = 4000;
            let step = (hi - lo) / n as f64;
            let mut mass = 0.5 * (cdf_forward(&p, lo).log_density.exp() + cdf_forward(&p, hi).log_density.exp());
            for i in 1..n {
                mass += cdf_forward(&p, lo + i as f64 * step).log_density.exp();
            }
            mass *= step;
            assert!(mass >= 0.99, "mass {mass}");
            assert!(mass <= 1.001, "mass {mass}");
        }
    }

    #[test]
    fn hypernet_is_deterministic_and_constrained() {
        let mut store = ParamStore::new(0);
        let mut r = rng::stream(10, &[]);
        let hn = Hypernet::new(&mut store, &mut r, "hn", 6, 8, FlowConfig::default());
        let z = vec![0.1, -0.4, 0.2, 0.9, -1.0, 0.3];
        let p1 = hn.marginal_params(&store, &z).unwrap();
        let p2 = hn.marginal_params(&store, &z).unwrap();
        assert_eq!(p1, p2);
        for layer in &p1.layers {
            assert!(layer.slopes.iter().all(|&a| a > 0.0));
            let sum: f64 = layer.weights.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_embedding_zero_head_gives_uniform_mixture() {
        let mut store = ParamStore::new(0);
        let mut r = rng::stream(11, &[]);
        let hn = Hypernet::new(&mut store, &mut r, "hn", 4, 8, FlowConfig::default());
        let p = hn.marginal_params(&store, &[0.0; 4]).unwrap();
        for layer in &p.layers {
            for &w in &layer.weights {
                assert!((w - 1.0 / 8.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn hypernet_output_is_lipschitz_in_input() {
        let mut store = ParamStore::new(0);
        let mut r = rng::stream(12, &[]);
        let hn = Hypernet::new(&mut store, &mut r, "hn", 4, 8, FlowConfig::default());
        let z = vec![0.5, -0.3, 0.8, 0.1];
        let base = hn.forward_plain(&store, &Array2::from_shape_vec((1, 4), z.clone()).unwrap());
        for eps in [1e-3, 1e-4, 1e-5] {
            let mut zp = z.clone();
            zp[1] += eps;
            let pert = hn.forward_plain(&store, &Array2::from_shape_vec((1, 4), zp).unwrap());
            let max_change = (&pert - &base).iter().map(|d| d.abs()).fold(0.0, f64::max);
            assert!(max_change < 100.0 * eps, "eps={eps}: change {max_change}");
        }
    }

    #[test]
    fn hypernet_rejects_nan_input() {
        let mut store = ParamStore::new(0);
        let mut r = rng::stream(13, &[]);
        let hn = Hypernet::new(&mut store, &mut r, "hn", 4, 8, FlowConfig::default());
        assert!(hn.marginal_params(&store, &[0.0, f64::NAN, 0.0, 0.0]).is_err());
    }

    #[test]
    fn tape_flow_matches_plain_eval() {
        let cfg = FlowConfig::default();
        let mut r = rng::stream(14, &[]);
        let n = 16;
        let raw = Array2::from_shape_fn((n, cfg.raw_param_count()), |_| r.random_range(-1.5..1.5));
        let x = Array2::from_shape_fn((n, 1), |_| r.random_range(-3.0..3.0));
        let mut tape = Tape::new();
        let raw_n = tape.constant(raw.clone());
        let x_n = tape.constant(x.clone());
        let (u_n, ld_n) = flow_forward(&mut tape, raw_n, x_n, &cfg);
        for i in 0..n {
            let p = DsfParams::from_raw(raw.row(i).as_slice().unwrap(), &cfg);
            let e = cdf_forward(&p, x[[i, 0]]);
            assert!((tape.value(u_n)[[i, 0]] - e.u).abs() < 1e-12);
            assert!((tape.value(ld_n)[[i, 0]] - e.log_density).abs() < 1e-10);
        }
    }

    #[test]
    fn flow_gradient_matches_finite_difference_through_hypernet() {
        // Stage-1-style loss: mean negative log density of random values,
        // with flow params from the hypernet. Probes 10 parameters.
        let cfg = FlowConfig { layers: 2, hidden: 4 };
        let mut r = rng::stream(15, &[]);
        let mut store = ParamStore::new(0);
        let hn = Hypernet::new(&mut store, &mut r, "hn", 3, 6, cfg);
        let z = Array2::from_shape_fn((8, 3), |_| r.random_range(-1.0..1.0));
        let x = Array2::from_shape_fn((8, 1), |_| r.random_range(-2.0..2.0));

        let loss_of = |store: &ParamStore| -> (f64, Option<crate::tape::Grads>) {
            let mut tape = Tape::new();
            let z_n = tape.constant(z.clone());
            let x_n = tape.constant(x.clone());
            let raw = hn.forward(&mut tape, store, z_n);
            let (_, ld) = flow_forward(&mut tape, raw, x_n, &cfg);
            let neg = tape.scale(ld, -1.0);
            let loss = tape.mean_all(neg);
            let grads = tape.backward(loss);
            (tape.scalar(loss), Some(grads))
        };
        let (_, grads) = loss_of(&store);
        let grads = grads.unwrap();

        let mut probes = 0;
        'outer: for idx in 0..store.len() {
            let g = match grads.get((0, idx as u32)) {
                Some(g) => g.clone(),
                None => continue,
            };
            let cols = store.param(idx).cols;
            for k in (0..store.param(idx).data.len()).step_by(7) {
                let eps = 1e-6;
                let orig = store.param(idx).data[k];
                let mut s2 = store.clone();
                s2.data_mut(idx)[k] = orig + eps;
                let (lp, _) = loss_of(&s2);
                s2.data_mut(idx)[k] = orig - eps;
                let (lm, _) = loss_of(&s2);
                let fd = (lp - lm) / (2.0 * eps);
                let an = g[[k / cols, k % cols]];
                let denom = fd.abs().max(an.abs()).max(1e-6);
                assert!((fd - an).abs() / denom < 1e-3, "param {idx}[{k}]: fd={fd} an={an}");
                probes += 1;
                if probes >= 10 {
                    break 'outer;
                }
            }
        }
        assert!(probes >= 10);
    }
}
