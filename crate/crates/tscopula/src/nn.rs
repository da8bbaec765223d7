//! Parameter stores, layers, and the Adam optimizer.
//!
//! Parameters live in flat [`ParamStore`]s (one per parameter group). Layers
//! only remember indices into their store, so rebuilding a model from a
//! config yields the same layout and checkpoints are just store snapshots.

use ndarray::Array2;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng::Rng;
use crate::tape::{Grads, NodeId, Tape};

/// A named parameter matrix.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Param {
    pub fn matrix(&self) -> Array2<f64> {
        Array2::from_shape_vec((self.rows, self.cols), self.data.clone()).expect("param shape")
    }
}

/// A flat, ordered collection of parameters forming one trainable group.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamStore {
    pub group: u32,
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new(group: u32) -> Self {
        ParamStore { group, params: Vec::new() }
    }

    pub fn add(&mut self, name: &str, value: Array2<f64>) -> usize {
        let (rows, cols) = value.dim();
        self.params.push(Param {
            name: name.to_string(),
            rows,
            cols,
            data: value.into_raw_vec_and_offset().0,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar parameter count.
    pub fn n_scalars(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn value(&self, idx: usize) -> Array2<f64> {
        self.params[idx].matrix()
    }

    pub fn param(&self, idx: usize) -> &Param {
        &self.params[idx]
    }

    pub fn data_mut(&mut self, idx: usize) -> &mut [f64] {
        &mut self.params[idx].data
    }

    /// Registers parameter `idx` as a leaf on the tape.
    pub fn node(&self, tape: &mut Tape, idx: usize) -> NodeId {
        tape.param((self.group, idx as u32), self.value(idx))
    }

    /// Canonical little-endian byte image of all parameters, in order.
    /// Used to verify that a frozen group is bit-identical across training.
    pub fn byte_image(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.n_scalars() * 8);
        for p in &self.params {
            for v in &p.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }
}

/// Xavier-uniform initialized matrix.
pub fn xavier(rng: &mut Rng, rows: usize, cols: usize) -> Array2<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
}

/// Small-normal initialized matrix (embeddings).
pub fn embedding_init(rng: &mut Rng, rows: usize, cols: usize) -> Array2<f64> {
    let normal = rand_distr::Normal::new(0.0, 0.02).expect("normal");
    Array2::from_shape_fn((rows, cols), |_| rand_distr::Distribution::sample(&normal, rng))
}

/// Dense layer `x @ W + b`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let w = store.add(&format!("{name}.w"), xavier(rng, in_dim, out_dim));
        let b = store.add(&format!("{name}.b"), Array2::zeros((1, out_dim)));
        Linear { w, b, in_dim, out_dim }
    }

    /// Zero-initialized weights and bias (used for output heads that must
    /// start at a uniform distribution).
    pub fn zeros(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let w = store.add(&format!("{name}.w"), Array2::zeros((in_dim, out_dim)));
        let b = store.add(&format!("{name}.b"), Array2::zeros((1, out_dim)));
        Linear { w, b, in_dim, out_dim }
    }

    /// Zero weights with an explicit bias row.
    pub fn with_bias(store: &mut ParamStore, name: &str, in_dim: usize, bias: Array2<f64>) -> Self {
        let out_dim = bias.ncols();
        let w = store.add(&format!("{name}.w"), Array2::zeros((in_dim, out_dim)));
        let b = store.add(&format!("{name}.b"), bias);
        Linear { w, b, in_dim, out_dim }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> NodeId {
        let w = store.node(tape, self.w);
        let b = store.node(tape, self.b);
        let h = tape.matmul(x, w);
        tape.add_row_vec(h, b)
    }

    /// Plain (non-tape) forward for sampling paths.
    pub fn forward_plain(&self, store: &ParamStore, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&store.value(self.w)) + &store.value(self.b)
    }
}

/// Row-wise layer normalization with learned gain and shift.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gamma: usize,
    pub beta: usize,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(&format!("{name}.gamma"), Array2::from_elem((1, dim), 1.0));
        let beta = store.add(&format!("{name}.beta"), Array2::zeros((1, dim)));
        LayerNorm { gamma, beta, dim }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> NodeId {
        let g = store.node(tape, self.gamma);
        let b = store.node(tape, self.beta);
        tape.layer_norm_rows(x, g, b, 1e-5)
    }
}

/// Multi-layer perceptron with ReLU activations between layers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims` = [in, hidden..., out]. The output layer is zero-initialized
    /// when `zero_output` is set.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        dims: &[usize],
        zero_output: bool,
    ) -> Self {
        assert!(dims.len() >= 2, "mlp needs at least in/out dims");
        let mut layers = Vec::new();
        for i in 0..dims.len() - 1 {
            let last = i == dims.len() - 2;
            let lname = format!("{name}.{i}");
            let layer = if last && zero_output {
                Linear::zeros(store, &lname, dims[i], dims[i + 1])
            } else {
                Linear::new(store, rng, &lname, dims[i], dims[i + 1])
            };
            layers.push(layer);
        }
        Mlp { layers }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> NodeId {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, store, h);
            if i + 1 < self.layers.len() {
                h = tape.relu(h);
            }
        }
        h
    }

    pub fn forward_plain(&self, store: &ParamStore, x: &Array2<f64>) -> Array2<f64> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward_plain(store, &h);
            if i + 1 < self.layers.len() {
                h.mapv_inplace(|v| v.max(0.0));
            }
        }
        h
    }
}

/// Per-stage optimizer settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Default::default() }
    }
}

/// Adam over a single parameter store. Weight decay is added to the raw
/// gradient (L2 style). Parameters that received no gradient are untouched.
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: AdamConfig) -> Self {
        let m = (0..store.len()).map(|i| Array2::zeros((store.param(i).rows, store.param(i).cols))).collect();
        let v = (0..store.len()).map(|i| Array2::zeros((store.param(i).rows, store.param(i).cols))).collect();
        Adam { cfg, m, v, t: 0 }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads) {
        self.t += 1;
        let b1t = 1.0 - self.cfg.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.cfg.beta2.powi(self.t as i32);
        for idx in 0..store.len() {
            let Some(g) = grads.get((store.group, idx as u32)) else { continue };
            let wd = self.cfg.weight_decay;
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let data = store.data_mut(idx);
            for (k, gv) in g.iter().enumerate() {
                let grad = gv + wd * data[k];
                let mk = m.as_slice_mut().expect("contiguous");
                let vk = v.as_slice_mut().expect("contiguous");
                mk[k] = self.cfg.beta1 * mk[k] + (1.0 - self.cfg.beta1) * grad;
                vk[k] = self.cfg.beta2 * vk[k] + (1.0 - self.cfg.beta2) * grad * grad;
                let mhat = mk[k] / b1t;
                let vhat = vk[k] / b2t;
                data[k] -= self.cfg.lr * mhat / (vhat.sqrt() + self.cfg.eps);
            }
        }
    }
}

/// Clips all gradients in place to a maximum global L2 norm.
/// Returns the pre-clip norm.
pub fn clip_grad_norm(grads: &mut Grads, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale_all(max_norm / norm);
    }
    norm
}
