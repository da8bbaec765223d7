//! Reverse-mode automatic differentiation over `f64` matrices.
//!
//! A [`Tape`] records a computation graph of matrix operations during the
//! forward pass and replays it in reverse to accumulate gradients. Leaves
//! are either constants or parameters identified by a `(group, index)` key,
//! which keeps the two parameter groups of the model (marginal path and
//! copula path) disjoint by construction: a group that never appears in the
//! graph receives exactly zero gradient.
//!
//! The tape also keeps an analytic FLOP count of the forward pass
//! (2*m*k*n per mxk by kxn matrix product, small constants per elementwise
//! op), which feeds the training FLOP ledger. Backward cost is accounted as
//! twice the forward cost of the same pass.

use std::collections::HashMap;

use ndarray::{s, Array2, Axis};

pub type NodeId = usize;

/// Parameter key: (parameter group, index within the group's store).
pub type ParamKey = (u32, u32);

/// One attention block: a query row range attending to a key/value row range.
///
/// With `causal_free = Some(f)`, block-local query `i` attends only to
/// block-local keys `0..f + i` (its first `f` keys unconditionally, then a
/// strictly-before prefix). `None` means full bidirectional attention.
#[derive(Debug, Clone)]
pub struct AttnBlock {
    pub q0: usize,
    pub q1: usize,
    pub k0: usize,
    pub k1: usize,
    pub causal_free: Option<usize>,
}

impl AttnBlock {
    pub fn full(q0: usize, q1: usize, k0: usize, k1: usize) -> Self {
        AttnBlock { q0, q1, k0, k1, causal_free: None }
    }

    pub fn causal(q0: usize, q1: usize, k0: usize, k1: usize, free: usize) -> Self {
        AttnBlock { q0, q1, k0, k1, causal_free: Some(free) }
    }
}

enum Op {
    Constant,
    Param(ParamKey),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    AddRowVec(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Sigmoid(NodeId),
    Softplus(NodeId),
    Exp(NodeId),
    LnClamped(NodeId, f64),
    Relu(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    SumRows(NodeId),
    RepeatCols(NodeId),
    LogSoftmaxRows(NodeId),
    ConcatCols(NodeId, NodeId),
    ConcatRows(Vec<NodeId>),
    SliceCols(NodeId, usize, usize),
    SelectRows(NodeId, Vec<usize>),
    RowPick(NodeId, Vec<usize>),
    LayerNormRows { x: NodeId, gamma: NodeId, beta: NodeId, eps: f64 },
    Attention { q: NodeId, k: NodeId, v: NodeId, scale: f64, blocks: Vec<AttnBlock>, probs: Vec<Array2<f64>> },
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Gradients keyed by parameter `(group, index)`.
#[derive(Debug, Default)]
pub struct Grads {
    map: HashMap<ParamKey, Array2<f64>>,
}

impl Grads {
    pub fn get(&self, key: ParamKey) -> Option<&Array2<f64>> {
        self.map.get(&key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamKey, &Array2<f64>)> {
        self.map.iter()
    }

    fn accumulate(&mut self, key: ParamKey, grad: &Array2<f64>) {
        self.map
            .entry(key)
            .and_modify(|g| *g += grad)
            .or_insert_with(|| grad.clone());
    }

    /// Global L2 norm over all stored gradients.
    pub fn global_norm(&self) -> f64 {
        self.map
            .values()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Scales every gradient in place.
    pub fn scale_all(&mut self, c: f64) {
        for g in self.map.values_mut() {
            g.mapv_inplace(|v| v * c);
        }
    }

    /// Maximum absolute entry across all gradients (NaN-safe: returns NaN if any).
    pub fn max_abs(&self) -> f64 {
        let mut m = 0.0f64;
        for g in self.map.values() {
            for &v in g.iter() {
                if v.is_nan() {
                    return f64::NAN;
                }
                m = m.max(v.abs());
            }
        }
        m
    }
}

/// Counters for numerical edge cases hit during a forward pass.
#[derive(Debug, Default, Clone, Copy)]
pub struct TapeDiagnostics {
    /// Entries clamped by `ln_clamped` (log-density underflow).
    pub log_floor_hits: u64,
}

pub struct Tape {
    nodes: Vec<Node>,
    flops: u64,
    pub diagnostics: TapeDiagnostics,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), flops: 0, diagnostics: TapeDiagnostics::default() }
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id].value
    }

    /// Value of a 1x1 node as a scalar.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = &self.nodes[id].value;
        assert_eq!(v.dim(), (1, 1), "scalar() on non-1x1 node");
        v[[0, 0]]
    }

    /// Analytic FLOP count of the forward pass so far.
    pub fn forward_flops(&self) -> u64 {
        self.flops
    }

    fn push(&mut self, value: Array2<f64>, op: Op, flops: u64) -> NodeId {
        self.flops += flops;
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn constant(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Constant, 0)
    }

    pub fn scalar_constant(&mut self, value: f64) -> NodeId {
        self.constant(Array2::from_elem((1, 1), value))
    }

    /// Registers a parameter leaf. Gradients accumulate under `key`.
    pub fn param(&mut self, key: ParamKey, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Param(key), 0)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value + &self.nodes[b].value;
        let n = v.len() as u64;
        self.push(v, Op::Add(a, b), n)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value - &self.nodes[b].value;
        let n = v.len() as u64;
        self.push(v, Op::Sub(a, b), n)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value * &self.nodes[b].value;
        let n = v.len() as u64;
        self.push(v, Op::Mul(a, b), n)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| x * c);
        let n = v.len() as u64;
        self.push(v, Op::Scale(a, c), n)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| x + c);
        let n = v.len() as u64;
        self.push(v, Op::AddScalar(a), n)
    }

    /// `a + v` where `v` is a 1xW row vector broadcast over the rows of `a`.
    pub fn add_row_vec(&mut self, a: NodeId, v: NodeId) -> NodeId {
        let (av, vv) = (&self.nodes[a].value, &self.nodes[v].value);
        assert_eq!(vv.nrows(), 1, "add_row_vec expects 1xW vector");
        assert_eq!(av.ncols(), vv.ncols(), "add_row_vec width mismatch");
        let out = av + vv;
        let n = out.len() as u64;
        self.push(out, Op::AddRowVec(a, v), n)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(av.ncols(), bv.nrows(), "matmul inner dim mismatch");
        let out = av.dot(bv);
        let flops = 2 * av.nrows() as u64 * av.ncols() as u64 * bv.ncols() as u64;
        self.push(out, Op::MatMul(a, b), flops)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(sigmoid);
        let n = 4 * v.len() as u64;
        self.push(v, Op::Sigmoid(a), n)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(softplus);
        let n = 4 * v.len() as u64;
        self.push(v, Op::Softplus(a), n)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(f64::exp);
        let n = 4 * v.len() as u64;
        self.push(v, Op::Exp(a), n)
    }

    /// `ln(max(x, floor))`; clamped entries get zero gradient and are counted
    /// in the tape diagnostics.
    pub fn ln_clamped(&mut self, a: NodeId, floor: f64) -> NodeId {
        let mut hits = 0u64;
        let v = self.nodes[a].value.mapv(|x| {
            if x < floor {
                hits += 1;
                floor.ln()
            } else {
                x.ln()
            }
        });
        self.diagnostics.log_floor_hits += hits;
        let n = 4 * v.len() as u64;
        self.push(v, Op::LnClamped(a, floor), n)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| x.max(0.0));
        let n = v.len() as u64;
        self.push(v, Op::Relu(a), n)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.nodes[a].value.sum();
        let n = self.nodes[a].value.len() as u64;
        self.push(Array2::from_elem((1, 1), s), Op::SumAll(a), n)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let v = &self.nodes[a].value;
        let m = v.sum() / v.len() as f64;
        let n = v.len() as u64;
        self.push(Array2::from_elem((1, 1), m), Op::MeanAll(a), n)
    }

    /// Row-wise sum: NxH -> Nx1.
    pub fn sum_rows(&mut self, a: NodeId) -> NodeId {
        let v = &self.nodes[a].value;
        let sums = v.sum_axis(Axis(1)).insert_axis(Axis(1));
        let n = v.len() as u64;
        self.push(sums, Op::SumRows(a), n)
    }

    /// Nx1 -> NxH by repetition.
    pub fn repeat_cols(&mut self, a: NodeId, h: usize) -> NodeId {
        let v = &self.nodes[a].value;
        assert_eq!(v.ncols(), 1, "repeat_cols expects Nx1");
        let mut out = Array2::zeros((v.nrows(), h));
        for (i, row) in out.rows_mut().into_iter().enumerate() {
            let x = v[[i, 0]];
            for e in row {
                *e = x;
            }
        }
        self.push(out, Op::RepeatCols(a), 0)
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> NodeId {
        let v = &self.nodes[a].value;
        let mut out = v.clone();
        for mut row in out.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
            row.mapv_inplace(|x| x - lse);
        }
        let n = 5 * v.len() as u64;
        self.push(out, Op::LogSoftmaxRows(a), n)
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(av.nrows(), bv.nrows(), "concat_cols row mismatch");
        let out = ndarray::concatenate(Axis(1), &[av.view(), bv.view()]).expect("concat_cols");
        self.push(out, Op::ConcatCols(a, b), 0)
    }

    pub fn concat_rows(&mut self, parts: Vec<NodeId>) -> NodeId {
        assert!(!parts.is_empty(), "concat_rows needs at least one part");
        let views: Vec<_> = parts.iter().map(|&p| self.nodes[p].value.view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("concat_rows");
        self.push(out, Op::ConcatRows(parts), 0)
    }

    pub fn slice_cols(&mut self, a: NodeId, from: usize, to: usize) -> NodeId {
        let v = &self.nodes[a].value;
        assert!(from <= to && to <= v.ncols(), "slice_cols out of range");
        let out = v.slice(s![.., from..to]).to_owned();
        self.push(out, Op::SliceCols(a, from, to), 0)
    }

    pub fn select_rows(&mut self, a: NodeId, indices: Vec<usize>) -> NodeId {
        let v = &self.nodes[a].value;
        let mut out = Array2::zeros((indices.len(), v.ncols()));
        for (r, &i) in indices.iter().enumerate() {
            out.row_mut(r).assign(&v.row(i));
        }
        self.push(out, Op::SelectRows(a, indices), 0)
    }

    /// Picks one column per row: NxB with `cols[i] < B` -> Nx1.
    pub fn row_pick(&mut self, a: NodeId, cols: Vec<usize>) -> NodeId {
        let v = &self.nodes[a].value;
        assert_eq!(cols.len(), v.nrows(), "row_pick index count mismatch");
        let mut out = Array2::zeros((cols.len(), 1));
        for (r, &c) in cols.iter().enumerate() {
            out[[r, 0]] = v[[r, c]];
        }
        self.push(out, Op::RowPick(a, cols), 0)
    }

    /// Row-wise layer normalization with learned gain/shift (1xW each).
    pub fn layer_norm_rows(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        let xv = &self.nodes[x].value;
        let g = &self.nodes[gamma].value;
        let b = &self.nodes[beta].value;
        assert_eq!(g.nrows(), 1);
        assert_eq!(b.nrows(), 1);
        assert_eq!(g.ncols(), xv.ncols());
        let w = xv.ncols() as f64;
        let mut out = Array2::zeros(xv.dim());
        for (i, row) in xv.rows().into_iter().enumerate() {
            let mean = row.sum() / w;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w;
            let inv = 1.0 / (var + eps).sqrt();
            for (j, v) in row.iter().enumerate() {
                out[[i, j]] = (v - mean) * inv * g[[0, j]] + b[[0, j]];
            }
        }
        let n = 8 * xv.len() as u64;
        self.push(out, Op::LayerNormRows { x, gamma, beta, eps }, n)
    }

    /// Fused block-wise softmax attention.
    ///
    /// `q`, `k`, `v` are full stacked matrices (rows = tokens); each block
    /// selects a query row range attending to a key/value row range, with an
    /// optional causal prefix rule. Queries of a block with zero visible keys
    /// produce an all-zero output row.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, scale: f64, blocks: Vec<AttnBlock>) -> NodeId {
        let qv = &self.nodes[q].value;
        let kv = &self.nodes[k].value;
        let vv = &self.nodes[v].value;
        assert_eq!(qv.ncols(), kv.ncols(), "attention q/k width mismatch");
        let dk = qv.ncols();
        let dv = vv.ncols();
        let mut out = Array2::zeros((qv.nrows(), dv));
        let mut probs = Vec::with_capacity(blocks.len());
        let mut flops = 0u64;
        for blk in &blocks {
            let nq = blk.q1 - blk.q0;
            let nk = blk.k1 - blk.k0;
            let mut p = Array2::zeros((nq, nk));
            if nk > 0 {
                let qb = qv.slice(s![blk.q0..blk.q1, ..]);
                let kb = kv.slice(s![blk.k0..blk.k1, ..]);
                let vb = vv.slice(s![blk.k0..blk.k1, ..]);
                let mut scores = qb.dot(&kb.t());
                scores.mapv_inplace(|x| x * scale);
                for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
                    let visible = match blk.causal_free {
                        Some(free) => (free + i).min(nk),
                        None => nk,
                    };
                    if visible == 0 {
                        continue;
                    }
                    let max = row.iter().take(visible).cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut denom = 0.0;
                    for j in 0..visible {
                        let e = (row[j] - max).exp();
                        row[j] = e;
                        denom += e;
                    }
                    for j in 0..visible {
                        p[[i, j]] = row[j] / denom;
                    }
                }
                let ctx = p.dot(&vb);
                out.slice_mut(s![blk.q0..blk.q1, ..]).assign(&ctx);
                flops += 2 * nq as u64 * nk as u64 * dk as u64
                    + 5 * nq as u64 * nk as u64
                    + 2 * nq as u64 * nk as u64 * dv as u64;
            }
            probs.push(p);
        }
        self.push(out, Op::Attention { q, k, v, scale, blocks, probs }, flops)
    }

    /// Runs the backward pass from a 1x1 loss node.
    pub fn backward(&self, loss: NodeId) -> Grads {
        assert_eq!(self.nodes[loss].value.dim(), (1, 1), "backward expects scalar loss");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(Array2::from_elem((1, 1), 1.0));
        let mut out = Grads::default();

        for id in (0..=loss).rev() {
            let Some(dy) = grads[id].take() else { continue };
            match &self.nodes[id].op {
                Op::Constant => {}
                Op::Param(key) => out.accumulate(*key, &dy),
                Op::Add(a, b) => {
                    acc(&mut grads, *a, dy.clone());
                    acc(&mut grads, *b, dy);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, dy.clone());
                    acc(&mut grads, *b, -dy);
                }
                Op::Mul(a, b) => {
                    let da = &dy * &self.nodes[*b].value;
                    let db = &dy * &self.nodes[*a].value;
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Scale(a, c) => acc(&mut grads, *a, dy.mapv(|x| x * c)),
                Op::AddScalar(a) => acc(&mut grads, *a, dy),
                Op::AddRowVec(a, v) => {
                    let dv = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *a, dy);
                    acc(&mut grads, *v, dv);
                }
                Op::MatMul(a, b) => {
                    let da = dy.dot(&self.nodes[*b].value.t());
                    let db = self.nodes[*a].value.t().dot(&dy);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Sigmoid(a) => {
                    let y = &self.nodes[id].value;
                    acc(&mut grads, *a, &dy * &(y * &y.mapv(|v| 1.0 - v)));
                }
                Op::Softplus(a) => {
                    let x = &self.nodes[*a].value;
                    acc(&mut grads, *a, &dy * &x.mapv(sigmoid));
                }
                Op::Exp(a) => {
                    let y = &self.nodes[id].value;
                    acc(&mut grads, *a, &dy * y);
                }
                Op::LnClamped(a, floor) => {
                    let x = &self.nodes[*a].value;
                    let dx = ndarray::Zip::from(&dy).and(x).map_collect(|&g, &xv| {
                        if xv < *floor {
                            0.0
                        } else {
                            g / xv
                        }
                    });
                    acc(&mut grads, *a, dx);
                }
                Op::Relu(a) => {
                    let x = &self.nodes[*a].value;
                    let dx = ndarray::Zip::from(&dy).and(x).map_collect(|&g, &xv| if xv > 0.0 { g } else { 0.0 });
                    acc(&mut grads, *a, dx);
                }
                Op::SumAll(a) => {
                    let g = dy[[0, 0]];
                    acc(&mut grads, *a, Array2::from_elem(self.nodes[*a].value.dim(), g));
                }
                Op::MeanAll(a) => {
                    let n = self.nodes[*a].value.len() as f64;
                    let g = dy[[0, 0]] / n;
                    acc(&mut grads, *a, Array2::from_elem(self.nodes[*a].value.dim(), g));
                }
                Op::SumRows(a) => {
                    let dim = self.nodes[*a].value.dim();
                    let mut dx = Array2::zeros(dim);
                    for i in 0..dim.0 {
                        let g = dy[[i, 0]];
                        dx.row_mut(i).fill(g);
                    }
                    acc(&mut grads, *a, dx);
                }
                Op::RepeatCols(a) => {
                    let dx = dy.sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(&mut grads, *a, dx);
                }
                Op::LogSoftmaxRows(a) => {
                    let y = &self.nodes[id].value;
                    let mut dx = dy.clone();
                    for (i, mut row) in dx.rows_mut().into_iter().enumerate() {
                        let gsum: f64 = dy.row(i).sum();
                        for (j, e) in row.iter_mut().enumerate() {
                            *e -= y[[i, j]].exp() * gsum;
                        }
                    }
                    acc(&mut grads, *a, dx);
                }
                Op::ConcatCols(a, b) => {
                    let wa = self.nodes[*a].value.ncols();
                    acc(&mut grads, *a, dy.slice(s![.., ..wa]).to_owned());
                    acc(&mut grads, *b, dy.slice(s![.., wa..]).to_owned());
                }
                Op::ConcatRows(parts) => {
                    let mut r = 0;
                    for &p in parts {
                        let rows = self.nodes[p].value.nrows();
                        acc(&mut grads, p, dy.slice(s![r..r + rows, ..]).to_owned());
                        r += rows;
                    }
                }
                Op::SliceCols(a, from, to) => {
                    let dim = self.nodes[*a].value.dim();
                    let mut dx = Array2::zeros(dim);
                    dx.slice_mut(s![.., *from..*to]).assign(&dy);
                    acc(&mut grads, *a, dx);
                }
                Op::SelectRows(a, indices) => {
                    let dim = self.nodes[*a].value.dim();
                    let mut dx = Array2::zeros(dim);
                    for (r, &i) in indices.iter().enumerate() {
                        let mut target = dx.row_mut(i);
                        target += &dy.row(r);
                    }
                    acc(&mut grads, *a, dx);
                }
                Op::RowPick(a, cols) => {
                    let dim = self.nodes[*a].value.dim();
                    let mut dx = Array2::zeros(dim);
                    for (r, &c) in cols.iter().enumerate() {
                        dx[[r, c]] += dy[[r, 0]];
                    }
                    acc(&mut grads, *a, dx);
                }
                Op::LayerNormRows { x, gamma, beta, eps } => {
                    let xv = &self.nodes[*x].value;
                    let g = &self.nodes[*gamma].value;
                    let w = xv.ncols() as f64;
                    let mut dx = Array2::zeros(xv.dim());
                    let mut dgamma = Array2::zeros((1, xv.ncols()));
                    let mut dbeta = Array2::zeros((1, xv.ncols()));
                    for (i, row) in xv.rows().into_iter().enumerate() {
                        let mean = row.sum() / w;
                        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w;
                        let inv = 1.0 / (var + eps).sqrt();
                        // xhat, dxhat, and the two row means needed for dx
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        let mut xhat = vec![0.0; xv.ncols()];
                        let mut dxh = vec![0.0; xv.ncols()];
                        for j in 0..xv.ncols() {
                            xhat[j] = (row[j] - mean) * inv;
                            dxh[j] = dy[[i, j]] * g[[0, j]];
                            m1 += dxh[j];
                            m2 += dxh[j] * xhat[j];
                            dgamma[[0, j]] += dy[[i, j]] * xhat[j];
                            dbeta[[0, j]] += dy[[i, j]];
                        }
                        m1 /= w;
                        m2 /= w;
                        for j in 0..xv.ncols() {
                            dx[[i, j]] = inv * (dxh[j] - m1 - xhat[j] * m2);
                        }
                    }
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *gamma, dgamma);
                    acc(&mut grads, *beta, dbeta);
                }
                Op::Attention { q, k, v, scale, blocks, probs } => {
                    let qv = &self.nodes[*q].value;
                    let kv = &self.nodes[*k].value;
                    let vv = &self.nodes[*v].value;
                    let mut dq = Array2::zeros(qv.dim());
                    let mut dkm = Array2::zeros(kv.dim());
                    let mut dvm = Array2::zeros(vv.dim());
                    for (blk, p) in blocks.iter().zip(probs) {
                        let nk = blk.k1 - blk.k0;
                        if nk == 0 {
                            continue;
                        }
                        let dout = dy.slice(s![blk.q0..blk.q1, ..]);
                        let qb = qv.slice(s![blk.q0..blk.q1, ..]);
                        let kb = kv.slice(s![blk.k0..blk.k1, ..]);
                        let vb = vv.slice(s![blk.k0..blk.k1, ..]);
                        // dV += P^T dOut
                        let dv_blk = p.t().dot(&dout);
                        let mut tgt = dvm.slice_mut(s![blk.k0..blk.k1, ..]);
                        tgt += &dv_blk;
                        // dP = dOut V^T ; dS = P ⊙ (dP − rowsum(dP ⊙ P))
                        let dp = dout.dot(&vb.t());
                        let mut ds = Array2::zeros(p.dim());
                        for i in 0..p.nrows() {
                            let rowdot: f64 = (0..nk).map(|j| dp[[i, j]] * p[[i, j]]).sum();
                            for j in 0..nk {
                                ds[[i, j]] = p[[i, j]] * (dp[[i, j]] - rowdot);
                            }
                        }
                        ds.mapv_inplace(|x| x * scale);
                        let dq_blk = ds.dot(&kb);
                        let mut tgt = dq.slice_mut(s![blk.q0..blk.q1, ..]);
                        tgt += &dq_blk;
                        let dk_blk = ds.t().dot(&qb);
                        let mut tgt = dkm.slice_mut(s![blk.k0..blk.k1, ..]);
                        tgt += &dk_blk;
                    }
                    acc(&mut grads, *q, dq);
                    acc(&mut grads, *k, dkm);
                    acc(&mut grads, *v, dvm);
                }
            }
        }
        out
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn acc(grads: &mut [Option<Array2<f64>>], id: NodeId, g: Array2<f64>) {
    match &mut grads[id] {
        Some(existing) => *existing += &g,
        slot => *slot = Some(g),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}
