//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters are
//! read from a borrowed [`ParamStore`]; only trainable parameters (and nodes
//! that depend on them) carry gradients, so frozen base weights cost nothing
//! on the backward pass.

use std::collections::HashMap;

use ndarray::{s, Axis};

use super::params::{Mat, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    GatherRows {
        src: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    ReverseRows(Var),
    MeanPoolRows {
        x: Var,
        stride: usize,
    },
    Reshape(Var),
    Scan {
        u: Var,
        decay: Var,
        reverse: bool,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Mat,
    },
    Bce {
        probs: Var,
        targets: Vec<f64>,
        eps: f64,
    },
    Mean(Var),
}

struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

/// Parameter gradients produced by [`Tape::backward`].
#[derive(Debug, Default, Clone)]
pub struct Grads {
    map: HashMap<ParamId, Mat>,
}

impl Grads {
    pub fn get(&self, id: ParamId) -> Option<&Mat> {
        self.map.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Mat)> {
        self.map.iter()
    }

    pub fn accumulate(&mut self, other: Grads, weight: f64) {
        for (id, g) in other.map {
            match self.map.get_mut(&id) {
                Some(acc) => acc.scaled_add(weight, &g),
                None => {
                    self.map.insert(id, g * weight);
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.map.values_mut() {
            *g *= factor;
        }
    }

    /// Global L2 norm over every gradient tensor.
    pub fn norm(&self) -> f64 {
        self.iter().map(|(_, g)| g.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.map.values().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    fn push(&mut self, value: Mat, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: self.params.get(id).clone(),
            op: Op::Param(id),
            requires_grad: self.params.is_trainable(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        self.push(value, Op::MatMulT(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b), &[a, b])
    }

    /// Adds a `1 × n` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let value = self.value(x) + self.value(row);
        self.push(value, Op::AddRow(x, row), &[x, row])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x) * factor;
        self.push(value, Op::Scale(x, factor), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(f64::tanh);
        self.push(value, Op::Tanh(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(sigmoid);
        self.push(value, Op::Sigmoid(x), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self
            .value(x)
            .mapv(|v| 0.5 * v * (1.0 + (GELU_K * (v + GELU_C * v * v * v)).tanh()));
        self.push(value, Op::Gelu(x), &[x])
    }

    /// Row-wise layer normalization with learned `1 × n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        const EPS: f64 = 1e-5;
        let xv = self.value(x);
        let n = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * inv);
            inv_std.push(inv);
        }
        let value = &xhat * self.value(gamma) + self.value(beta);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    /// Row-wise softmax. With `causal`, row `i` only covers columns `0..=i`;
    /// masked entries are exactly zero.
    pub fn softmax(&mut self, x: Var, causal: bool) -> Var {
        let mut value = self.value(x).clone();
        for (i, mut row) in value.rows_mut().into_iter().enumerate() {
            let limit = if causal { (i + 1).min(row.len()) } else { row.len() };
            let max = row
                .iter()
                .take(limit)
                .fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let mut total = 0.0;
            for (j, v) in row.iter_mut().enumerate() {
                if j < limit {
                    *v = (*v - max).exp();
                    total += *v;
                } else {
                    *v = 0.0;
                }
            }
            row.mapv_inplace(|v| v / total);
        }
        self.push(value, Op::Softmax(x), &[x])
    }

    pub fn gather_rows(&mut self, src: Var, ids: &[usize]) -> Var {
        let sv = self.value(src);
        let mut value = Mat::zeros((ids.len(), sv.ncols()));
        for (r, &id) in ids.iter().enumerate() {
            value.row_mut(r).assign(&sv.row(id));
        }
        self.push(
            value,
            Op::GatherRows {
                src,
                ids: ids.to_vec(),
            },
            &[src],
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let ids: Vec<usize> = (start..start + len).collect();
        self.gather_rows(x, &ids)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let value = self.value(x).slice(s![.., start..start + len]).to_owned();
        self.push(value, Op::SliceCols { x, start }, &[x])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("column counts agree");
        self.push(value, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("row counts agree");
        self.push(value, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn reverse_rows(&mut self, x: Var) -> Var {
        let value = self.value(x).slice(s![..;-1, ..]).to_owned();
        self.push(value, Op::ReverseRows(x), &[x])
    }

    /// Averages consecutive groups of `stride` rows; a trailing partial group
    /// is averaged over the rows it has.
    pub fn mean_pool_rows(&mut self, x: Var, stride: usize) -> Var {
        let xv = self.value(x);
        let rows = xv.nrows().div_ceil(stride);
        let mut value = Mat::zeros((rows, xv.ncols()));
        for p in 0..rows {
            let lo = p * stride;
            let hi = (lo + stride).min(xv.nrows());
            let block = xv.slice(s![lo..hi, ..]);
            value
                .row_mut(p)
                .assign(&(block.sum_axis(Axis(0)) / (hi - lo) as f64));
        }
        self.push(value, Op::MeanPoolRows { x, stride }, &[x])
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let data: Vec<f64> = self.value(x).iter().copied().collect();
        let value = Mat::from_shape_vec((rows, cols), data).expect("element count preserved");
        self.push(value, Op::Reshape(x), &[x])
    }

    /// Diagonal linear recurrence over rows:
    /// `h_t = a ⊙ h_{t-1} + (1 - a) ⊙ u_t`, with `a = sigmoid(decay)` a
    /// `1 × d` row. `reverse` scans from the last row to the first.
    pub fn scan(&mut self, u: Var, decay: Var, reverse: bool) -> Var {
        let uv = self.value(u);
        let a = self.value(decay).row(0).mapv(sigmoid);
        let (t_len, d) = uv.dim();
        let mut value = Mat::zeros((t_len, d));
        let mut h = vec![0.0; d];
        for step in 0..t_len {
            let t = if reverse { t_len - 1 - step } else { step };
            for j in 0..d {
                h[j] = a[j] * h[j] + (1.0 - a[j]) * uv[[t, j]];
                value[[t, j]] = h[j];
            }
        }
        self.push(value, Op::Scan { u, decay, reverse }, &[u, decay])
    }

    /// Mean negative log-likelihood of `targets[i]` under `softmax(logits[i])`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.nrows(), targets.len(), "one target per logit row");
        let mut probs = lv.clone();
        let mut loss = 0.0;
        for (mut row, &t) in probs.rows_mut().into_iter().zip(targets) {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let total = row.sum();
            row.mapv_inplace(|v| v / total);
            loss -= row[t].ln();
        }
        let value = Mat::from_elem((1, 1), loss / targets.len() as f64);
        self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Frame-averaged binary cross-entropy with probabilities clamped to
    /// `[eps, 1 - eps]`.
    pub fn bce(&mut self, probs: Var, targets: &[f64], eps: f64) -> Var {
        let pv = self.value(probs);
        assert_eq!(pv.len(), targets.len(), "one target per probability");
        let loss = bce_value(pv.iter().copied(), targets.iter().copied(), eps);
        self.push(
            Mat::from_elem((1, 1), loss),
            Op::Bce {
                probs,
                targets: targets.to_vec(),
                eps,
            },
            &[probs],
        )
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let value = Mat::from_elem((1, 1), self.value(x).mean().unwrap_or(0.0));
        self.push(value, Op::Mean(x), &[x])
    }

    /// Back-propagates from a `1 × 1` output and returns gradients of every
    /// trainable parameter that was read during the forward pass.
    pub fn backward(&self, output: Var) -> Grads {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Mat::ones(self.value(output).raw_dim()));
        let mut out = Grads::default();

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let acc = |grads: &mut Vec<Option<Mat>>, v: Var, delta: Mat| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => *existing += &delta,
                    slot @ None => *slot = Some(delta),
                }
            };
            let req = |v: Var| self.nodes[v.0].requires_grad;

            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    out.map.insert(*id, g);
                }
                Op::MatMul(a, b) => {
                    if req(*a) {
                        acc(&mut grads, *a, g.dot(&self.value(*b).t()));
                    }
                    if req(*b) {
                        acc(&mut grads, *b, self.value(*a).t().dot(&g));
                    }
                }
                Op::MatMulT(a, b) => {
                    if req(*a) {
                        acc(&mut grads, *a, g.dot(self.value(*b)));
                    }
                    if req(*b) {
                        acc(&mut grads, *b, g.t().dot(self.value(*a)));
                    }
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::AddRow(x, row) => {
                    if req(*row) {
                        acc(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    acc(&mut grads, *x, g);
                }
                Op::Mul(a, b) => {
                    if req(*a) {
                        acc(&mut grads, *a, &g * self.value(*b));
                    }
                    if req(*b) {
                        acc(&mut grads, *b, &g * self.value(*a));
                    }
                }
                Op::Scale(x, factor) => acc(&mut grads, *x, g * *factor),
                Op::Tanh(x) => {
                    let d = ndarray::Zip::from(&g)
                        .and(&node.value)
                        .map_collect(|&g, &y| g * (1.0 - y * y));
                    acc(&mut grads, *x, d);
                }
                Op::Sigmoid(x) => {
                    let d = ndarray::Zip::from(&g)
                        .and(&node.value)
                        .map_collect(|&g, &y| g * y * (1.0 - y));
                    acc(&mut grads, *x, d);
                }
                Op::Gelu(x) => {
                    let d = ndarray::Zip::from(&g)
                        .and(self.value(*x))
                        .map_collect(|&g, &v| {
                            let t = (GELU_K * (v + GELU_C * v * v * v)).tanh();
                            let dt = (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * v * v);
                            g * (0.5 * (1.0 + t) + 0.5 * v * dt)
                        });
                    acc(&mut grads, *x, d);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    if req(*gamma) {
                        acc(
                            &mut grads,
                            *gamma,
                            (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)),
                        );
                    }
                    if req(*beta) {
                        acc(&mut grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if req(*x) {
                        let dxhat = &g * self.value(*gamma);
                        let n = dxhat.ncols() as f64;
                        let mut dx = Mat::zeros(dxhat.raw_dim());
                        for r in 0..dxhat.nrows() {
                            let dh = dxhat.row(r);
                            let xh = xhat.row(r);
                            let sum_dh = dh.sum();
                            let sum_dh_xh = dh.dot(&xh);
                            for c in 0..dxhat.ncols() {
                                dx[[r, c]] =
                                    inv_std[r] / n * (n * dh[c] - sum_dh - xh[c] * sum_dh_xh);
                            }
                        }
                        acc(&mut grads, *x, dx);
                    }
                }
                Op::Softmax(x) => {
                    let y = &node.value;
                    let mut dx = &g * y;
                    for r in 0..dx.nrows() {
                        let inner = dx.row(r).sum();
                        for c in 0..dx.ncols() {
                            dx[[r, c]] -= y[[r, c]] * inner;
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::GatherRows { src, ids } => {
                    let mut d = Mat::zeros(self.value(*src).raw_dim());
                    for (r, &id) in ids.iter().enumerate() {
                        let mut row = d.row_mut(id);
                        row += &g.row(r);
                    }
                    acc(&mut grads, *src, d);
                }
                Op::SliceCols { x, start } => {
                    let mut d = Mat::zeros(self.value(*x).raw_dim());
                    d.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut grads, *x, d);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let rows = self.value(p).nrows();
                        if req(p) {
                            acc(&mut grads, p, g.slice(s![offset..offset + rows, ..]).to_owned());
                        }
                        offset += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let cols = self.value(p).ncols();
                        if req(p) {
                            acc(&mut grads, p, g.slice(s![.., offset..offset + cols]).to_owned());
                        }
                        offset += cols;
                    }
                }
                Op::ReverseRows(x) => acc(&mut grads, *x, g.slice(s![..;-1, ..]).to_owned()),
                Op::MeanPoolRows { x, stride } => {
                    let rows = self.value(*x).nrows();
                    let mut d = Mat::zeros(self.value(*x).raw_dim());
                    for p in 0..g.nrows() {
                        let lo = p * stride;
                        let hi = (lo + stride).min(rows);
                        let share = &g.row(p) / (hi - lo) as f64;
                        for t in lo..hi {
                            d.row_mut(t).assign(&share);
                        }
                    }
                    acc(&mut grads, *x, d);
                }
                Op::Reshape(x) => {
                    let data: Vec<f64> = g.iter().copied().collect();
                    let d = Mat::from_shape_vec(self.value(*x).raw_dim(), data)
                        .expect("element count preserved");
                    acc(&mut grads, *x, d);
                }
                Op::Scan { u, decay, reverse } => {
                    let uv = self.value(*u);
                    let h = &node.value;
                    let a = self.value(*decay).row(0).mapv(sigmoid);
                    let (t_len, d) = uv.dim();
                    let mut du = Mat::zeros((t_len, d));
                    let mut da = vec![0.0; d];
                    let mut carry = vec![0.0; d];
                    for step in (0..t_len).rev() {
                        let t = if *reverse { t_len - 1 - step } else { step };
                        let prev = if step == 0 {
                            None
                        } else if *reverse {
                            Some(t + 1)
                        } else {
                            Some(t - 1)
                        };
                        for j in 0..d {
                            let dh = g[[t, j]] + carry[j];
                            du[[t, j]] = (1.0 - a[j]) * dh;
                            let h_prev = prev.map_or(0.0, |p| h[[p, j]]);
                            da[j] += dh * (h_prev - uv[[t, j]]);
                            carry[j] = a[j] * dh;
                        }
                    }
                    if req(*decay) {
                        let dd = Mat::from_shape_fn((1, d), |(_, j)| da[j] * a[j] * (1.0 - a[j]));
                        acc(&mut grads, *decay, dd);
                    }
                    acc(&mut grads, *u, du);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let scale = g[[0, 0]] / targets.len() as f64;
                    let mut d = probs.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        d[[r, t]] -= 1.0;
                    }
                    acc(&mut grads, *logits, d * scale);
                }
                Op::Bce {
                    probs,
                    targets,
                    eps,
                } => {
                    let pv = self.value(*probs);
                    let scale = g[[0, 0]] / targets.len() as f64;
                    let data: Vec<f64> = pv
                        .iter()
                        .zip(targets)
                        .map(|(&p, &y)| {
                            if p <= *eps || p >= 1.0 - eps {
                                0.0
                            } else {
                                -scale * (y / p - (1.0 - y) / (1.0 - p))
                            }
                        })
                        .collect();
                    let d = Mat::from_shape_vec(pv.raw_dim(), data).expect("same shape");
                    acc(&mut grads, *probs, d);
                }
                Op::Mean(x) => {
                    let n = self.value(*x).len() as f64;
                    acc(
                        &mut grads,
                        *x,
                        Mat::from_elem(self.value(*x).raw_dim(), g[[0, 0]] / n),
                    );
                }
            }
        }
        out
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

/// `-(1/T) Σ [y ln p + (1 - y) ln(1 - p)]` with `p` clamped to `[eps, 1 - eps]`.
pub fn bce_value(
    probs: impl IntoIterator<Item = f64>,
    targets: impl IntoIterator<Item = f64>,
    eps: f64,
) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for (p, y) in probs.into_iter().zip(targets) {
        let p = p.clamp(eps, 1.0 - eps);
        total -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        n += 1;
    }
    total / n as f64
}
