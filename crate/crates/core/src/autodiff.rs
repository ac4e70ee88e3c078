//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is rebuilt for every forward pass. Parameters enter as leaves
//! (borrowed, so binding a model's weights does not copy them), every
//! operation appends one node, and [`Graph::backward`] walks the tape once in
//! reverse, accumulating into the gradient buffers of the leaves.

use std::borrow::Cow;

use rand::Rng as _;

use crate::error::{GarError, Result};
use crate::rng::Rng;
use crate::scalar::Real;
use crate::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Tensor};

/// Layer-norm variance floor.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Training,
    Inference,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Concat(Vec<Var>),
    MaxOverSet {
        x: Var,
        argmax: Vec<usize>,
    },
    Reshape(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    NllProbs {
        probs: Var,
        labels: Vec<usize>,
    },
    Sum(Var),
}

struct Node<'w, T: Real> {
    value: Cow<'w, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
    /// Accumulated gradient, kept only for leaves that require it.
    grad: Option<Vec<T>>,
}

/// Append-only computation tape.
pub struct Graph<'w, T: Real = f64> {
    nodes: Vec<Node<'w, T>>,
    mode: Mode,
    rng: Rng,
}

impl<'w, T: Real> Graph<'w, T> {
    /// `dropout_seed` drives the dropout masks drawn in training mode.
    pub fn new(mode: Mode, dropout_seed: u64) -> Self {
        use rand::SeedableRng;
        Graph {
            nodes: Vec::new(),
            mode,
            rng: Rng::seed_from_u64(dropout_seed),
        }
    }

    pub fn inference() -> Self {
        Self::new(Mode::Inference, 0)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn leaf(&mut self, value: Cow<'w, Tensor<T>>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a trainable tensor without copying it.
    pub fn param(&mut self, t: &'w Tensor<T>) -> Var {
        self.leaf(Cow::Borrowed(t), true)
    }

    pub fn param_owned(&mut self, t: Tensor<T>) -> Var {
        self.leaf(Cow::Owned(t), true)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(Cow::Owned(t), false)
    }

    pub fn constant_ref(&mut self, t: &'w Tensor<T>) -> Var {
        self.leaf(Cow::Borrowed(t), false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a leaf. Leaves the loss never reached report zeros.
    pub fn grad(&self, v: Var) -> Tensor<T> {
        let node = &self.nodes[v.0];
        match &node.grad {
            Some(g) => Tensor::new(node.value.shape().to_vec(), g.clone())
                .expect("gradient mirrors value shape"),
            None => Tensor::zeros(node.value.shape()),
        }
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if !value.all_finite() {
            return Err(GarError::NonFinite { op: op_name });
        }
        let requires_grad = self.inputs_of(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs_of(&self, op: &Op<T>) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::MatMulNt(a, b) | Op::Add(a, b) | Op::AddRow(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(x, _)
            | Op::Relu(x)
            | Op::Softmax(x)
            | Op::Reshape(x)
            | Op::Sum(x)
            | Op::Dropout { x, .. }
            | Op::MaxOverSet { x, .. } => vec![*x],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Concat(xs) => xs.clone(),
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::NllProbs { probs, .. } => vec![*probs],
        }
    }

    fn matrix(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let t = self.value(v);
        match t.shape() {
            [m, n] => Ok((*m, *n)),
            s => Err(GarError::dim(op, format!("expected a matrix, got shape {s:?}"))),
        }
    }

    /// Matrix product `a · b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix(a, "matmul")?;
        let (k2, n) = self.matrix(b, "matmul")?;
        if k != k2 {
            return Err(GarError::dim(
                "matmul",
                format!("inner extents differ: {m}x{k} · {k2}x{n}"),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        self.push("matmul", t, Op::MatMul(a, b))
    }

    /// `a · bᵀ`, used for query-key scores.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix(a, "matmul_nt")?;
        let (n, k2) = self.matrix(b, "matmul_nt")?;
        if k != k2 {
            return Err(GarError::dim(
                "matmul_nt",
                format!("last extents differ: {m}x{k} vs {n}x{k2}"),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nt_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        self.push("matmul_nt", t, Op::MatMulNt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(GarError::dim(
                "add",
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("add", t, Op::Add(a, b))
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.matrix(x, "add_row")?;
        let tb = self.value(bias);
        if tb.len() != n {
            return Err(GarError::dim(
                "add_row",
                format!("bias of length {} for {m}x{n}", tb.len()),
            ));
        }
        let b = tb.data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, &bv) in row.iter_mut().zip(b) {
                *v = *v + bv;
            }
        }
        let t = Tensor::new(vec![m, n], data)?;
        self.push("add_row", t, Op::AddRow(x, bias))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let t = self.value(x).map(|v| v * c);
        self.push("scale", t, Op::Scale(x, c))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| v.max(T::zero()));
        self.push("relu", t, Op::Relu(x))
    }

    /// Row-wise softmax, shifted by each row's maximum.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.matrix(x, "softmax_rows")?;
        let out = softmax_rows_raw(self.value(x).data(), m, n);
        let t = Tensor::new(vec![m, n], out)?;
        self.push("softmax_rows", t, Op::Softmax(x))
    }

    /// Per-row normalization to zero mean and unit variance, then `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, d) = self.matrix(x, "layer_norm")?;
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(GarError::dim("layer_norm", "gain/bias length must equal row width"));
        }
        let eps = T::of(LAYER_NORM_EPS);
        let dt = T::of(d as f64);
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = Vec::with_capacity(m * d);
        let mut inv_std = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m * d);
        for row in xs.chunks(d) {
            let mean = row.iter().copied().sum::<T>() / dt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dt;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let t = Tensor::new(vec![m, d], out)?;
        self.push(
            "layer_norm",
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    /// Inverted dropout. Identity in inference mode or when `rate == 0`.
    pub fn dropout(&mut self, x: Var, rate: T) -> Result<Var> {
        if !(rate >= T::zero() && rate < T::one()) {
            return Err(GarError::Config(format!("dropout rate {rate} not in [0, 1)")));
        }
        if self.mode == Mode::Inference || rate == T::zero() {
            return Ok(x);
        }
        let keep = T::one() - rate;
        let scale = T::one() / keep;
        let p = rate.to_f64_lossy();
        let n = self.value(x).len();
        let mask: Vec<T> = (0..n)
            .map(|_| {
                if self.rng.random::<f64>() < p {
                    T::zero()
                } else {
                    scale
                }
            })
            .collect();
        let tx = self.value(x);
        let data = tx.data().iter().zip(&mask).map(|(&v, &k)| v * k).collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        self.push("dropout", t, Op::Dropout { x, mask })
    }

    /// Concatenates matrices with equal row counts along the last dimension.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(GarError::EmptySet("concat_cols"));
        }
        let mut dims = Vec::with_capacity(xs.len());
        for &x in xs {
            dims.push(self.matrix(x, "concat_cols")?);
        }
        let m = dims[0].0;
        if dims.iter().any(|d| d.0 != m) {
            return Err(GarError::dim("concat_cols", "row counts differ"));
        }
        let total: usize = dims.iter().map(|d| d.1).sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for &x in xs {
                out.extend_from_slice(self.value(x).row(i));
            }
        }
        let t = Tensor::new(vec![m, total], out)?;
        self.push("concat_cols", t, Op::Concat(xs.to_vec()))
    }

    /// Column-wise maximum over the rows of an `N×d` set, giving a length-`d`
    /// vector. Ties go to the lowest row index.
    pub fn max_over_set(&mut self, x: Var) -> Result<Var> {
        let (n, d) = self.matrix(x, "max_over_set")?;
        let tx = self.value(x);
        let mut argmax = vec![0usize; d];
        let mut out = tx.row(0).to_vec();
        for i in 1..n {
            for (j, &v) in tx.row(i).iter().enumerate() {
                if v > out[j] {
                    out[j] = v;
                    argmax[j] = i;
                }
            }
        }
        let t = Tensor::new(vec![d], out)?;
        self.push("max_over_set", t, Op::MaxOverSet { x, argmax })
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        self.push("reshape", t, Op::Reshape(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x))
    }

    /// Mean over rows of `-log softmax(logits)[label]`, via log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (m, c) = self.matrix(logits, "cross_entropy")?;
        check_labels(labels, m, c)?;
        let probs = softmax_rows_raw(self.value(logits).data(), m, c);
        let z = self.value(logits).data();
        let mut total = T::zero();
        for (i, &y) in labels.iter().enumerate() {
            let row = &z[i * c..(i + 1) * c];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
            total = total + (lse - row[y]);
        }
        let loss = total / T::of(m as f64);
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    /// Mean over rows of `-log probs[label]` for rows that are already
    /// probability distributions.
    pub fn nll_probs(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let (m, c) = self.matrix(probs, "nll_probs")?;
        check_labels(labels, m, c)?;
        let p = self.value(probs).data();
        let total: T = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| -p[i * c + y].ln())
            .sum();
        let loss = total / T::of(m as f64);
        self.push(
            "nll_probs",
            Tensor::scalar(loss),
            Op::NllProbs {
                probs,
                labels: labels.to_vec(),
            },
        )
    }

    /// Reverse sweep from a scalar loss. Leaf gradients accumulate across calls
    /// until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(GarError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let node = &self.nodes[i];
            let send = |v: Var, delta: Vec<T>, grads: &mut Vec<Option<Vec<T>>>| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => {
                        for (a, d) in acc.iter_mut().zip(delta) {
                            *a = *a + d;
                        }
                    }
                    slot @ None => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Leaf => {
                    // handled below, after the borrow of `node` ends
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k) = (ta.shape()[0], ta.shape()[1]);
                    let n = tb.shape()[1];
                    let mut da = vec![T::zero(); m * k];
                    gemm_nt_acc(&g, tb.data(), &mut da, m, n, k);
                    let mut db = vec![T::zero(); k * n];
                    gemm_tn_acc(ta.data(), &g, &mut db, k, m, n);
                    send(*a, da, &mut grads);
                    send(*b, db, &mut grads);
                }
                Op::MatMulNt(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k) = (ta.shape()[0], ta.shape()[1]);
                    let n = tb.shape()[0];
                    let mut da = vec![T::zero(); m * k];
                    gemm_acc(&g, tb.data(), &mut da, m, n, k);
                    let mut db = vec![T::zero(); n * k];
                    gemm_tn_acc(&g, ta.data(), &mut db, n, m, k);
                    send(*a, da, &mut grads);
                    send(*b, db, &mut grads);
                }
                Op::Add(a, b) => {
                    send(*a, g.clone(), &mut grads);
                    send(*b, g, &mut grads);
                }
                Op::AddRow(x, bias) => {
                    let n = self.value(*bias).len();
                    let mut db = vec![T::zero(); n];
                    for row in g.chunks(n) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                    send(*x, g, &mut grads);
                    send(*bias, db, &mut grads);
                }
                Op::Scale(x, c) => {
                    let c = *c;
                    send(*x, g.into_iter().map(|v| v * c).collect(), &mut grads);
                }
                Op::Relu(x) => {
                    let tx = self.value(*x).data();
                    let dx = g
                        .iter()
                        .zip(tx)
                        .map(|(&d, &v)| if v > T::zero() { d } else { T::zero() })
                        .collect();
                    send(*x, dx, &mut grads);
                }
                Op::Softmax(x) => {
                    let y = node.value.data();
                    let n = node.value.shape()[1];
                    let mut dx = Vec::with_capacity(y.len());
                    for (yr, gr) in y.chunks(n).zip(g.chunks(n)) {
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        dx.extend(yr.iter().zip(gr).map(|(&yv, &gv)| yv * (gv - dot)));
                    }
                    send(*x, dx, &mut grads);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let d = node.value.shape()[1];
                    let dt = T::of(d as f64);
                    let gv = self.value(*gain).data();
                    let mut dg = vec![T::zero(); d];
                    let mut db = vec![T::zero(); d];
                    let mut dx = Vec::with_capacity(g.len());
                    for (r, (gr, hr)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        let dh: Vec<T> = (0..d)
                            .map(|j| {
                                dg[j] = dg[j] + gr[j] * hr[j];
                                db[j] = db[j] + gr[j];
                                let v = gr[j] * gv[j];
                                s1 = s1 + v;
                                s2 = s2 + v * hr[j];
                                v
                            })
                            .collect();
                        let inv = inv_std[r];
                        dx.extend((0..d).map(|j| inv / dt * (dt * dh[j] - s1 - hr[j] * s2)));
                    }
                    send(*x, dx, &mut grads);
                    send(*gain, dg, &mut grads);
                    send(*bias, db, &mut grads);
                }
                Op::Dropout { x, mask } => {
                    let dx = g.iter().zip(mask).map(|(&d, &k)| d * k).collect();
                    send(*x, dx, &mut grads);
                }
                Op::Concat(xs) => {
                    let total = node.value.shape()[1];
                    let mut offset = 0;
                    for &x in xs {
                        let (m, w) = {
                            let s = self.value(x).shape();
                            (s[0], s[1])
                        };
                        let mut dx = Vec::with_capacity(m * w);
                        for i in 0..m {
                            dx.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                        }
                        offset += w;
                        send(x, dx, &mut grads);
                    }
                }
                Op::MaxOverSet { x, argmax } => {
                    let d = argmax.len();
                    let mut dx = vec![T::zero(); self.value(*x).len()];
                    for (j, &r) in argmax.iter().enumerate() {
                        dx[r * d + j] = g[j];
                    }
                    send(*x, dx, &mut grads);
                }
                Op::Reshape(x) => send(*x, g, &mut grads),
                Op::Sum(x) => {
                    let n = self.value(*x).len();
                    send(*x, vec![g[0]; n], &mut grads);
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let m = labels.len();
                    let c = probs.len() / m;
                    let scale = g[0] / T::of(m as f64);
                    let mut dz: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                    for (i, &y) in labels.iter().enumerate() {
                        dz[i * c + y] = dz[i * c + y] - scale;
                    }
                    send(*logits, dz, &mut grads);
                }
                Op::NllProbs { probs, labels } => {
                    let tp = self.value(*probs);
                    let c = tp.shape()[1];
                    let m = labels.len();
                    let scale = g[0] / T::of(m as f64);
                    let mut dp = vec![T::zero(); tp.len()];
                    for (i, &y) in labels.iter().enumerate() {
                        dp[i * c + y] = -scale / tp.data()[i * c + y];
                    }
                    send(*probs, dp, &mut grads);
                }
            }
        }

        for (i, g) in grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            let node = &mut self.nodes[i];
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            match &mut node.grad {
                Some(acc) => {
                    for (a, d) in acc.iter_mut().zip(g) {
                        *a = *a + d;
                    }
                }
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }
}

fn check_labels(labels: &[usize], m: usize, c: usize) -> Result<()> {
    if labels.len() != m {
        return Err(GarError::Data(format!(
            "{} labels for {m} rows",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(GarError::Data(format!("label {bad} out of range for {c} classes")));
    }
    Ok(())
}

pub(crate) fn softmax_rows_raw<T: Real>(x: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(m * n);
    for row in x.chunks(n).take(m) {
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        let mut s = T::zero();
        for &v in row {
            let e = (v - mx).exp();
            s = s + e;
            out.push(e);
        }
        for v in &mut out[start..] {
            *v = *v / s;
        }
    }
    out
}

/// Row-wise softmax of a plain tensor, outside any graph.
pub fn softmax_rows<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (m, n) = x.dims2().expect("softmax_rows needs rank 1 or 2");
    Tensor::new(x.shape().to_vec(), softmax_rows_raw(x.data(), m, n)).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn m(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity_and_by_hand() {
        let mut g = Graph::<f64>::inference();
        let i2 = g.constant(Tensor::eye(2));
        let a = g.constant(m(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let c = g.matmul(i2, a).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);

        let r = g.constant(m(&[&[1.0, 2.0]]));
        let col = g.constant(m(&[&[3.0], &[4.0]]));
        let p = g.matmul(r, col).unwrap();
        assert_eq!(g.value(p).data(), &[11.0]);
        assert!(matches!(g.matmul(r, r), Err(GarError::Dimension { .. })));
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::<f64>::inference();
        let x = g.constant(m(&[&[0.0, 0.0, 0.0], &[1.0, 1.0, 1.0]]));
        let s = g.softmax_rows(x).unwrap();
        for v in g.value(s).data() {
            assert_abs_diff_eq!(*v, 1.0 / 3.0, epsilon = 1e-15);
        }
        let one = g.constant(m(&[&[-37.5]]));
        let s1 = g.softmax_rows(one).unwrap();
        assert_eq!(g.value(s1).data(), &[1.0]);
        let x2 = g.constant(m(&[&[1.0, 2.0]]));
        let s2 = g.softmax_rows(x2).unwrap();
        assert_abs_diff_eq!(g.value(s2).data()[0], 0.26894, epsilon = 1e-5);
        assert_abs_diff_eq!(g.value(s2).data()[1], 0.73106, epsilon = 1e-5);
        // large logits stay finite thanks to the max shift
        let big = g.constant(m(&[&[1000.0, 1001.0]]));
        let sb = g.softmax_rows(big).unwrap();
        assert_abs_diff_eq!(g.value(sb).data()[1], 0.73106, epsilon = 1e-5);
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::<f64>::inference();
        let gain = g.constant(Tensor::ones(&[4]));
        let bias = g.constant(Tensor::zeros(&[4]));
        let x = g.constant(m(&[&[5.0, 5.0, 5.0, 5.0]]));
        let y = g.layer_norm(x, gain, bias).unwrap();
        assert_eq!(g.value(y).data(), &[0.0; 4]);

        let gain2 = g.constant(Tensor::ones(&[2]));
        let bias2 = g.constant(Tensor::zeros(&[2]));
        let x2 = g.constant(m(&[&[1.0, 3.0]]));
        let y2 = g.layer_norm(x2, gain2, bias2).unwrap();
        assert_abs_diff_eq!(g.value(y2).data()[0], -1.0, epsilon = 1e-4);
        assert_abs_diff_eq!(g.value(y2).data()[1], 1.0, epsilon = 1e-4);
    }

    #[test]
    fn dropout_modes_and_rate_validation() {
        let x = Tensor::full(&[10, 10], 2.0);
        let mut g = Graph::<f64>::new(Mode::Training, 3);
        let v = g.constant(x.clone());
        let same = g.dropout(v, 0.0).unwrap();
        assert_eq!(same, v);
        assert!(matches!(g.dropout(v, 1.0), Err(GarError::Config(_))));
        assert!(matches!(g.dropout(v, -0.1), Err(GarError::Config(_))));

        let mut gi = Graph::<f64>::inference();
        let vi = gi.constant(x);
        let out = gi.dropout(vi, 0.1).unwrap();
        assert_eq!(gi.value(out).data(), gi.value(vi).data());
    }

    #[test]
    fn dropout_survivor_statistics() {
        let n = 100_000;
        let mut g = Graph::<f64>::new(Mode::Training, 11);
        let v = g.constant(Tensor::ones(&[n]));
        let out = g.dropout(v, 0.1).unwrap();
        let d = g.value(out).data();
        let kept = d.iter().filter(|&&x| x != 0.0).count() as f64 / n as f64;
        let mean = d.iter().sum::<f64>() / n as f64;
        assert!((kept - 0.9).abs() <= 0.01, "kept {kept}");
        assert!((mean - 1.0).abs() <= 0.02, "mean {mean}");
    }

    #[test]
    fn max_over_set_examples() {
        let mut g = Graph::<f64>::inference();
        let x = g.constant(m(&[&[1.0, 9.0], &[5.0, 2.0]]));
        let y = g.max_over_set(x).unwrap();
        assert_eq!(g.value(y).data(), &[5.0, 9.0]);
        assert_eq!(g.value(y).shape(), &[2]);
        let single = g.constant(m(&[&[3.0, -1.0, 4.0]]));
        let ys = g.max_over_set(single).unwrap();
        assert_eq!(g.value(ys).data(), &[3.0, -1.0, 4.0]);
    }

    #[test]
    fn max_over_set_ties_route_to_lowest_index() {
        let mut g = Graph::<f64>::inference();
        let x = g.param_owned(m(&[&[2.0, 1.0], &[2.0, 1.0]]));
        let y = g.max_over_set(x).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).data(), &[1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::<f64>::inference();
        let u = g.constant(m(&[&[0.3; 4]]));
        let l = g.cross_entropy(u, &[2]).unwrap();
        assert_abs_diff_eq!(g.value(l).data()[0], 4f64.ln(), epsilon = 1e-12);

        let z = g.constant(m(&[&[1.0, 2.0]]));
        let l2 = g.cross_entropy(z, &[1]).unwrap();
        assert_abs_diff_eq!(g.value(l2).data()[0], 0.31326, epsilon = 1e-5);

        let mut prev = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0, 60.0] {
            let z = g.constant(m(&[&[margin, 0.0, 0.0]]));
            let l = g.cross_entropy(z, &[0]).unwrap();
            let v = g.value(l).data()[0];
            assert!(v < prev);
            prev = v;
        }
        assert!(prev < 1e-20);
        assert!(matches!(g.cross_entropy(z, &[2]), Err(GarError::Data(_))));
    }

    #[test]
    fn backward_sum_disconnected_and_accumulation() {
        let p = Tensor::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]).unwrap();
        let q = Tensor::ones(&[3]);
        let mut g = Graph::<f64>::inference();
        let pv = g.param(&p);
        let qv = g.param(&q);
        let s = g.sum(pv).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(pv).data(), &[1.0; 4]);
        assert_eq!(g.grad(qv).data(), &[0.0; 3]);
        g.backward(s).unwrap();
        assert_eq!(g.grad(pv).data(), &[2.0; 4]);
        g.zero_grad();
        assert_eq!(g.grad(pv).data(), &[0.0; 4]);
        assert!(matches!(g.backward(pv), Err(GarError::Usage(_))));
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut g = Graph::<f64>::inference();
        let x = g.constant(Tensor::full(&[1, 2], f64::MAX));
        assert!(matches!(g.scale(x, 10.0), Err(GarError::NonFinite { .. })));
    }
}
