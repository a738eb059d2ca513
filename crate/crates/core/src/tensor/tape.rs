//! Wengert-list reverse-mode differentiation.
//!
//! Every forward op appends a node holding its output value, its inputs and
//! whatever it needs for the backward rule. Nodes are only ever appended, so
//! the list is topologically ordered by construction and the reverse pass is
//! a single sweep from the loss back to the leaves.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, ConvGeom, BN_EPS};
use super::optim::{ParamId, ParamStore};
use super::{Real, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(0);

/// Handle to a node on a particular [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

/// Running per-channel statistics of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Real> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }
}

pub enum BatchNormMode<'a, T> {
    /// Normalize with batch statistics and fold them into `running`.
    Train {
        running: &'a mut RunningStats<T>,
        momentum: f64,
    },
    /// Normalize with the running statistics.
    Eval { running: &'a RunningStats<T> },
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    Conv2d {
        geom: ConvGeom,
        cols: Vec<T>,
    },
    MaxPool {
        arg: Vec<u32>,
    },
    BatchNorm {
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Relu,
    Linear,
    Reshape,
    Add,
    Sub,
    Scale(T),
    MatMul,
    SqDist,
    SelectRows(Vec<usize>),
    SoftmaxCe {
        probs: Vec<T>,
        targets: Vec<usize>,
    },
    DistRatioNll {
        targets: Vec<usize>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool { .. } => "maxpool2x2",
            Op::BatchNorm { .. } => "batchnorm2d",
            Op::Relu => "relu",
            Op::Linear => "linear",
            Op::Reshape => "flatten",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Scale(_) => "scale",
            Op::MatMul => "matmul",
            Op::SqDist => "sq_dist",
            Op::SelectRows(_) => "select_rows",
            Op::SoftmaxCe { .. } => "softmax_cross_entropy",
            Op::DistRatioNll { .. } => "dist_ratio_nll",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    inputs: Vec<Var>,
    /// Whether any parameter is reachable through this node.
    tracked: bool,
}

pub struct Tape<T> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn ensure_finite<T: Real>(op: &'static str, data: &[T]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a = *a + b),
        None => *slot = Some(g),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> Result<&Node<T>> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::invalid("variable does not belong to this tape"));
        }
        Ok(&self.nodes[v.index])
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        assert_eq!(v.tape, self.id, "variable does not belong to this tape");
        &self.nodes[v.index].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, inputs: Vec<Var>) -> Result<Var> {
        ensure_finite(op.name(), value.data())?;
        let tracked = match op {
            Op::Param(_) => true,
            _ => inputs.iter().any(|v| self.nodes[v.index].tracked),
        };
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            inputs,
            tracked,
        });
        Ok(Var {
            tape: self.id,
            index,
        })
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.index].tracked
    }

    /// Records a constant input (no gradient flows into it).
    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push(Op::Leaf, t, Vec::new())
    }

    /// Records the current value of a trainable parameter.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Var> {
        let t = store.get(id).tensor.clone();
        self.push(Op::Param(id), t, Vec::new())
    }

    /// Same-padded stride-1 convolution: `x` is NCHW, `w` is OIHW.
    pub fn conv2d(&mut self, x: Var, w: Var, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.node(x)?.value.shape(), self.node(w)?.value.shape());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(shape_err("conv2d", xs, ws));
        }
        if xs[2] + 2 * pad < ws[2] || xs[3] + 2 * pad < ws[3] {
            return Err(shape_err("conv2d", xs, ws));
        }
        let geom = ConvGeom {
            batch: xs[0],
            in_ch: xs[1],
            height: xs[2],
            width: xs[3],
            out_ch: ws[0],
            kh: ws[2],
            kw: ws[3],
            pad,
        };
        let (y, cols) = kernels::conv2d_forward(
            &geom,
            self.nodes[x.index].value.data(),
            self.nodes[w.index].value.data(),
        );
        let shape = vec![geom.batch, geom.out_ch, geom.out_h(), geom.out_w()];
        let keep = self.tracked(x) || self.tracked(w);
        let cols = if keep { cols } else { Vec::new() };
        self.push(
            Op::Conv2d { geom, cols },
            Tensor::from_parts(shape, y),
            vec![x, w],
        )
    }

    /// 2x2 max pool with stride 2; odd trailing rows/columns are dropped.
    pub fn maxpool2x2(&mut self, x: Var) -> Result<Var> {
        let xs = self.node(x)?.value.shape().to_vec();
        if xs.len() != 4 || xs[2] < 2 || xs[3] < 2 {
            return Err(shape_err("maxpool2x2", &xs, &[2, 2]));
        }
        let (out, arg) = kernels::maxpool2x2_forward(
            xs[0] * xs[1],
            xs[2],
            xs[3],
            self.nodes[x.index].value.data(),
        );
        let shape = vec![xs[0], xs[1], xs[2] / 2, xs[3] / 2];
        self.push(Op::MaxPool { arg }, Tensor::from_parts(shape, out), vec![x])
    }

    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_, T>,
    ) -> Result<Var> {
        let xs = self.node(x)?.value.shape().to_vec();
        let gs = self.node(gamma)?.value.shape().to_vec();
        let bs = self.node(beta)?.value.shape().to_vec();
        if xs.len() != 4 || gs != [xs[1]] || bs != gs {
            return Err(shape_err("batchnorm2d", &xs, &gs));
        }
        let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let xd = self.nodes[x.index].value.data();
        let gd = self.nodes[gamma.index].value.data();
        let bd = self.nodes[beta.index].value.data();
        let (y, xhat, inv_std, batch_stats) = match mode {
            BatchNormMode::Train { running, momentum } => {
                if n * hw < 2 {
                    return Err(Error::invalid(
                        "batchnorm2d: training needs more than one value per channel",
                    ));
                }
                let st = kernels::batchnorm_train(n, c, hw, xd, gd, bd);
                let mom = T::from_f64_lossy(momentum);
                for ch in 0..c {
                    running.mean[ch] = (T::one() - mom) * running.mean[ch] + mom * st.mean[ch];
                    running.var[ch] =
                        (T::one() - mom) * running.var[ch] + mom * st.var_unbiased[ch];
                }
                (st.y, st.xhat, st.inv_std, true)
            }
            BatchNormMode::Eval { running } => {
                if running.mean.len() != c {
                    return Err(shape_err("batchnorm2d", &xs, &[running.mean.len()]));
                }
                let eps = T::from_f64_lossy(BN_EPS);
                let inv_std: Vec<T> = running
                    .var
                    .iter()
                    .map(|&v| T::one() / (v + eps).sqrt())
                    .collect();
                let mut xhat = vec![T::zero(); xd.len()];
                let mut y = vec![T::zero(); xd.len()];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * hw;
                        for i in off..off + hw {
                            xhat[i] = (xd[i] - running.mean[ch]) * inv_std[ch];
                            y[i] = gd[ch] * xhat[i] + bd[ch];
                        }
                    }
                }
                (y, xhat, inv_std, false)
            }
        };
        self.push(
            Op::BatchNorm {
                xhat,
                inv_std,
                batch_stats,
            },
            Tensor::from_parts(xs, y),
            vec![x, gamma, beta],
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = &self.node(x)?.value;
        let data = t
            .data()
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let shape = t.shape().to_vec();
        self.push(Op::Relu, Tensor::from_parts(shape, data), vec![x])
    }

    /// `x [B, in]`, `w [out, in]`, `b [out]` -> `x wᵀ + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.node(x)?.value.shape().to_vec();
        let ws = self.node(w)?.value.shape().to_vec();
        let bs = self.node(b)?.value.shape().to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(shape_err("linear", &xs, &ws));
        }
        if bs != [ws[0]] {
            return Err(shape_err("linear", &ws, &bs));
        }
        let (batch, inp, out) = (xs[0], xs[1], ws[0]);
        let mut y = Vec::with_capacity(batch * out);
        for _ in 0..batch {
            y.extend_from_slice(self.nodes[b.index].value.data());
        }
        T::gemm(
            batch,
            inp,
            out,
            T::one(),
            self.nodes[x.index].value.data(),
            (inp as isize, 1),
            self.nodes[w.index].value.data(),
            (1, inp as isize),
            T::one(),
            &mut y,
            (out as isize, 1),
        );
        self.push(
            Op::Linear,
            Tensor::from_parts(vec![batch, out], y),
            vec![x, w, b],
        )
    }

    /// Collapses every axis after the first: `[B, ...] -> [B, prod(...)]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let t = &self.node(x)?.value;
        let b = t.shape()[0];
        self.reshape(x, &[b, t.numel() / b])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = &self.node(x)?.value;
        if shape.iter().product::<usize>() != t.numel() || shape.contains(&0) {
            return Err(shape_err("reshape", t.shape(), shape));
        }
        let data = t.data().to_vec();
        self.push(
            Op::Reshape,
            Tensor::from_parts(shape.to_vec(), data),
            vec![x],
        )
    }

    fn binary(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        let (ta, tb) = (&self.node(a)?.value, &self.node(b)?.value);
        if ta.shape() != tb.shape() {
            return Err(shape_err(op.name(), ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&p, &q)| f(p, q))
            .collect();
        let shape = ta.shape().to_vec();
        self.push(op, Tensor::from_parts(shape, data), vec![a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add, |p, q| p + q)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub, |p, q| p - q)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        if !s.is_finite() {
            return Err(Error::NonFinite { op: "scale" });
        }
        let t = &self.node(x)?.value;
        let data = t.data().iter().map(|&v| v * s).collect();
        let shape = t.shape().to_vec();
        self.push(Op::Scale(s), Tensor::from_parts(shape, data), vec![x])
    }

    /// `a [m, k] · b [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (
            self.node(a)?.value.shape().to_vec(),
            self.node(b)?.value.shape().to_vec(),
        );
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut y = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.nodes[a.index].value.data(),
            (k as isize, 1),
            self.nodes[b.index].value.data(),
            (n as isize, 1),
            T::zero(),
            &mut y,
            (n as isize, 1),
        );
        self.push(Op::MatMul, Tensor::from_parts(vec![m, n], y), vec![a, b])
    }

    /// Pairwise squared Euclidean distances: `a [Q, d]`, `b [N, d]` -> `[Q, N]`.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.node(a)?.value, &self.node(b)?.value);
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[1] {
            return Err(shape_err("sq_dist", ta.shape(), tb.shape()));
        }
        let (q, n, d) = (ta.shape()[0], tb.shape()[0], ta.shape()[1]);
        let mut out = Vec::with_capacity(q * n);
        for i in 0..q {
            let ai = &ta.data()[i * d..(i + 1) * d];
            for j in 0..n {
                let bj = &tb.data()[j * d..(j + 1) * d];
                out.push(ai.iter().zip(bj).map(|(&x, &y)| (x - y) * (x - y)).sum());
            }
        }
        self.push(Op::SqDist, Tensor::from_parts(vec![q, n], out), vec![a, b])
    }

    /// Gathers rows along the first axis.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let t = &self.node(x)?.value;
        let b = t.shape()[0];
        if rows.is_empty() {
            return Err(Error::invalid("select_rows: empty row set"));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= b) {
            return Err(shape_err("select_rows", t.shape(), &[bad]));
        }
        let stride = t.numel() / b;
        let mut data = Vec::with_capacity(rows.len() * stride);
        for &r in rows {
            data.extend_from_slice(&t.data()[r * stride..(r + 1) * stride]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = rows.len();
        self.push(
            Op::SelectRows(rows.to_vec()),
            Tensor::from_parts(shape, data),
            vec![x],
        )
    }

    /// Mean over rows of `-ln softmax(logits)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = &self.node(logits)?.value;
        if t.shape().len() != 2 || t.shape()[0] != targets.len() {
            return Err(shape_err(
                "softmax_cross_entropy",
                t.shape(),
                &[targets.len()],
            ));
        }
        let (rows, classes) = (t.shape()[0], t.shape()[1]);
        if let Some(&bad) = targets.iter().find(|&&y| y >= classes) {
            return Err(Error::invalid(format!(
                "softmax_cross_entropy: target {bad} out of range for {classes} classes"
            )));
        }
        let mut probs = Vec::with_capacity(rows * classes);
        let mut loss = T::zero();
        for (r, &y) in targets.iter().enumerate() {
            let row = &t.data()[r * classes..(r + 1) * classes];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let denom: T = row.iter().map(|&v| (v - max).exp()).sum();
            let log_denom = denom.ln();
            loss = loss - (row[y] - max - log_denom);
            probs.extend(row.iter().map(|&v| (v - max).exp() / denom));
        }
        let loss = loss / T::from_usize(rows).unwrap();
        self.push(
            Op::SoftmaxCe {
                probs,
                targets: targets.to_vec(),
            },
            Tensor::scalar(loss),
            vec![logits],
        )
    }

    /// Mean over rows of `-ln(d[target] / Σ_j d[j])` on non-negative scores.
    pub fn dist_ratio_nll(&mut self, dist: Var, targets: &[usize]) -> Result<Var> {
        let t = &self.node(dist)?.value;
        if t.shape().len() != 2 || t.shape()[0] != targets.len() {
            return Err(shape_err("dist_ratio_nll", t.shape(), &[targets.len()]));
        }
        let (rows, classes) = (t.shape()[0], t.shape()[1]);
        let mut loss = T::zero();
        for (r, &y) in targets.iter().enumerate() {
            if y >= classes {
                return Err(Error::invalid(format!(
                    "dist_ratio_nll: target {y} out of range"
                )));
            }
            let row = &t.data()[r * classes..(r + 1) * classes];
            let total: T = row.iter().copied().sum();
            loss = loss + total.ln() - row[y].ln();
        }
        let loss = loss / T::from_usize(rows).unwrap();
        self.push(
            Op::DistRatioNll {
                targets: targets.to_vec(),
            },
            Tensor::scalar(loss),
            vec![dist],
        )
    }

    /// Hash of every piecewise-linear branch taken so far (ReLU masks and
    /// max-pool winners). Two forward passes with equal signatures lie on the
    /// same smooth piece of the function.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu => {
                    for v in node.value.data() {
                        (*v > T::zero()).hash(&mut h);
                    }
                }
                Op::MaxPool { arg } => arg.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    /// Accumulates `∂loss/∂θ` into the gradient slot of every parameter that
    /// reaches `loss`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        let root = self
            .node(loss)
            .map_err(|_| Error::Backward("loss is not recorded on this tape".into()))?;
        if root.value.numel() != 1 {
            return Err(Error::Backward(format!(
                "loss must be a scalar, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.index).map(|_| None).collect();
        grads[loss.index] = Some(vec![T::one()]);

        for idx in (0..=loss.index).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let want = |i: usize| self.nodes[node.inputs[i].index].tracked;
            let input = |i: usize| &self.nodes[node.inputs[i].index].value;
            let push = |grads: &mut Vec<Option<Vec<T>>>, i: usize, gi: Vec<T>| {
                accumulate(&mut grads[node.inputs[i].index], gi);
            };

            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => store.accumulate_grad(*id, &g)?,
                Op::Conv2d { geom, cols } => {
                    let (dx, dw) =
                        kernels::conv2d_backward(geom, input(1).data(), cols, &g, want(0));
                    if let Some(dx) = dx {
                        push(&mut grads, 0, dx);
                    }
                    if want(1) {
                        push(&mut grads, 1, dw);
                    }
                }
                Op::MaxPool { arg } => {
                    let mut dx = vec![T::zero(); input(0).numel()];
                    for (&a, &gv) in arg.iter().zip(&g) {
                        dx[a as usize] = dx[a as usize] + gv;
                    }
                    push(&mut grads, 0, dx);
                }
                Op::BatchNorm {
                    xhat,
                    inv_std,
                    batch_stats,
                } => {
                    let s = input(0).shape();
                    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                    let gamma = input(1).data();
                    let dbeta = kernels::channel_sums(n, c, hw, &g, None);
                    let dgamma = kernels::channel_sums(n, c, hw, &g, Some(xhat));
                    if want(0) {
                        let mut dx = vec![T::zero(); g.len()];
                        let m = T::from_usize(n * hw).unwrap();
                        for b in 0..n {
                            for ch in 0..c {
                                let off = (b * c + ch) * hw;
                                let k = gamma[ch] * inv_std[ch];
                                for i in off..off + hw {
                                    dx[i] = if *batch_stats {
                                        k * (g[i] - dbeta[ch] / m - xhat[i] * dgamma[ch] / m)
                                    } else {
                                        k * g[i]
                                    };
                                }
                            }
                        }
                        push(&mut grads, 0, dx);
                    }
                    if want(1) {
                        push(&mut grads, 1, dgamma);
                    }
                    if want(2) {
                        push(&mut grads, 2, dbeta);
                    }
                }
                Op::Relu => {
                    let dx = g
                        .iter()
                        .zip(node.value.data())
                        .map(|(&gv, &y)| if y > T::zero() { gv } else { T::zero() })
                        .collect();
                    push(&mut grads, 0, dx);
                }
                Op::Linear => {
                    let (x, w) = (input(0), input(1));
                    let (batch, inp, out) = (x.shape()[0], x.shape()[1], w.shape()[0]);
                    if want(0) {
                        let mut dx = vec![T::zero(); batch * inp];
                        T::gemm(
                            batch,
                            out,
                            inp,
                            T::one(),
                            &g,
                            (out as isize, 1),
                            w.data(),
                            (inp as isize, 1),
                            T::zero(),
                            &mut dx,
                            (inp as isize, 1),
                        );
                        push(&mut grads, 0, dx);
                    }
                    if want(1) {
                        let mut dw = vec![T::zero(); out * inp];
                        T::gemm(
                            out,
                            batch,
                            inp,
                            T::one(),
                            &g,
                            (1, out as isize),
                            x.data(),
                            (inp as isize, 1),
                            T::zero(),
                            &mut dw,
                            (inp as isize, 1),
                        );
                        push(&mut grads, 1, dw);
                    }
                    if want(2) {
                        let mut db = vec![T::zero(); out];
                        for row in g.chunks_exact(out) {
                            db.iter_mut().zip(row).for_each(|(d, &v)| *d = *d + v);
                        }
                        push(&mut grads, 2, db);
                    }
                }
                Op::Reshape => push(&mut grads, 0, g),
                Op::Add => {
                    if want(0) {
                        push(&mut grads, 0, g.clone());
                    }
                    if want(1) {
                        push(&mut grads, 1, g);
                    }
                }
                Op::Sub => {
                    if want(0) {
                        push(&mut grads, 0, g.clone());
                    }
                    if want(1) {
                        push(&mut grads, 1, g.iter().map(|&v| -v).collect());
                    }
                }
                Op::Scale(s) => push(&mut grads, 0, g.iter().map(|&v| v * *s).collect()),
                Op::MatMul => {
                    let (a, b) = (input(0), input(1));
                    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                    if want(0) {
                        let mut da = vec![T::zero(); m * k];
                        T::gemm(
                            m,
                            n,
                            k,
                            T::one(),
                            &g,
                            (n as isize, 1),
                            b.data(),
                            (1, n as isize),
                            T::zero(),
                            &mut da,
                            (k as isize, 1),
                        );
                        push(&mut grads, 0, da);
                    }
                    if want(1) {
                        let mut db = vec![T::zero(); k * n];
                        T::gemm(
                            k,
                            m,
                            n,
                            T::one(),
                            a.data(),
                            (1, k as isize),
                            &g,
                            (n as isize, 1),
                            T::zero(),
                            &mut db,
                            (n as isize, 1),
                        );
                        push(&mut grads, 1, db);
                    }
                }
                Op::SqDist => {
                    let (a, b) = (input(0), input(1));
                    let (q, n, d) = (a.shape()[0], b.shape()[0], a.shape()[1]);
                    let two = T::one() + T::one();
                    let mut da = vec![T::zero(); q * d];
                    let mut db = vec![T::zero(); n * d];
                    for i in 0..q {
                        for j in 0..n {
                            let gij = two * g[i * n + j];
                            for t in 0..d {
                                let diff = gij * (a.data()[i * d + t] - b.data()[j * d + t]);
                                da[i * d + t] = da[i * d + t] + diff;
                                db[j * d + t] = db[j * d + t] - diff;
                            }
                        }
                    }
                    if want(0) {
                        push(&mut grads, 0, da);
                    }
                    if want(1) {
                        push(&mut grads, 1, db);
                    }
                }
                Op::SelectRows(rows) => {
                    let x = input(0);
                    let stride = x.numel() / x.shape()[0];
                    let mut dx = vec![T::zero(); x.numel()];
                    for (k, &r) in rows.iter().enumerate() {
                        for t in 0..stride {
                            dx[r * stride + t] = dx[r * stride + t] + g[k * stride + t];
                        }
                    }
                    push(&mut grads, 0, dx);
                }
                Op::SoftmaxCe { probs, targets } => {
                    let rows = targets.len();
                    let classes = probs.len() / rows;
                    let k = g[0] / T::from_usize(rows).unwrap();
                    let mut dx: Vec<T> = probs.iter().map(|&p| p * k).collect();
                    for (r, &y) in targets.iter().enumerate() {
                        dx[r * classes + y] = dx[r * classes + y] - k;
                    }
                    push(&mut grads, 0, dx);
                }
                Op::DistRatioNll { targets } => {
                    let d = input(0);
                    let rows = targets.len();
                    let classes = d.numel() / rows;
                    let k = g[0] / T::from_usize(rows).unwrap();
                    let mut dx = vec![T::zero(); d.numel()];
                    for (r, &y) in targets.iter().enumerate() {
                        let row = &d.data()[r * classes..(r + 1) * classes];
                        let total: T = row.iter().copied().sum();
                        for j in 0..classes {
                            dx[r * classes + j] = k / total;
                        }
                        dx[r * classes + y] = dx[r * classes + y] - k / row[y];
                    }
                    push(&mut grads, 0, dx);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0])).unwrap();
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn uniform_logits_give_ln_n() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 5], &[0.3; 5])).unwrap();
        let l = tape.softmax_cross_entropy(x, &[2]).unwrap();
        assert!((tape.value(l).item() - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn conv_center_is_window_sum() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 5, 5], &[1.0; 25])).unwrap();
        let w = tape.constant(t(&[1, 1, 3, 3], &[1.0; 9])).unwrap();
        let y = tape.conv2d(x, w, 1).unwrap();
        let v = tape.value(y);
        assert_eq!(v.shape(), &[1, 1, 5, 5]);
        assert_eq!(v.data()[12], 9.0);
        // corners only see a 2x2 window
        assert_eq!(v.data()[0], 4.0);
    }

    #[test]
    fn maxpool_drops_odd_edge() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..9).map(f64::from).collect();
        let x = tape.constant(t(&[1, 1, 3, 3], &data)).unwrap();
        let y = tape.maxpool2x2(x).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[4.0]);
    }

    #[test]
    fn square_gradient() {
        let mut store = ParamStore::new();
        let w = store.add("w", t(&[1], &[3.0])).unwrap();
        let mut tape = Tape::new();
        let wv = tape.param(&store, w).unwrap();
        let wr = tape.reshape(wv, &[1, 1]).unwrap();
        let sq = tape.matmul(wr, wr).unwrap();
        tape.backward(sq, &mut store).unwrap();
        assert_eq!(store.get(w).grad.as_deref(), Some(&[6.0][..]));
    }

    #[test]
    fn inactive_relu_has_zero_gradient() {
        let mut store = ParamStore::new();
        let w = store.add("w", t(&[1], &[-1.0])).unwrap();
        let mut tape = Tape::new();
        let wv = tape.param(&store, w).unwrap();
        let y = tape.relu(wv).unwrap();
        tape.backward(y, &mut store).unwrap();
        assert_eq!(store.get(w).grad.as_deref(), Some(&[0.0][..]));
    }

    #[test]
    fn shape_errors_name_op_and_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0])).unwrap();
        let b = tape.constant(t(&[3], &[1.0, 2.0, 3.0])).unwrap();
        let err = tape.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("add") && msg.contains("[2]") && msg.contains("[3]"),
            "{msg}"
        );
    }

    #[test]
    fn non_finite_input_rejected() {
        let mut tape = Tape::new();
        assert!(matches!(
            tape.constant(t(&[2], &[1.0, f64::NAN])),
            Err(Error::NonFinite { .. })
        ));
        let x = tape.constant(t(&[1], &[1e300])).unwrap();
        assert!(matches!(
            tape.scale(x, 1e300),
            Err(Error::NonFinite { op: "scale" })
        ));
    }

    #[test]
    fn backward_rejects_non_scalar_and_foreign_loss() {
        let mut store = ParamStore::new();
        let w = store.add("w", t(&[2], &[1.0, 2.0])).unwrap();
        let mut tape = Tape::new();
        let wv = tape.param(&store, w).unwrap();
        assert!(matches!(
            tape.backward(wv, &mut store),
            Err(Error::Backward(_))
        ));

        let mut other = Tape::new();
        let s = other.constant(t(&[1], &[1.0])).unwrap();
        let err = tape.backward(s, &mut store).unwrap_err();
        assert!(err.to_string().contains("not recorded"), "{err}");
    }

    #[test]
    fn eval_batchnorm_uses_running_stats() {
        let mut store = ParamStore::new();
        let g = store.add("g", t(&[1], &[2.0])).unwrap();
        let b = store.add("b", t(&[1], &[0.5])).unwrap();
        let running = RunningStats {
            mean: vec![1.0],
            var: vec![4.0 - BN_EPS],
        };
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 1, 2], &[1.0, 3.0])).unwrap();
        let (gv, bv) = (
            tape.param(&store, g).unwrap(),
            tape.param(&store, b).unwrap(),
        );
        let y = tape
            .batchnorm2d(x, gv, bv, BatchNormMode::Eval { running: &running })
            .unwrap();
        let out = tape.value(y).data();
        assert!((out[0] - 0.5).abs() < 1e-12);
        assert!((out[1] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn train_batchnorm_updates_running_stats() {
        let mut store = ParamStore::new();
        let g = store.add("g", t(&[1], &[1.0])).unwrap();
        let b = store.add("b", t(&[1], &[0.0])).unwrap();
        let mut running = RunningStats::new(1);
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 1, 1, 1], &[1.0, 3.0])).unwrap();
        let (gv, bv) = (
            tape.param(&store, g).unwrap(),
            tape.param(&store, b).unwrap(),
        );
        tape.batchnorm2d(
            x,
            gv,
            bv,
            BatchNormMode::Train {
                running: &mut running,
                momentum: 0.1,
            },
        )
        .unwrap();
        assert!((running.mean[0] - 0.2).abs() < 1e-12);
        // unbiased batch variance is 2
        assert!((running.var[0] - (0.9 + 0.2)).abs() < 1e-12);
    }
}
