//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Graph`] records every executed operation in order. [`Graph::backward`]
//! walks the tape in exact reverse order and accumulates gradients additively;
//! callers reset them with [`Graph::zero_grads`].

use crate::error::{Error, Result};
use crate::ops;
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    AddBroadcast { x: Var, v: Var, axis: usize },
    MulBroadcast { x: Var, v: Var, axis: usize },
    MatMul(Var, Var),
    Reshape(Var),
    IndexSelect { x: Var, idx: Vec<Option<usize>> },
    Concat { parts: Vec<Var>, axis: usize },
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Ln { x: Var, floor: T },
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: T },
    MeanPool2(Var),
    ChannelStats(Var),
    Upsample(Var),
    SegmentMerge { tokens: Var, p: Var, assignment: Vec<usize>, m: usize },
    PairwiseDist { a: Var, b: Var },
    NormalizeAxis0(Var),
    Sum(Var),
    Mean(Var),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::AddBroadcast { .. } => "add_broadcast",
            Op::MulBroadcast { .. } => "mul_broadcast",
            Op::MatMul(..) => "matmul",
            Op::Reshape(..) => "reshape",
            Op::IndexSelect { .. } => "index_select",
            Op::Concat { .. } => "concat",
            Op::Sigmoid(..) => "sigmoid",
            Op::Relu(..) => "relu",
            Op::Exp(..) => "exp",
            Op::Ln { .. } => "ln",
            Op::Softmax(..) => "softmax_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::MeanPool2(..) => "mean_pool2x2",
            Op::ChannelStats(..) => "channel_stats",
            Op::Upsample(..) => "upsample_bilinear",
            Op::SegmentMerge { .. } => "merge_tokens",
            Op::PairwiseDist { .. } => "pairwise_distance",
            Op::NormalizeAxis0(..) => "normalize_axis0",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
        }
    }
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of executed operations with their values and gradients.
#[derive(Debug, Clone)]
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Names of the recorded operations in execution order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, rg)
    }

    /// Records a leaf; it is differentiated when `t.requires_grad()` is set.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf, rg)
    }

    /// Records a differentiable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Records a non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient of `v` as a tensor of the value's shape (zeros if never reached).
    pub fn grad_tensor(&self, v: Var) -> Tensor<T> {
        let shape = self.shape(v).to_vec();
        match self.grad(v) {
            Some(g) => Tensor::from_parts(shape, g.to_vec()),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    // ---- elementwise -------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::add(self.value(a), self.value(b))?;
        Ok(self.derived(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::sub(self.value(a), self.value(b))?;
        Ok(self.derived(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::mul(self.value(a), self.value(b))?;
        Ok(self.derived(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::lit(s);
        let out = ops::scale(self.value(a), s);
        self.derived(out, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let c = T::lit(c);
        let out = self.value(a).map(|v| v + c);
        self.derived(out, Op::AddScalar(a), &[a])
    }

    pub fn add_broadcast(&mut self, x: Var, v: Var, axis: usize) -> Result<Var> {
        let out = ops::add_broadcast(self.value(x), self.value(v), axis)?;
        Ok(self.derived(out, Op::AddBroadcast { x, v, axis }, &[x, v]))
    }

    pub fn mul_broadcast(&mut self, x: Var, v: Var, axis: usize) -> Result<Var> {
        let out = ops::mul_broadcast(self.value(x), self.value(v), axis)?;
        Ok(self.derived(out, Op::MulBroadcast { x, v, axis }, &[x, v]))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = ops::sigmoid(self.value(a));
        self.derived(out, Op::Sigmoid(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = ops::relu(self.value(a));
        self.derived(out, Op::Relu(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = ops::exp(self.value(a));
        self.derived(out, Op::Exp(a), &[a])
    }

    /// Natural log, clamping inputs below `floor` (gradient zero there).
    pub fn ln(&mut self, a: Var, floor: f64) -> Var {
        let floor = T::lit(floor);
        let out = ops::ln(self.value(a), floor);
        self.derived(out, Op::Ln { x: a, floor }, &[a])
    }

    // ---- linear algebra and layout ----------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.derived(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `x·W + b` for `x: [N×K]`, `w: [K×M]`, `b: [M]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => {
                let axis = self.shape(y).len() - 1;
                self.add_broadcast(y, b, axis)
            }
            None => Ok(y),
        }
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.derived(out, Op::Reshape(a), &[a]))
    }

    /// Swaps the last two axes of a rank-2 or rank-3 value.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (shape, idx) = ops::transpose_index(self.shape(a))?;
        self.index_select(a, idx, &shape)
    }

    /// Flat gather `out[j] = a[idx[j]]` (zero for `None`); gradient scatter-adds.
    pub fn index_select(&mut self, a: Var, idx: Vec<Option<usize>>, shape: &[usize]) -> Result<Var> {
        let out = ops::index_select(self.value(a), &idx, shape)?;
        Ok(self.derived(out, Op::IndexSelect { x: a, idx }, &[a]))
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        if rows.is_empty() {
            return Err(Error::contract("gather_rows", "empty index list"));
        }
        let (shape, idx) = ops::row_gather_index(self.shape(a), rows)?;
        self.index_select(a, idx, &shape)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = ops::concat(&values, axis)?;
        Ok(self.derived(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    // ---- normalizations and reductions ------------------------------------

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = ops::softmax_rows(self.value(a));
        self.derived(out, Op::Softmax(a), &[a])
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let eps = T::lit(eps);
        let out = ops::layer_norm(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.derived(out, Op::LayerNorm { x, gamma, beta, eps }, &[x, gamma, beta]))
    }

    pub fn mean_pool2x2(&mut self, a: Var) -> Result<Var> {
        let out = ops::mean_pool2x2(self.value(a))?;
        Ok(self.derived(out, Op::MeanPool2(a), &[a]))
    }

    pub fn channel_stats(&mut self, a: Var) -> Result<Var> {
        let out = ops::channel_stats(self.value(a))?;
        Ok(self.derived(out, Op::ChannelStats(a), &[a]))
    }

    pub fn upsample_bilinear(&mut self, a: Var, h2: usize, w2: usize) -> Result<Var> {
        let out = ops::upsample_bilinear(self.value(a), h2, w2)?;
        Ok(self.derived(out, Op::Upsample(a), &[a]))
    }

    /// Softmax-weighted per-cluster token average; see [`ops::segment_merge`].
    pub fn segment_merge(&mut self, tokens: Var, p: Var, assignment: &[usize], m: usize) -> Result<Var> {
        let out = ops::segment_merge(self.value(tokens), self.value(p), assignment, m)?;
        Ok(self.derived(
            out,
            Op::SegmentMerge {
                tokens,
                p,
                assignment: assignment.to_vec(),
                m,
            },
            &[tokens, p],
        ))
    }

    pub fn pairwise_distance(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        let eps = T::lit(eps);
        let out = ops::pairwise_distance(self.value(a), self.value(b), eps)?;
        Ok(self.derived(out, Op::PairwiseDist { a, b }, &[a, b]))
    }

    pub fn normalize_axis0(&mut self, a: Var) -> Var {
        let out = ops::normalize_axis0(self.value(a));
        self.derived(out, Op::NormalizeAxis0(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.derived(out, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Tensor::scalar(v.sum() / T::lit(v.numel() as f64));
        self.derived(out, Op::Mean(a), &[a])
    }

    // ---- reverse pass ------------------------------------------------------

    fn accumulate(&mut self, v: Var, delta: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => g.iter_mut().zip(delta).for_each(|(a, d)| *a = *a + d),
            slot @ None => *slot = Some(delta),
        }
    }

    /// Accumulates d(loss)/d(node) into every differentiable node reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.accumulate(loss, vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backward_op(i, &op, &g);
            self.nodes[i].op = op;
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn val(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn backward_op(&mut self, out: usize, op: &Op<T>, g: &[T]) {
        let y = self.nodes[out].value.data().to_vec();
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(a, g.to_vec());
                self.accumulate(b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(a, g.to_vec());
                self.accumulate(b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                let ga = g.iter().zip(self.val(b)).map(|(&g, &b)| g * b).collect();
                let gb = g.iter().zip(self.val(a)).map(|(&g, &a)| g * a).collect();
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::Scale(a, s) => self.accumulate(a, g.iter().map(|&v| v * s).collect()),
            Op::AddScalar(a) => self.accumulate(a, g.to_vec()),
            Op::AddBroadcast { x, v, axis } => {
                let (dim, inner) = ops::axis_layout(self.shape(x), axis);
                let mut gv = vec![T::zero(); dim];
                for (i, &gi) in g.iter().enumerate() {
                    let k = (i / inner) % dim;
                    gv[k] = gv[k] + gi;
                }
                self.accumulate(x, g.to_vec());
                self.accumulate(v, gv);
            }
            Op::MulBroadcast { x, v, axis } => {
                let (dim, inner) = ops::axis_layout(self.shape(x), axis);
                let (xd, vd) = (self.val(x), self.val(v));
                let mut gv = vec![T::zero(); dim];
                let mut gx = Vec::with_capacity(g.len());
                for (i, &gi) in g.iter().enumerate() {
                    let k = (i / inner) % dim;
                    gv[k] = gv[k] + gi * xd[i];
                    gx.push(gi * vd[k]);
                }
                self.accumulate(x, gx);
                self.accumulate(v, gv);
            }
            Op::MatMul(a, b) => {
                let (batches, m, k) = ops::mat_dims(self.shape(a)).expect("checked in forward");
                let n = self.shape(b)[self.shape(b).len() - 1];
                let (ad, bd) = (self.val(a), self.val(b));
                let mut ga = vec![T::zero(); ad.len()];
                let mut gb = vec![T::zero(); bd.len()];
                for bt in 0..batches {
                    let (ao, bo, go) = (bt * m * k, bt * k * n, bt * m * n);
                    for i in 0..m {
                        let grow = &g[go + i * n..go + (i + 1) * n];
                        for p in 0..k {
                            let brow = &bd[bo + p * n..bo + (p + 1) * n];
                            let mut acc = T::zero();
                            for (&gv, &bv) in grow.iter().zip(brow) {
                                acc = acc + gv * bv;
                            }
                            ga[ao + i * k + p] = acc;
                            let av = ad[ao + i * k + p];
                            if av != T::zero() {
                                let gbrow = &mut gb[bo + p * n..bo + (p + 1) * n];
                                for (o, &gv) in gbrow.iter_mut().zip(grow) {
                                    *o = *o + av * gv;
                                }
                            }
                        }
                    }
                }
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::Reshape(a) => self.accumulate(a, g.to_vec()),
            Op::IndexSelect { x, ref idx } => {
                let mut gx = vec![T::zero(); self.value(x).numel()];
                for (&gi, i) in g.iter().zip(idx) {
                    if let Some(i) = *i {
                        gx[i] = gx[i] + gi;
                    }
                }
                self.accumulate(x, gx);
            }
            Op::Concat { ref parts, axis } => {
                let outer: usize = self.shape(parts[0])[..axis].iter().product();
                let chunks: Vec<usize> = parts.iter().map(|&p| self.value(p).numel() / outer).collect();
                let stride: usize = chunks.iter().sum();
                for (pi, &p) in parts.iter().enumerate() {
                    let start: usize = chunks[..pi].iter().sum();
                    let mut gp = Vec::with_capacity(chunks[pi] * outer);
                    for o in 0..outer {
                        let base = o * stride + start;
                        gp.extend_from_slice(&g[base..base + chunks[pi]]);
                    }
                    self.accumulate(p, gp);
                }
            }
            Op::Sigmoid(a) => {
                let ga = g.iter().zip(&y).map(|(&g, &s)| g * s * (T::one() - s)).collect();
                self.accumulate(a, ga);
            }
            Op::Relu(a) => {
                let ga = g
                    .iter()
                    .zip(self.val(a))
                    .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                    .collect();
                self.accumulate(a, ga);
            }
            Op::Exp(a) => {
                let ga = g.iter().zip(&y).map(|(&g, &e)| g * e).collect();
                self.accumulate(a, ga);
            }
            Op::Ln { x, floor } => {
                let gx = g
                    .iter()
                    .zip(self.val(x))
                    .map(|(&g, &v)| if v > floor { g / v } else { T::zero() })
                    .collect();
                self.accumulate(x, gx);
            }
            Op::Softmax(a) => {
                let width = *self.shape(a).last().expect("rank >= 1");
                let mut ga = Vec::with_capacity(g.len());
                for (grow, yrow) in g.chunks(width).zip(y.chunks(width)) {
                    let dot: T = grow.iter().zip(yrow).map(|(&g, &y)| g * y).sum();
                    ga.extend(grow.iter().zip(yrow).map(|(&g, &y)| y * (g - dot)));
                }
                self.accumulate(a, ga);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let width = *self.shape(x).last().expect("rank >= 1");
                let (xhat, inv) = ops::layer_norm_core(self.val(x), width, eps);
                let gam = self.val(gamma).to_vec();
                let n = T::lit(width as f64);
                let mut gg = vec![T::zero(); width];
                let mut gb = vec![T::zero(); width];
                let mut gx = Vec::with_capacity(g.len());
                for (r, (grow, xrow)) in g.chunks(width).zip(xhat.chunks(width)).enumerate() {
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for c in 0..width {
                        gg[c] = gg[c] + grow[c] * xrow[c];
                        gb[c] = gb[c] + grow[c];
                        let d = grow[c] * gam[c];
                        s1 = s1 + d;
                        s2 = s2 + d * xrow[c];
                    }
                    for c in 0..width {
                        let d = grow[c] * gam[c];
                        gx.push(inv[r] / n * (n * d - s1 - xrow[c] * s2));
                    }
                }
                self.accumulate(x, gx);
                self.accumulate(gamma, gg);
                self.accumulate(beta, gb);
            }
            Op::MeanPool2(a) => {
                let (c, h, w) = ops::chw("mean_pool2x2", self.shape(a)).expect("checked in forward");
                let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
                let mut ga = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    for r in 0..h {
                        for q in 0..w {
                            let (i, j) = (r / 2, q / 2);
                            let rows = (2 * i + 2).min(h) - 2 * i;
                            let cols = (2 * j + 2).min(w) - 2 * j;
                            let cnt = T::lit((rows * cols) as f64);
                            ga[(ch * h + r) * w + q] = g[(ch * ho + i) * wo + j] / cnt;
                        }
                    }
                }
                self.accumulate(a, ga);
            }
            Op::ChannelStats(a) => {
                let (c, h, w) = ops::chw("channel_stats", self.shape(a)).expect("checked in forward");
                let plane = h * w;
                let n = T::lit(plane as f64);
                let xd = self.val(a);
                let mut ga = vec![T::zero(); xd.len()];
                for ch in 0..c {
                    let vals = &xd[ch * plane..(ch + 1) * plane];
                    let (gm, gmax, gvar) = (g[ch * 3], g[ch * 3 + 1], g[ch * 3 + 2]);
                    let mean = y[ch * 3];
                    let max = y[ch * 3 + 1];
                    let arg = vals.iter().position(|&v| v == max).unwrap_or(0);
                    for (i, &v) in vals.iter().enumerate() {
                        let two = T::lit(2.0);
                        ga[ch * plane + i] = gm / n + gvar * two * (v - mean) / n;
                    }
                    ga[ch * plane + arg] = ga[ch * plane + arg] + gmax;
                }
                self.accumulate(a, ga);
            }
            Op::Upsample(a) => {
                let (c, h, w) = ops::chw("upsample_bilinear", self.shape(a)).expect("checked in forward");
                let shape = self.nodes[out].value.shape().to_vec();
                let (h2, w2) = (shape[1], shape[2]);
                let mut ga = vec![T::zero(); c * h * w];
                if h2 == h && w2 == w {
                    ga.copy_from_slice(g);
                } else {
                    let rows = ops::bilinear_taps(h, h2);
                    let cols = ops::bilinear_taps(w, w2);
                    for ch in 0..c {
                        let base = ch * h * w;
                        for (oi, &(r0, r1, fr)) in rows.iter().enumerate() {
                            let (fr, gr) = (T::lit(fr), T::lit(1.0 - fr));
                            for (oj, &(c0, c1, fc)) in cols.iter().enumerate() {
                                let (fc, gc) = (T::lit(fc), T::lit(1.0 - fc));
                                let gv = g[(ch * h2 + oi) * w2 + oj];
                                ga[base + r0 * w + c0] = ga[base + r0 * w + c0] + gv * gr * gc;
                                ga[base + r0 * w + c1] = ga[base + r0 * w + c1] + gv * gr * fc;
                                ga[base + r1 * w + c0] = ga[base + r1 * w + c0] + gv * fr * gc;
                                ga[base + r1 * w + c1] = ga[base + r1 * w + c1] + gv * fr * fc;
                            }
                        }
                    }
                }
                self.accumulate(a, ga);
            }
            Op::SegmentMerge {
                tokens,
                p,
                ref assignment,
                m,
            } => {
                let c = self.shape(tokens)[1];
                let (w, sums) = ops::segment_weights(self.val(p), assignment, m);
                let xd = self.val(tokens);
                let mut gx = vec![T::zero(); xd.len()];
                let mut gp = vec![T::zero(); assignment.len()];
                for (j, &a) in assignment.iter().enumerate() {
                    let alpha = w[j] / sums[a];
                    let ga = &g[a * c..(a + 1) * c];
                    let ya = &y[a * c..(a + 1) * c];
                    let xj = &xd[j * c..(j + 1) * c];
                    let mut dot = T::zero();
                    for ch in 0..c {
                        gx[j * c + ch] = alpha * ga[ch];
                        dot = dot + ga[ch] * (xj[ch] - ya[ch]);
                    }
                    gp[j] = alpha * dot;
                }
                self.accumulate(tokens, gx);
                self.accumulate(p, gp);
            }
            Op::PairwiseDist { a, b, .. } => {
                let (m, c) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[0];
                let (ad, bd) = (self.val(a), self.val(b));
                let mut ga = vec![T::zero(); ad.len()];
                let mut gb = vec![T::zero(); bd.len()];
                for i in 0..m {
                    for j in 0..n {
                        let coef = g[i * n + j] / y[i * n + j];
                        if coef == T::zero() {
                            continue;
                        }
                        for ch in 0..c {
                            let d = coef * (ad[i * c + ch] - bd[j * c + ch]);
                            ga[i * c + ch] = ga[i * c + ch] + d;
                            gb[j * c + ch] = gb[j * c + ch] - d;
                        }
                    }
                }
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::NormalizeAxis0(a) => {
                let xd = self.val(a);
                let k = self.shape(a)[0];
                let cols = xd.len() / k;
                let mut ga = vec![T::zero(); xd.len()];
                for col in 0..cols {
                    let total: T = (0..k).map(|r| xd[r * cols + col]).sum();
                    let dot: T = (0..k).map(|r| g[r * cols + col] * y[r * cols + col]).sum();
                    for r in 0..k {
                        ga[r * cols + col] = (g[r * cols + col] - dot) / total;
                    }
                }
                self.accumulate(a, ga);
            }
            Op::Sum(a) => {
                let n = self.value(a).numel();
                self.accumulate(a, vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(a).numel();
                self.accumulate(a, vec![g[0] / T::lit(n as f64); n]);
            }
        }
    }
}
