//! Whole-tensor reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value. [`Tape::backward`]
//! walks the nodes in reverse, propagating vector-Jacobian products, and
//! accumulates the gradients of parameter leaves into a [`ParamStore`].

use std::collections::VecDeque;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::ops::{self, GeluKind};
use crate::sparse::CsrMatrix;
use crate::tensor::{ParamId, ParamStore, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Reshape(Var),
    Gather(Var, Arc<[usize]>),
    Conv2d(Var, Var),
    Softmax(Var),
    Gelu(Var, GeluKind),
    Sigmoid(Var),
    Cosine(Var),
    MaskedMatMul { rel: Var, x: Var, mask: Vec<bool> },
    CrossEntropy { logits: Var, labels: Arc<[usize]> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// How sparsity masks are obtained during a forward pass.
///
/// Gradient checks record the masks of a reference pass and replay them while
/// probing perturbed inputs, so that finite differences see the same
/// piecewise-linear branch that the analytic backward differentiates.
#[derive(Debug, Default)]
enum MaskMode {
    #[default]
    Live,
    Record(Vec<Vec<bool>>),
    Replay(VecDeque<Vec<bool>>),
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    masks: MaskMode,
}

/// Gradients of a scalar loss with respect to every node on a tape.
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
}

impl Grads {
    /// Gradient with respect to `v`; `None` if the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Splits a rank-2 or rank-3 shape into `(batch, rows, cols)`.
fn batch_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [r, c] => Ok((1, r, c)),
        [b, r, c] => Ok((b, r, c)),
        _ => Err(Error::invalid(
            op,
            format!("expected rank 2 or 3, got {shape:?}"),
        )),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that remembers every sparsity mask it resolves.
    pub fn recording() -> Self {
        Self {
            nodes: Vec::new(),
            masks: MaskMode::Record(Vec::new()),
        }
    }

    /// A tape that hands out previously recorded masks in order.
    pub fn replaying(masks: Vec<Vec<bool>>) -> Self {
        Self {
            nodes: Vec::new(),
            masks: MaskMode::Replay(masks.into()),
        }
    }

    /// Masks captured by a [`Tape::recording`] tape.
    pub fn recorded_masks(&self) -> &[Vec<bool>] {
        match &self.masks {
            MaskMode::Record(m) => m,
            _ => &[],
        }
    }

    /// Returns the mask to use for a sparsification whose live mask is `computed`.
    pub fn resolve_mask(&mut self, computed: Vec<bool>) -> Vec<bool> {
        match &mut self.masks {
            MaskMode::Live => computed,
            MaskMode::Record(log) => {
                log.push(computed.clone());
                computed
            }
            MaskMode::Replay(queue) => {
                let mask = queue.pop_front().expect("mask replay exhausted");
                assert_eq!(mask.len(), computed.len(), "replayed mask has wrong size");
                mask
            }
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Records an input tensor. Gradients with respect to it are available
    /// through [`Grads::wrt`].
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Records the current value of a parameter; its gradient flows back into
    /// the store on [`Tape::backward`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let t = store.tensor(id);
        let value = Tensor::from_parts(t.shape().to_vec(), t.data().to_vec());
        self.push(value, Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (p, q, s) = ops::check_matmul(self.shape(a), self.shape(b))?;
        let data = ops::matmul_kernel(self.value(a).data(), self.value(b).data(), p, q, s);
        Ok(self.push(Tensor::from_parts(vec![p, s], data), Op::MatMul(a, b)))
    }

    /// Batched product `[B×p×q] · [B×q×s] → [B×p×s]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (&[ba, p, q], &[bb, q2, s]) = (sa, sb) else {
            return Err(Error::shape("bmm", sa, sb));
        };
        if ba != bb || q != q2 {
            return Err(Error::shape("bmm", sa, sb));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(ba * p * s);
        for i in 0..ba {
            data.extend(ops::matmul_kernel(
                &av[i * p * q..(i + 1) * p * q],
                &bv[i * q * s..(i + 1) * q * s],
                p,
                q,
                s,
            ));
        }
        Ok(self.push(
            Tensor::from_parts(vec![ba, p, s], data),
            Op::BatchMatMul(a, b),
        ))
    }

    /// Swaps the last two axes of a rank-2 or rank-3 tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (b, p, q) = batch_dims("transpose", &shape)?;
        let data = ops::transpose_kernel(self.value(a).data(), b, p, q);
        let mut out = shape;
        let n = out.len();
        out.swap(n - 1, n - 2);
        Ok(self.push(Tensor::from_parts(out, data), Op::Transpose(a)))
    }

    fn zip_same(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(op, ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(Tensor::from_parts(ta.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    /// Elementwise product of equal-shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("hadamard", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|v| v * s);
        self.push(t, Op::Scale(a, s))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        Ok(self.push(t, Op::Reshape(a)))
    }

    /// `out[i] = a[index[i]]`, reshaped to `shape`.
    pub fn gather(
        &mut self,
        a: Var,
        index: Arc<[usize]>,
        shape: impl Into<Vec<usize>>,
    ) -> Result<Var> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != index.len() {
            return Err(Error::invalid(
                "gather",
                format!("{} indices cannot fill shape {shape:?}", index.len()),
            ));
        }
        let src = self.value(a).data();
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(Error::invalid(
                "gather",
                format!("index {bad} out of range {}", src.len()),
            ));
        }
        let data = index.iter().map(|&i| src[i]).collect();
        Ok(self.push(Tensor::from_parts(shape, data), Op::Gather(a, index)))
    }

    pub fn conv2d(&mut self, x: Var, w: Var) -> Result<Var> {
        let (cin, cout, h, wd, k) = ops::check_conv(self.shape(x), self.shape(w))?;
        let data = ops::conv2d_kernel(
            self.value(x).data(),
            self.value(w).data(),
            cin,
            cout,
            h,
            wd,
            k,
        );
        Ok(self.push(
            Tensor::from_parts(vec![cout, h, wd], data),
            Op::Conv2d(x, w),
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let t = ops::softmax_rows(self.value(a))?;
        Ok(self.push(t, Op::Softmax(a)))
    }

    pub fn gelu(&mut self, a: Var, kind: GeluKind) -> Var {
        let t = ops::gelu(self.value(a), kind);
        self.push(t, Op::Gelu(a, kind))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = ops::sigmoid(self.value(a));
        self.push(t, Op::Sigmoid(a))
    }

    /// Pairwise cosine similarity of the rows of `[K×D]` (or of each batch
    /// entry of `[B×K×D]`). A zero row relates to itself with 1 and to every
    /// other row with 0.
    pub fn cosine_relation(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (b, k, d) = batch_dims("cosine_relation", &shape)?;
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(b * k * k);
        for i in 0..b {
            data.extend(cosine_kernel(&xv[i * k * d..(i + 1) * k * d], k, d));
        }
        let mut out = shape;
        let n = out.len();
        out[n - 1] = k;
        Ok(self.push(Tensor::from_parts(out, data), Op::Cosine(x)))
    }

    /// `(rel ⊙ mask) · x` evaluated through compressed-row storage.
    ///
    /// The mask is a constant: no gradient flows through the thresholding.
    pub fn masked_matmul(&mut self, rel: Var, x: Var, mask: Vec<bool>) -> Result<Var> {
        let (sr, sx) = (self.shape(rel).to_vec(), self.shape(x).to_vec());
        let (b, k, k2) = batch_dims("node_update", &sr)?;
        let (bx, kx, d) = batch_dims("node_update", &sx)?;
        if k != k2 || b != bx || k != kx || sr.len() != sx.len() {
            return Err(Error::shape("node_update", &sr, &sx));
        }
        if mask.len() != b * k * k {
            return Err(Error::invalid(
                "node_update",
                "mask size does not match relation",
            ));
        }
        let (rv, xv) = (self.value(rel).data(), self.value(x).data());
        let mut data = Vec::with_capacity(b * k * d);
        for i in 0..b {
            let r = i * k * k..(i + 1) * k * k;
            let csr = CsrMatrix::from_masked(&rv[r.clone()], &mask[r], k, k);
            data.extend(csr.matmul_dense(&xv[i * k * d..(i + 1) * k * d], d));
        }
        Ok(self.push(
            Tensor::from_parts(sx, data),
            Op::MaskedMatMul { rel, x, mask },
        ))
    }

    /// Mean per-pixel cross-entropy of `logits[classes×H×W]` against `labels[H·W]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: Arc<[usize]>) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let &[classes, h, w] = shape.as_slice() else {
            return Err(Error::invalid(
                "cross_entropy",
                format!("logits shape {shape:?}"),
            ));
        };
        let pixels = h * w;
        if labels.len() != pixels {
            return Err(Error::invalid(
                "cross_entropy",
                format!("{} labels for {pixels} pixels", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid(
                "cross_entropy",
                format!("label {bad} ≥ {classes} classes"),
            ));
        }
        let lv = self.value(logits).data();
        let mut total = 0.0;
        for (p, &label) in labels.iter().enumerate() {
            let max = (0..classes)
                .map(|c| lv[c * pixels + p])
                .fold(f64::NEG_INFINITY, f64::max);
            let lse = (0..classes)
                .map(|c| (lv[c * pixels + p] - max).exp())
                .sum::<f64>()
                .ln()
                + max;
            total += lse - lv[label * pixels + p];
        }
        let loss = total / pixels as f64;
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, labels }))
    }

    /// Gradients of `loss` with respect to every node, without touching any store.
    pub fn gradients(&self, loss: Var) -> Result<Grads> {
        self.run_backward(loss, None)
    }

    /// Back-propagates from a scalar `loss` and accumulates parameter
    /// gradients into `store` (repeated calls add up).
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<Grads> {
        self.run_backward(loss, Some(store))
    }

    fn run_backward(&self, loss: Var, mut store: Option<&mut ParamStore>) -> Result<Grads> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            match node.op {
                Op::Leaf => continue,
                Op::Param(id) => {
                    if let (Some(store), Some(g)) = (store.as_deref_mut(), &grads[idx]) {
                        store.accumulate_grad(id, g);
                    }
                    continue;
                }
                _ => {}
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop(node, &g, &mut grads);
        }
        Ok(Grads { grads })
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let shape = |v: Var| self.nodes[v.0].value.shape();
        match &node.op {
            Op::Leaf | Op::Param(_) => unreachable!(),
            &Op::MatMul(a, b) => {
                let (p, q) = (shape(a)[0], shape(a)[1]);
                let s = shape(b)[1];
                accumulate(grads, a, ops::matmul_nt(g, val(b), p, s, q));
                accumulate(grads, b, ops::matmul_tn(val(a), g, p, q, s));
            }
            &Op::BatchMatMul(a, b) => {
                let (bs, p, q) = (shape(a)[0], shape(a)[1], shape(a)[2]);
                let s = shape(b)[2];
                let (av, bv) = (val(a), val(b));
                let mut da = Vec::with_capacity(av.len());
                let mut db = Vec::with_capacity(bv.len());
                for i in 0..bs {
                    let gi = &g[i * p * s..(i + 1) * p * s];
                    let ai = &av[i * p * q..(i + 1) * p * q];
                    let bi = &bv[i * q * s..(i + 1) * q * s];
                    da.extend(ops::matmul_nt(gi, bi, p, s, q));
                    db.extend(ops::matmul_tn(ai, gi, p, q, s));
                }
                accumulate(grads, a, da);
                accumulate(grads, b, db);
            }
            &Op::Transpose(a) => {
                let (b, p, q) = batch_dims("transpose", shape(a)).unwrap();
                accumulate(grads, a, ops::transpose_kernel(g, b, q, p));
            }
            &Op::Add(a, b) => {
                accumulate(grads, a, g.to_vec());
                accumulate(grads, b, g.to_vec());
            }
            &Op::Sub(a, b) => {
                accumulate(grads, a, g.to_vec());
                accumulate(grads, b, g.iter().map(|v| -v).collect());
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (val(a), val(b));
                accumulate(grads, a, g.iter().zip(bv).map(|(g, y)| g * y).collect());
                accumulate(grads, b, g.iter().zip(av).map(|(g, x)| g * x).collect());
            }
            &Op::Scale(a, s) => accumulate(grads, a, g.iter().map(|v| v * s).collect()),
            &Op::Sum(a) => accumulate(grads, a, vec![g[0]; val(a).len()]),
            &Op::Reshape(a) => accumulate(grads, a, g.to_vec()),
            Op::Gather(a, index) => {
                let mut da = vec![0.0; val(*a).len()];
                for (&i, gv) in index.iter().zip(g) {
                    da[i] += gv;
                }
                accumulate(grads, *a, da);
            }
            &Op::Conv2d(x, w) => {
                let (dx, dw) = conv2d_backward(val(x), val(w), g, shape(x), shape(w));
                accumulate(grads, x, dx);
                accumulate(grads, w, dw);
            }
            &Op::Softmax(a) => {
                let y = node.value.data();
                let cols = *shape(a).last().unwrap();
                let mut da = vec![0.0; y.len()];
                for ((yr, gr), dr) in y
                    .chunks_exact(cols)
                    .zip(g.chunks_exact(cols))
                    .zip(da.chunks_exact_mut(cols))
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for ((d, y), g) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = y * (g - dot);
                    }
                }
                accumulate(grads, a, da);
            }
            &Op::Gelu(a, kind) => {
                let d = val(a)
                    .iter()
                    .zip(g)
                    .map(|(&x, g)| g * ops::gelu_derivative(x, kind))
                    .collect();
                accumulate(grads, a, d);
            }
            &Op::Sigmoid(a) => {
                let d = node
                    .value
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(y, g)| g * y * (1.0 - y))
                    .collect();
                accumulate(grads, a, d);
            }
            &Op::Cosine(x) => {
                let (b, k, d) = batch_dims("cosine_relation", shape(x)).unwrap();
                let (xv, rv) = (val(x), node.value.data());
                let mut dx = Vec::with_capacity(xv.len());
                for i in 0..b {
                    dx.extend(cosine_backward(
                        &xv[i * k * d..(i + 1) * k * d],
                        &rv[i * k * k..(i + 1) * k * k],
                        &g[i * k * k..(i + 1) * k * k],
                        k,
                        d,
                    ));
                }
                accumulate(grads, x, dx);
            }
            Op::MaskedMatMul { rel, x, mask } => {
                let (b, k, d) = batch_dims("node_update", shape(*x)).unwrap();
                let (rv, xv) = (val(*rel), val(*x));
                let mut drel = Vec::with_capacity(rv.len());
                let mut dx = Vec::with_capacity(xv.len());
                for i in 0..b {
                    let r = i * k * k..(i + 1) * k * k;
                    let gi = &g[i * k * d..(i + 1) * k * d];
                    let xi = &xv[i * k * d..(i + 1) * k * d];
                    let dense = ops::matmul_nt(gi, xi, k, d, k);
                    drel.extend(
                        dense
                            .iter()
                            .zip(&mask[r.clone()])
                            .map(|(&v, &m)| if m { v } else { 0.0 }),
                    );
                    let csr = CsrMatrix::from_masked(&rv[r.clone()], &mask[r], k, k);
                    dx.extend(csr.transpose_matmul_dense(gi, d));
                }
                accumulate(grads, *rel, drel);
                accumulate(grads, *x, dx);
            }
            Op::CrossEntropy { logits, labels } => {
                let lv = val(*logits);
                let pixels = labels.len();
                let classes = lv.len() / pixels;
                let scale = g[0] / pixels as f64;
                let mut dl = vec![0.0; lv.len()];
                for (p, &label) in labels.iter().enumerate() {
                    let max = (0..classes)
                        .map(|c| lv[c * pixels + p])
                        .fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = (0..classes).map(|c| (lv[c * pixels + p] - max).exp()).sum();
                    for c in 0..classes {
                        let prob = (lv[c * pixels + p] - max).exp() / z;
                        let target = if c == label { 1.0 } else { 0.0 };
                        dl[c * pixels + p] = scale * (prob - target);
                    }
                }
                accumulate(grads, *logits, dl);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>) {
    match &mut grads[v.0] {
        Some(g) => {
            for (g, d) in g.iter_mut().zip(&delta) {
                *g += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

pub(crate) fn row_norms(x: &[f64], k: usize, d: usize) -> Vec<f64> {
    (0..k)
        .map(|i| {
            x[i * d..(i + 1) * d]
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

/// Cosine relation of one `[k×d]` node matrix.
pub(crate) fn cosine_kernel(x: &[f64], k: usize, d: usize) -> Vec<f64> {
    let norms = row_norms(x, k, d);
    let mut out = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            out[i * k + j] = if i == j {
                1.0
            } else if norms[i] == 0.0 || norms[j] == 0.0 {
                0.0
            } else {
                let dot: f64 = x[i * d..(i + 1) * d]
                    .iter()
                    .zip(&x[j * d..(j + 1) * d])
                    .map(|(a, b)| a * b)
                    .sum();
                (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0)
            };
        }
    }
    out
}

fn cosine_backward(x: &[f64], r: &[f64], g: &[f64], k: usize, d: usize) -> Vec<f64> {
    let norms = row_norms(x, k, d);
    let mut dx = vec![0.0; k * d];
    for i in 0..k {
        let ni = norms[i];
        if ni == 0.0 {
            continue;
        }
        let mut radial = 0.0;
        let dst = &mut dx[i * d..(i + 1) * d];
        for j in 0..k {
            if j == i || norms[j] == 0.0 {
                continue;
            }
            let w = g[i * k + j] + g[j * k + i];
            radial += g[i * k + j] * r[i * k + j] + g[j * k + i] * r[j * k + i];
            let nj = norms[j];
            for (o, xj) in dst.iter_mut().zip(&x[j * d..(j + 1) * d]) {
                *o += w * xj / (ni * nj);
            }
        }
        for (o, xi) in dst.iter_mut().zip(&x[i * d..(i + 1) * d]) {
            *o -= radial * xi / (ni * ni);
        }
    }
    dx
}

fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    g: &[f64],
    xs: &[usize],
    ws: &[usize],
) -> (Vec<f64>, Vec<f64>) {
    let (cin, h, wd) = (xs[0], xs[1], xs[2]);
    let (cout, k) = (ws[0], ws[2]);
    let hw = h * wd;
    if k == 1 {
        return (
            ops::matmul_tn(w, g, cout, cin, hw),
            ops::matmul_nt(g, x, cout, hw, cin),
        );
    }
    let pad = (k - 1) / 2;
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    for co in 0..cout {
        let gco = &g[co * hw..(co + 1) * hw];
        for ci in 0..cin {
            let xci = &x[ci * hw..(ci + 1) * hw];
            for ky in 0..k {
                for kx in 0..k {
                    let widx = ((co * cin + ci) * k + ky) * k + kx;
                    let wv = w[widx];
                    let (y0, y1) = ops::valid_range(ky, pad, h);
                    let (x0, x1) = ops::valid_range(kx, pad, wd);
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let sy = y + ky - pad;
                        let grow = &gco[y * wd + x0..y * wd + x1];
                        let off = sy * wd + kx;
                        for (xo, gv) in (x0..x1).zip(grow) {
                            let src = off + xo - pad;
                            acc += gv * xci[src];
                            dx[ci * hw + src] += wv * gv;
                        }
                    }
                    dw[widx] += acc;
                }
            }
        }
    }
    (dx, dw)
}
