//! Reverse-mode tape over [`Tensor`] values.
//!
//! A [`Tape`] records every operation of one forward pass. `backward` walks
//! it in reverse, accumulating parameter gradients into a [`ParamStore`].
//! Nodes that depend on no parameter (and were not explicitly marked) carry
//! no gradient and are skipped.

use std::sync::Arc;

use super::{matmul, ParamId, ParamStore, Real, Tensor, LAYER_NORM_EPS};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Scale(Var, T),
    Silu(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Tensor<T>,
        inv_std: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    GatherRows(Var, Arc<[usize]>),
    ScatterAddRows(Var, Arc<[usize]>),
    RepeatRow(Var),
    MulColumn(Var, Var),
    SegmentSoftmax(Var, Arc<[usize]>),
    /// Scalar loss whose gradient w.r.t. `pred` was computed during forward.
    Loss { pred: Var, grad: Tensor<T> },
    SumScalars(Vec<Var>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
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

    pub fn clear(&mut self) {
        self.nodes.clear();
        self.grads.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn take_value(&mut self, v: Var) -> Tensor<T> {
        std::mem::take(&mut self.nodes[v.0].value)
    }

    /// Gradient of the last `backward` loss w.r.t. `v`, if it was tracked.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert!(value.is_finite(), "non-finite tensor produced on tape");
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input, false)
    }

    /// An input whose gradient should be kept (for gradient checks).
    pub fn input_tracked(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input, true)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.rows() {
            return Err(Error::Shape(format!(
                "matmul {:?} x {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let out = matmul(va, false, vb, false);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        if vb.rows() != 1 || vb.cols() != vx.cols() {
            return Err(Error::Shape(format!(
                "bias {:?} for input {:?}",
                vb.shape(),
                vx.shape()
            )));
        }
        let mut out = vx.clone();
        let b = vb.data();
        for r in 0..out.rows() {
            for (o, &bb) in out.row_mut(r).iter_mut().zip(b) {
                *o += bb;
            }
        }
        let ng = self.ng(x) || self.ng(bias);
        Ok(self.push(out, Op::AddBias(x, bias), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!("add {:?} + {:?}", va.shape(), vb.shape())));
        }
        let mut out = va.clone();
        out.add_assign(vb);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        let out = self.value(x).map(|v| v * c);
        let ng = self.ng(x);
        self.push(out, Op::Scale(x, c), ng)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * sigmoid(v));
        let ng = self.ng(x);
        self.push(out, Op::Silu(x), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        let ng = self.ng(x);
        self.push(out, Op::Relu(x), ng)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = T::from_f64(slope);
        let out = self
            .value(x)
            .map(|v| if v > T::zero() { v } else { v * s });
        let ng = self.ng(x);
        self.push(out, Op::LeakyRelu(x, s), ng)
    }

    /// Row-wise layer normalization with affine `gain`/`bias` (both `1 x w`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let vx = self.value(x);
        let w = vx.cols();
        let (vg, vb) = (self.value(gain), self.value(bias));
        if vg.shape() != (1, w) || vb.shape() != (1, w) {
            return Err(Error::Shape(format!(
                "layer norm gain {:?} bias {:?} for width {w}",
                vg.shape(),
                vb.shape()
            )));
        }
        let mut normalized = Tensor::zeros(vx.rows(), w);
        let mut out = Tensor::zeros(vx.rows(), w);
        let mut inv_std = Vec::with_capacity(vx.rows());
        for r in 0..vx.rows() {
            let row = vx.row(r);
            let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / w as f64;
            let var = row
                .iter()
                .map(|v| (v.as_f64() - mean).powi(2))
                .sum::<f64>()
                / w as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for c in 0..w {
                let xh = T::from_f64((row[c].as_f64() - mean) * is);
                normalized.set(r, c, xh);
                out.set(r, c, xh * vg.data()[c] + vb.data()[c]);
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
            ng,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        if let Some(bad) = parts.iter().find(|p| self.value(**p).rows() != rows) {
            return Err(Error::Shape(format!(
                "concat of {} rows with {} rows",
                rows,
                self.value(*bad).rows()
            )));
        }
        let width: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Tensor::zeros(rows, width);
        for r in 0..rows {
            let dst = out.row_mut(r);
            let mut off = 0;
            for p in parts {
                let src = self.nodes[p.0].value.row(r);
                dst[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// `out[e] = x[index[e]]`.
    pub fn gather_rows(&mut self, x: Var, index: Arc<[usize]>) -> Var {
        let out = self.value(x).select_rows(&index);
        let ng = self.ng(x);
        self.push(out, Op::GatherRows(x, index), ng)
    }

    /// `out[index[e]] += x[e]`, with `out` having `n_out` rows.
    pub fn scatter_add_rows(&mut self, x: Var, index: Arc<[usize]>, n_out: usize) -> Result<Var> {
        let vx = self.value(x);
        if vx.rows() != index.len() {
            return Err(Error::Shape(format!(
                "scatter of {} rows with {} indices",
                vx.rows(),
                index.len()
            )));
        }
        let mut acc = vec![0.0f64; n_out * vx.cols()];
        let w = vx.cols();
        for (e, &dst) in index.iter().enumerate() {
            for (a, v) in acc[dst * w..(dst + 1) * w].iter_mut().zip(vx.row(e)) {
                *a += v.as_f64();
            }
        }
        let out = Tensor::from_vec(n_out, w, acc.into_iter().map(T::from_f64).collect())?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::ScatterAddRows(x, index), ng))
    }

    /// Broadcast a `1 x w` row to `n x w`.
    pub fn repeat_row(&mut self, x: Var, n: usize) -> Result<Var> {
        let vx = self.value(x);
        if vx.rows() != 1 {
            return Err(Error::Shape(format!("repeat_row of {:?}", vx.shape())));
        }
        let mut data = Vec::with_capacity(n * vx.cols());
        for _ in 0..n {
            data.extend_from_slice(vx.data());
        }
        let out = Tensor::from_vec(n, vx.cols(), data)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::RepeatRow(x), ng))
    }

    /// `out[i, j] = x[i, j] * s[i]` for a column vector `s`.
    pub fn mul_column(&mut self, x: Var, s: Var) -> Result<Var> {
        let (vx, vs) = (self.value(x), self.value(s));
        if vs.shape() != (vx.rows(), 1) {
            return Err(Error::Shape(format!(
                "mul_column {:?} by {:?}",
                vx.shape(),
                vs.shape()
            )));
        }
        let mut out = vx.clone();
        for r in 0..out.rows() {
            let f = vs.data()[r];
            for o in out.row_mut(r) {
                *o *= f;
            }
        }
        let ng = self.ng(x) || self.ng(s);
        Ok(self.push(out, Op::MulColumn(x, s), ng))
    }

    /// Softmax of a score column within groups sharing `segment[e]`.
    pub fn segment_softmax(&mut self, scores: Var, segment: Arc<[usize]>, n_segments: usize) -> Result<Var> {
        let vs = self.value(scores);
        if vs.cols() != 1 || vs.rows() != segment.len() {
            return Err(Error::Shape(format!(
                "segment softmax over {:?} with {} segment ids",
                vs.shape(),
                segment.len()
            )));
        }
        let mut max = vec![f64::NEG_INFINITY; n_segments];
        for (e, &s) in segment.iter().enumerate() {
            max[s] = max[s].max(vs.data()[e].as_f64());
        }
        let exps: Vec<f64> = segment
            .iter()
            .enumerate()
            .map(|(e, &s)| (vs.data()[e].as_f64() - max[s]).exp())
            .collect();
        let mut denom = vec![0.0f64; n_segments];
        for (e, &s) in segment.iter().enumerate() {
            denom[s] += exps[e];
        }
        let data = segment
            .iter()
            .enumerate()
            .map(|(e, &s)| T::from_f64(exps[e] / denom[s]))
            .collect();
        let out = Tensor::from_vec(segment.len(), 1, data)?;
        let ng = self.ng(scores);
        Ok(self.push(out, Op::SegmentSoftmax(scores, segment), ng))
    }

    /// Sum of Gaussian (unit variance, constants dropped) and categorical
    /// negative log-likelihood terms over the selected rows of `pred`.
    ///
    /// `scalar_cols` are read as means; each `(start, width)` block is read
    /// as logits whose true class is the argmax of the target block. Only
    /// rows in `rows` of `target` are ever read. Returns `(loss, n_terms)`.
    pub fn nll(
        &mut self,
        pred: Var,
        target: &Tensor<T>,
        scalar_cols: &[usize],
        blocks: &[(usize, usize)],
        rows: &[usize],
    ) -> Result<(Var, usize)> {
        let vp = self.value(pred);
        if vp.shape() != target.shape() {
            return Err(Error::Shape(format!(
                "prediction {:?} vs target {:?}",
                vp.shape(),
                target.shape()
            )));
        }
        let mut grad = Tensor::zeros(vp.rows(), vp.cols());
        let mut total = 0.0f64;
        for &r in rows {
            let p = vp.row(r);
            let y = target.row(r);
            let g = grad.row_mut(r);
            for &c in scalar_cols {
                let diff = p[c].as_f64() - y[c].as_f64();
                total += 0.5 * diff * diff;
                g[c] = T::from_f64(diff);
            }
            for &(start, width) in blocks {
                let logits = &p[start..start + width];
                let truth = argmax(&y[start..start + width]);
                let max = logits
                    .iter()
                    .map(|v| v.as_f64())
                    .fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = logits.iter().map(|v| (v.as_f64() - max).exp()).sum();
                let lse = max + sum.ln();
                total += lse - logits[truth].as_f64();
                for (j, l) in logits.iter().enumerate() {
                    let prob = (l.as_f64() - lse).exp();
                    let ind = if j == truth { 1.0 } else { 0.0 };
                    g[start + j] = T::from_f64(prob - ind);
                }
            }
        }
        if !total.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {total}")));
        }
        let n_terms = rows.len() * (scalar_cols.len() + blocks.len());
        let ng = self.ng(pred);
        let v = self.push(
            Tensor::from_vec(1, 1, vec![T::from_f64(total)])?,
            Op::Loss { pred, grad },
            ng,
        );
        Ok((v, n_terms))
    }

    pub fn sum_scalars(&mut self, parts: &[Var]) -> Result<Var> {
        let mut total = 0.0f64;
        for p in parts {
            let v = self.value(*p);
            if v.shape() != (1, 1) {
                return Err(Error::Shape(format!("sum_scalars over {:?}", v.shape())));
            }
            total += v.data()[0].as_f64();
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        Ok(self.push(
            Tensor::from_vec(1, 1, vec![T::from_f64(total)])?,
            Op::SumScalars(parts.to_vec()),
            ng,
        ))
    }

    /// Backpropagate from the scalar `loss`, adding parameter gradients into
    /// `store`. Tracked-input gradients stay readable through [`Tape::grad`].
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Numeric(
                "backward called without a recorded forward pass".into(),
            ));
        }
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::Shape(format!(
                "backward from non-scalar {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(1, 1, T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Input) {
                // tracked input: keep for inspection
                grads[i] = Some(g);
                continue;
            }
            let nodes = &self.nodes;
            let mut acc = |v: Var, t: Tensor<T>| {
                if !nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            };
            match &nodes[i].op {
                Op::Input => unreachable!(),
                Op::Param(id) => store.accumulate_grad(*id, &g),
                Op::MatMul(a, b) => {
                    if nodes[a.0].needs_grad {
                        acc(*a, matmul(&g, false, &nodes[b.0].value, true));
                    }
                    if nodes[b.0].needs_grad {
                        acc(*b, matmul(&nodes[a.0].value, true, &g, false));
                    }
                }
                Op::AddBias(x, b) => {
                    if nodes[b.0].needs_grad {
                        acc(*b, column_sums(&g));
                    }
                    acc(*x, g);
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Scale(x, c) => {
                    let c = *c;
                    acc(*x, g.map(|v| v * c));
                }
                Op::Silu(x) => {
                    let xv = &nodes[x.0].value;
                    let mut d = g;
                    for (dv, &xx) in d.data_mut().iter_mut().zip(xv.data()) {
                        let s = sigmoid(xx);
                        *dv *= s * (T::one() + xx * (T::one() - s));
                    }
                    acc(*x, d);
                }
                Op::Relu(x) => {
                    let xv = &nodes[x.0].value;
                    let mut d = g;
                    for (dv, &xx) in d.data_mut().iter_mut().zip(xv.data()) {
                        if xx <= T::zero() {
                            *dv = T::zero();
                        }
                    }
                    acc(*x, d);
                }
                Op::LeakyRelu(x, s) => {
                    let xv = &nodes[x.0].value;
                    let mut d = g;
                    for (dv, &xx) in d.data_mut().iter_mut().zip(xv.data()) {
                        if xx <= T::zero() {
                            *dv *= *s;
                        }
                    }
                    acc(*x, d);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    normalized,
                    inv_std,
                } => {
                    let gv = &nodes[gain.0].value;
                    let w = g.cols();
                    if nodes[gain.0].needs_grad {
                        let mut dg = vec![0.0f64; w];
                        for r in 0..g.rows() {
                            for c in 0..w {
                                dg[c] += g.get(r, c).as_f64() * normalized.get(r, c).as_f64();
                            }
                        }
                        acc(*gain, Tensor::row_vector(dg.into_iter().map(T::from_f64).collect()));
                    }
                    if nodes[bias.0].needs_grad {
                        acc(*bias, column_sums(&g));
                    }
                    if nodes[x.0].needs_grad {
                        let mut dx = Tensor::zeros(g.rows(), w);
                        for r in 0..g.rows() {
                            let mut sum_d = 0.0f64;
                            let mut sum_dx = 0.0f64;
                            let mut dxh = Vec::with_capacity(w);
                            for c in 0..w {
                                let d = g.get(r, c).as_f64() * gv.data()[c].as_f64();
                                sum_d += d;
                                sum_dx += d * normalized.get(r, c).as_f64();
                                dxh.push(d);
                            }
                            let k = inv_std[r] / w as f64;
                            for c in 0..w {
                                let v = k
                                    * (w as f64 * dxh[c]
                                        - sum_d
                                        - normalized.get(r, c).as_f64() * sum_dx);
                                dx.set(r, c, T::from_f64(v));
                            }
                        }
                        acc(*x, dx);
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = nodes[p.0].value.cols();
                        if nodes[p.0].needs_grad {
                            acc(*p, g.slice_cols(off, off + w));
                        }
                        off += w;
                    }
                }
                Op::GatherRows(x, index) => {
                    let xv = &nodes[x.0].value;
                    let w = xv.cols();
                    let mut d = vec![0.0f64; xv.rows() * w];
                    for (e, &src) in index.iter().enumerate() {
                        for (a, v) in d[src * w..(src + 1) * w].iter_mut().zip(g.row(e)) {
                            *a += v.as_f64();
                        }
                    }
                    acc(
                        *x,
                        Tensor::from_vec(xv.rows(), w, d.into_iter().map(T::from_f64).collect())?,
                    );
                }
                Op::ScatterAddRows(x, index) => {
                    acc(*x, g.select_rows(index));
                }
                Op::RepeatRow(x) => {
                    acc(*x, column_sums(&g));
                }
                Op::MulColumn(x, s) => {
                    let xv = &nodes[x.0].value;
                    let sv = &nodes[s.0].value;
                    if nodes[s.0].needs_grad {
                        let ds: Vec<T> = (0..g.rows())
                            .map(|r| {
                                T::from_f64(
                                    g.row(r)
                                        .iter()
                                        .zip(xv.row(r))
                                        .map(|(a, b)| a.as_f64() * b.as_f64())
                                        .sum(),
                                )
                            })
                            .collect();
                        acc(*s, Tensor::from_vec(g.rows(), 1, ds)?);
                    }
                    if nodes[x.0].needs_grad {
                        let mut dx = g;
                        for r in 0..dx.rows() {
                            let f = sv.data()[r];
                            for v in dx.row_mut(r) {
                                *v *= f;
                            }
                        }
                        acc(*x, dx);
                    }
                }
                Op::SegmentSoftmax(scores, segment) => {
                    let alpha = &nodes[i].value;
                    let n_seg = segment.iter().copied().max().map_or(0, |m| m + 1);
                    let mut dot = vec![0.0f64; n_seg];
                    for (e, &s) in segment.iter().enumerate() {
                        dot[s] += g.data()[e].as_f64() * alpha.data()[e].as_f64();
                    }
                    let d = segment
                        .iter()
                        .enumerate()
                        .map(|(e, &s)| {
                            T::from_f64(alpha.data()[e].as_f64() * (g.data()[e].as_f64() - dot[s]))
                        })
                        .collect();
                    acc(*scores, Tensor::from_vec(segment.len(), 1, d)?);
                }
                Op::Loss { pred, grad } => {
                    let s = g.data()[0];
                    acc(*pred, grad.map(|v| v * s));
                }
                Op::SumScalars(parts) => {
                    for p in parts {
                        acc(*p, g.clone());
                    }
                }
            }
        }
        self.grads = grads;
        Ok(())
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn column_sums<T: Real>(g: &Tensor<T>) -> Tensor<T> {
    let mut s = vec![0.0f64; g.cols()];
    for r in 0..g.rows() {
        for (a, v) in s.iter_mut().zip(g.row(r)) {
            *a += v.as_f64();
        }
    }
    Tensor::row_vector(s.into_iter().map(T::from_f64).collect())
}

pub fn argmax<T: Real>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

/// In-place softmax over columns `[start, start + width)` of every row.
pub fn softmax_rows_in_place<T: Real>(t: &mut Tensor<T>, start: usize, width: usize) {
    for r in 0..t.rows() {
        let block = &mut t.row_mut(r)[start..start + width];
        let max = block
            .iter()
            .map(|v| v.as_f64())
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0f64;
        for v in block.iter_mut() {
            let e = (v.as_f64() - max).exp();
            sum += e;
            *v = T::from_f64(e);
        }
        for v in block.iter_mut() {
            *v = T::from_f64(v.as_f64() / sum);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::ParamStore;

    fn rand_tensor(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
        use rand::Rng;
        let mut rng = crate::rng::substream(seed, "tape-test", rows as u64 * 31 + cols as u64);
        Tensor::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn fd_check(
        store: &mut ParamStore<f64>,
        f: &dyn Fn(&mut Tape<f64>, &ParamStore<f64>) -> Var,
    ) -> f64 {
        crate::neural::gradcheck::max_relative_error(store, f)
    }

    #[test]
    fn single_layer_closed_form() {
        // loss = 1/2 |W x - y|^2  =>  dW = (W x - y) x^T
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", rand_tensor(3, 2, 1));
        let x = rand_tensor(2, 1, 2);
        let y = rand_tensor(3, 1, 3);
        let mut tape = Tape::new();
        let wv = tape.param(&store, w);
        let xv = tape.input(x.clone());
        let pred = tape.matmul(wv, xv).unwrap();
        let (loss, _) = tape.nll(pred, &y, &[0], &[], &[0, 1, 2]).unwrap();
        tape.backward(loss, &mut store).unwrap();
        let wx = matmul(store.value(w), false, &x, false);
        for i in 0..3 {
            for j in 0..2 {
                let want = (wx.get(i, 0) - y.get(i, 0)) * x.get(j, 0);
                assert!((store.grad(w).get(i, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn perfect_prediction_has_zero_gradient() {
        let mut store = ParamStore::<f64>::new();
        let b = store.add("b", rand_tensor(1, 3, 4));
        let target = store.value(b).clone();
        let mut tape = Tape::new();
        let bv = tape.param(&store, b);
        let (loss, n) = tape.nll(bv, &target, &[0, 1, 2], &[], &[0]).unwrap();
        assert_eq!(n, 3);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(tape.value(loss).data()[0], 0.0);
        assert!(store.grad(b).data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn backward_without_forward_is_an_error() {
        let mut store = ParamStore::<f64>::new();
        let mut other = Tape::<f64>::new();
        let x = other.input(Tensor::zeros(1, 1));
        let mut empty = Tape::<f64>::new();
        assert!(empty.backward(x, &mut store).is_err());
    }

    #[test]
    fn fd_linear_silu_layernorm_softmax_ce() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", rand_tensor(4, 5, 10));
        let b = store.add("b", rand_tensor(1, 5, 11));
        let g = store.add("g", rand_tensor(1, 5, 12));
        let beta = store.add("beta", rand_tensor(1, 5, 13));
        let x = rand_tensor(6, 4, 14);
        let target = Tensor::from_fn(6, 5, |r, c| match c {
            0 | 1 => x.get(r, c),
            _ => ((c - 2) == r % 3) as u8 as f64,
        });
        let f = move |t: &mut Tape<f64>, s: &ParamStore<f64>| {
            let xv = t.input(x.clone());
            let (wv, bv, gv, betav) = (t.param(s, w), t.param(s, b), t.param(s, g), t.param(s, beta));
            let h = t.matmul(xv, wv).unwrap();
            let h = t.add_bias(h, bv).unwrap();
            let h = t.silu(h);
            let h = t.layer_norm(h, gv, betav).unwrap();
            t.nll(h, &target, &[0, 1], &[(2, 3)], &[0, 1, 2, 3, 5]).unwrap().0
        };
        let err = fd_check(&mut store, &f);
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn fd_graph_ops() {
        let mut store = ParamStore::<f64>::new();
        let x = store.add("x", rand_tensor(4, 3, 20));
        let a = store.add("a", rand_tensor(3, 1, 21));
        let c = store.add("c", rand_tensor(1, 3, 22));
        let src: Arc<[usize]> = vec![0, 1, 2, 3, 1].into();
        let dst: Arc<[usize]> = vec![0, 0, 1, 1, 2].into();
        let target = rand_tensor(3, 3, 23);
        let f = move |t: &mut Tape<f64>, s: &ParamStore<f64>| {
            let (xv, av, cv) = (t.param(s, x), t.param(s, a), t.param(s, c));
            let gathered = t.gather_rows(xv, src.clone());
            let act = t.leaky_relu(gathered, 0.2);
            let scores = t.matmul(act, av).unwrap();
            let alpha = t.segment_softmax(scores, dst.clone(), 3).unwrap();
            let msg = t.mul_column(gathered, alpha).unwrap();
            let agg = t.scatter_add_rows(msg, dst.clone(), 3).unwrap();
            let rep = t.repeat_row(cv, 3).unwrap();
            let sum = t.add(agg, rep).unwrap();
            let r = t.relu(sum);
            let r = t.scale(r, 1.5);
            let cat = t.concat_cols(&[r, agg]).unwrap();
            let wide = Tensor::from_fn(3, 6, |i, j| target.get(i, j % 3));
            let (l1, _) = t.nll(cat, &wide, &[0, 1, 2, 3, 4, 5], &[], &[0, 1, 2]).unwrap();
            let (l2, _) = t.nll(agg, &target, &[], &[(0, 3)], &[0, 2]).unwrap();
            t.sum_scalars(&[l1, l2]).unwrap()
        };
        let err = fd_check(&mut store, &f);
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut t = Tensor::<f64>::from_vec(2, 3, vec![0.0, 0.0, 0.0, 100.0, -5.0, 3.0]).unwrap();
        softmax_rows_in_place(&mut t, 0, 3);
        for r in 0..2 {
            let s: f64 = t.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(t.row(r).iter().all(|&p| p > 0.0));
        }
        assert!((t.get(0, 0) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn uniform_ce_is_log_classes() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.input(Tensor::zeros(1, 4));
        let target = Tensor::from_vec(1, 4, vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        let (loss, _) = tape.nll(logits, &target, &[], &[(0, 4)], &[0]).unwrap();
        assert!((tape.value(loss).data()[0] - 4f64.ln()).abs() < 1e-12);
    }
}
