use std::ops::Range;

use super::Tensor;
use crate::error::{AsdError, Result};
use crate::scalar::{matmul, MatLayout, Scalar};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    CausalConv1d { x: Var, w: Var, b: Var, dilation: usize },
    Linear { x: Var, w: Var, b: Var },
    Relu(Var),
    GlobalAvgPool(Var),
    Concat(Vec<Var>),
    Gather { x: Var, rows: Vec<Option<usize>> },
    SegmentMean { x: Var, segments: Vec<Range<usize>> },
    RowsToSeq { x: Var, batch: usize, steps: usize },
    SeqToRows { x: Var, start: usize },
    SoftmaxCe { logits: Var, targets: Vec<Option<usize>> },
    WeightedSum(Vec<(Var, T)>),
    Dot { x: Var, coeffs: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Reverse-mode autograd tape.
///
/// Every builder method evaluates its node eagerly; [`Graph::backward`]
/// replays the tape in reverse. Nodes that do not depend on a parameter
/// registered with [`Graph::param`] receive no gradient.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads[v.0].take()
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// 2-D cross-correlation with symmetric zero padding.
    ///
    /// `x: [B, C_in, H, W]`, `w: [C_out, C_in, kh, kw]`, `b: [C_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x).to_vec(), self.shape(w).to_vec(), self.shape(b).to_vec());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || bs != [ws[0]] || stride == 0 {
            return Err(AsdError::shape("conv2d", "[B,C,H,W] x [Co,C,kh,kw] + [Co]", (xs, ws, bs)));
        }
        let geo = Conv2dGeometry::new(&xs, &ws, stride, pad)?;
        let cols = geo.im2col(self.value(x).data());
        let mut out_mat = vec![T::zero(); geo.c_out * geo.cols()];
        matmul(
            self.value(w).data(),
            MatLayout::new(geo.c_out, geo.k()),
            &cols,
            MatLayout::new(geo.k(), geo.cols()),
            &mut out_mat,
            T::zero(),
        );
        let bias = self.value(b).data();
        let p = geo.h_out * geo.w_out;
        let mut out = vec![T::zero(); geo.batch * geo.c_out * p];
        for bi in 0..geo.batch {
            for co in 0..geo.c_out {
                let src = &out_mat[co * geo.cols() + bi * p..co * geo.cols() + (bi + 1) * p];
                let dst = &mut out[(bi * geo.c_out + co) * p..(bi * geo.c_out + co + 1) * p];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = *s + bias[co];
                }
            }
        }
        let value = Tensor::from_vec(&[geo.batch, geo.c_out, geo.h_out, geo.w_out], out)?;
        let ng = self.needs(&[x, w, b]);
        Ok(self.push(value, Op::Conv2d { x, w, b, stride, pad }, ng))
    }

    /// Causal dilated 1-D convolution, left zero padding only.
    ///
    /// `x: [B, C_in, T]`, `w: [C_out, C_in, k]`, `b: [C_out]`; output `[B, C_out, T]`
    /// where tap `j` reads time `t - (k - 1 - j) * dilation`.
    pub fn causal_conv1d(&mut self, x: Var, w: Var, b: Var, dilation: usize) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x).to_vec(), self.shape(w).to_vec(), self.shape(b).to_vec());
        if xs.len() != 3 || ws.len() != 3 || xs[1] != ws[1] || bs != [ws[0]] || dilation == 0 {
            return Err(AsdError::shape("causal_conv1d", "[B,C,T] x [Co,C,k] + [Co]", (xs, ws, bs)));
        }
        let geo = Conv1dGeometry { batch: xs[0], c_in: xs[1], steps: xs[2], c_out: ws[0], kernel: ws[2], dilation };
        let cols = geo.im2col(self.value(x).data());
        let n = geo.batch * geo.steps;
        let mut out_mat = vec![T::zero(); geo.c_out * n];
        matmul(
            self.value(w).data(),
            MatLayout::new(geo.c_out, geo.k()),
            &cols,
            MatLayout::new(geo.k(), n),
            &mut out_mat,
            T::zero(),
        );
        let bias = self.value(b).data();
        let mut out = vec![T::zero(); n * geo.c_out];
        for bi in 0..geo.batch {
            for co in 0..geo.c_out {
                let src = &out_mat[co * n + bi * geo.steps..co * n + (bi + 1) * geo.steps];
                let dst = &mut out[(bi * geo.c_out + co) * geo.steps..(bi * geo.c_out + co + 1) * geo.steps];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = *s + bias[co];
                }
            }
        }
        let value = Tensor::from_vec(&[geo.batch, geo.c_out, geo.steps], out)?;
        let ng = self.needs(&[x, w, b]);
        Ok(self.push(value, Op::CausalConv1d { x, w, b, dilation }, ng))
    }

    /// Affine map `x w^T + b` with `x: [B, D_in]`, `w: [D_out, D_in]`, `b: [D_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x).to_vec(), self.shape(w).to_vec(), self.shape(b).to_vec());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || bs != [ws[0]] {
            return Err(AsdError::shape("linear", "[B,Din] x [Dout,Din] + [Dout]", (xs, ws, bs)));
        }
        let (rows, d_in, d_out) = (xs[0], xs[1], ws[0]);
        let mut out = vec![T::zero(); rows * d_out];
        let bias = self.value(b).data();
        for r in 0..rows {
            out[r * d_out..(r + 1) * d_out].copy_from_slice(bias);
        }
        matmul(
            self.value(x).data(),
            MatLayout::new(rows, d_in),
            self.value(w).data(),
            MatLayout::t(d_out, d_in),
            &mut out,
            T::one(),
        );
        let value = Tensor::from_vec(&[rows, d_out], out)?;
        let ng = self.needs(&[x, w, b]);
        Ok(self.push(value, Op::Linear { x, w, b }, ng))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out: Vec<T> = v.data().iter().map(|&a| if a > T::zero() { a } else { T::zero() }).collect();
        let value = Tensor::from_vec(v.shape(), out).expect("same shape");
        let ng = self.needs(&[x]);
        self.push(value, Op::Relu(x), ng)
    }

    /// `[B, C, H, W] -> [B, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(AsdError::shape("global_avg_pool", "[B,C,H,W]", xs));
        }
        let p = xs[2] * xs[3];
        let inv = T::one() / T::of(p as f64);
        let out: Vec<T> = self.value(x).data().chunks(p).map(|c| c.iter().copied().sum::<T>() * inv).collect();
        let value = Tensor::from_vec(&[xs[0], xs[1]], out)?;
        let ng = self.needs(&[x]);
        Ok(self.push(value, Op::GlobalAvgPool(x), ng))
    }

    /// Concatenate 2-D tensors `[B, D_i]` along the feature axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(AsdError::input("concat of nothing"));
        }
        let rows = self.shape(parts[0])[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(AsdError::shape("concat", format!("[{rows}, _]"), s.to_vec()));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let value = Tensor::from_vec(&[rows, total], out)?;
        let ng = self.needs(parts);
        Ok(self.push(value, Op::Concat(parts.to_vec()), ng))
    }

    /// Select rows of a 2-D tensor; `None` yields a zero row.
    pub fn gather_rows(&mut self, x: Var, rows: Vec<Option<usize>>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(AsdError::shape("gather_rows", "[N,D]", xs));
        }
        let d = xs[1];
        let mut out = vec![T::zero(); rows.len() * d];
        for (i, r) in rows.iter().enumerate() {
            if let Some(r) = *r {
                if r >= xs[0] {
                    return Err(AsdError::input(format!("gather row {r} out of {}", xs[0])));
                }
                out[i * d..(i + 1) * d].copy_from_slice(&self.value(x).data()[r * d..(r + 1) * d]);
            }
        }
        let value = Tensor::from_vec(&[rows.len(), d], out)?;
        let ng = self.needs(&[x]);
        Ok(self.push(value, Op::Gather { x, rows }, ng))
    }

    /// Mean of row ranges of a 2-D tensor; an empty range yields a zero row.
    pub fn segment_mean(&mut self, x: Var, segments: Vec<Range<usize>>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(AsdError::shape("segment_mean", "[N,D]", xs));
        }
        let d = xs[1];
        let mut out = vec![T::zero(); segments.len() * d];
        for (i, seg) in segments.iter().enumerate() {
            if seg.end > xs[0] || seg.start > seg.end {
                return Err(AsdError::input(format!("segment {seg:?} outside {} rows", xs[0])));
            }
            if seg.is_empty() {
                continue;
            }
            let dst = &mut out[i * d..(i + 1) * d];
            for r in seg.clone() {
                for (o, v) in dst.iter_mut().zip(&self.nodes[x.0].value.data()[r * d..(r + 1) * d]) {
                    *o += *v;
                }
            }
            let inv = T::one() / T::of(seg.len() as f64);
            dst.iter_mut().for_each(|o| *o *= inv);
        }
        let value = Tensor::from_vec(&[segments.len(), d], out)?;
        let ng = self.needs(&[x]);
        Ok(self.push(value, Op::SegmentMean { x, segments }, ng))
    }

    /// `[B*T, D]` (sample-major rows) `-> [B, D, T]`.
    pub fn rows_to_seq(&mut self, x: Var, batch: usize, steps: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || xs[0] != batch * steps {
            return Err(AsdError::shape("rows_to_seq", [batch * steps], xs));
        }
        let d = xs[1];
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for b in 0..batch {
            for t in 0..steps {
                for c in 0..d {
                    out[(b * d + c) * steps + t] = src[(b * steps + t) * d + c];
                }
            }
        }
        let value = Tensor::from_vec(&[batch, d, steps], out)?;
        let ng = self.needs(&[x]);
        Ok(self.push(value, Op::RowsToSeq { x, batch, steps }, ng))
    }

    /// `[B, C, T] -> [B*(T-start), C]`, keeping time steps `start..T`.
    pub fn seq_to_rows(&mut self, x: Var, start: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || start >= xs[2] {
            return Err(AsdError::shape("seq_to_rows", format!("[B,C,T>{start}]"), xs));
        }
        let (batch, c, steps) = (xs[0], xs[1], xs[2]);
        let kept = steps - start;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); batch * kept * c];
        for b in 0..batch {
            for t in start..steps {
                for ch in 0..c {
                    out[(b * kept + t - start) * c + ch] = src[(b * c + ch) * steps + t];
                }
            }
        }
        let value = Tensor::from_vec(&[batch * kept, c], out)?;
        let ng = self.needs(&[x]);
        Ok(self.push(value, Op::SeqToRows { x, start }, ng))
    }

    /// Mean softmax cross-entropy over rows with a target; `None` rows are ignored.
    pub fn softmax_ce(&mut self, logits: Var, targets: Vec<Option<usize>>) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 || ls[0] != targets.len() {
            return Err(AsdError::shape("softmax_ce", [targets.len()], ls));
        }
        let classes = ls[1];
        let data = self.value(logits).data();
        let mut total = T::zero();
        let mut count = 0usize;
        for (row, t) in data.chunks(classes).zip(&targets) {
            if let Some(t) = *t {
                if t >= classes {
                    return Err(AsdError::input(format!("target {t} >= {classes} classes")));
                }
                total += log_sum_exp(row) - row[t];
                count += 1;
            }
        }
        let loss = if count == 0 { T::zero() } else { total / T::of(count as f64) };
        let ng = self.needs(&[logits]);
        Ok(self.push(Tensor::scalar(loss), Op::SoftmaxCe { logits, targets }, ng))
    }

    /// `sum_i c_i * x_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let mut acc = T::zero();
        for &(v, c) in terms {
            if self.value(v).len() != 1 {
                return Err(AsdError::shape("weighted_sum", "scalar", self.shape(v).to_vec()));
            }
            acc += c * self.value(v).item();
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let ng = self.needs(&vars);
        Ok(self.push(Tensor::scalar(acc), Op::WeightedSum(terms.to_vec()), ng))
    }

    /// Contract every element of `x` against fixed coefficients, giving a scalar.
    pub fn dot(&mut self, x: Var, coeffs: Vec<T>) -> Result<Var> {
        if coeffs.len() != self.value(x).len() {
            return Err(AsdError::shape("dot", self.value(x).len(), coeffs.len()));
        }
        let s = self.value(x).data().iter().zip(&coeffs).map(|(a, b)| *a * *b).sum();
        let ng = self.needs(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Dot { x, coeffs }, ng))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(AsdError::shape("backward", "scalar", self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn propagate(&self, op: &Op<T>, out: &Tensor<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let geo = Conv2dGeometry::new(self.shape(*x), self.shape(*w), *stride, *pad).expect("validated");
                let p = geo.h_out * geo.w_out;
                let n = geo.cols();
                let mut gmat = vec![T::zero(); geo.c_out * n];
                for bi in 0..geo.batch {
                    for co in 0..geo.c_out {
                        gmat[co * n + bi * p..co * n + (bi + 1) * p]
                            .copy_from_slice(&g[(bi * geo.c_out + co) * p..(bi * geo.c_out + co + 1) * p]);
                    }
                }
                self.accumulate(grads, *b, |gb| {
                    for co in 0..geo.c_out {
                        gb[co] += gmat[co * n..(co + 1) * n].iter().copied().sum::<T>();
                    }
                });
                if self.nodes[w.0].needs_grad {
                    let cols = geo.im2col(self.value(*x).data());
                    self.accumulate(grads, *w, |gw| {
                        matmul(&gmat, MatLayout::new(geo.c_out, n), &cols, MatLayout::t(geo.k(), n), gw, T::one())
                    });
                }
                if self.nodes[x.0].needs_grad {
                    let mut gcols = vec![T::zero(); geo.k() * n];
                    matmul(
                        self.value(*w).data(),
                        MatLayout::t(geo.c_out, geo.k()),
                        &gmat,
                        MatLayout::new(geo.c_out, n),
                        &mut gcols,
                        T::zero(),
                    );
                    self.accumulate(grads, *x, |gx| geo.col2im(&gcols, gx));
                }
            }
            Op::CausalConv1d { x, w, b, dilation } => {
                let xs = self.shape(*x);
                let ws = self.shape(*w);
                let geo = Conv1dGeometry {
                    batch: xs[0],
                    c_in: xs[1],
                    steps: xs[2],
                    c_out: ws[0],
                    kernel: ws[2],
                    dilation: *dilation,
                };
                let n = geo.batch * geo.steps;
                let mut gmat = vec![T::zero(); geo.c_out * n];
                for bi in 0..geo.batch {
                    for co in 0..geo.c_out {
                        gmat[co * n + bi * geo.steps..co * n + (bi + 1) * geo.steps].copy_from_slice(
                            &g[(bi * geo.c_out + co) * geo.steps..(bi * geo.c_out + co + 1) * geo.steps],
                        );
                    }
                }
                self.accumulate(grads, *b, |gb| {
                    for co in 0..geo.c_out {
                        gb[co] += gmat[co * n..(co + 1) * n].iter().copied().sum::<T>();
                    }
                });
                if self.nodes[w.0].needs_grad {
                    let cols = geo.im2col(self.value(*x).data());
                    self.accumulate(grads, *w, |gw| {
                        matmul(&gmat, MatLayout::new(geo.c_out, n), &cols, MatLayout::t(geo.k(), n), gw, T::one())
                    });
                }
                if self.nodes[x.0].needs_grad {
                    let mut gcols = vec![T::zero(); geo.k() * n];
                    matmul(
                        self.value(*w).data(),
                        MatLayout::t(geo.c_out, geo.k()),
                        &gmat,
                        MatLayout::new(geo.c_out, n),
                        &mut gcols,
                        T::zero(),
                    );
                    self.accumulate(grads, *x, |gx| geo.col2im(&gcols, gx));
                }
            }
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x);
                let (rows, d_in) = (xs[0], xs[1]);
                let d_out = self.shape(*w)[0];
                self.accumulate(grads, *b, |gb| {
                    for r in 0..rows {
                        for (o, v) in gb.iter_mut().zip(&g[r * d_out..(r + 1) * d_out]) {
                            *o += *v;
                        }
                    }
                });
                self.accumulate(grads, *w, |gw| {
                    matmul(g, MatLayout::t(rows, d_out), self.value(*x).data(), MatLayout::new(rows, d_in), gw, T::one())
                });
                self.accumulate(grads, *x, |gx| {
                    matmul(g, MatLayout::new(rows, d_out), self.value(*w).data(), MatLayout::new(d_out, d_in), gx, T::one())
                });
            }
            Op::Relu(x) => {
                self.accumulate(grads, *x, |gx| {
                    for ((o, gi), y) in gx.iter_mut().zip(g).zip(out.data()) {
                        if *y > T::zero() {
                            *o += *gi;
                        }
                    }
                });
            }
            Op::GlobalAvgPool(x) => {
                let xs = self.shape(*x);
                let p = xs[2] * xs[3];
                let inv = T::one() / T::of(p as f64);
                self.accumulate(grads, *x, |gx| {
                    for (chunk, gi) in gx.chunks_mut(p).zip(g) {
                        let v = *gi * inv;
                        chunk.iter_mut().for_each(|o| *o += v);
                    }
                });
            }
            Op::Concat(parts) => {
                let rows = out.shape()[0];
                let total = out.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    self.accumulate(grads, p, |gp| {
                        for r in 0..rows {
                            for (o, v) in gp[r * w..(r + 1) * w].iter_mut().zip(&g[r * total + offset..r * total + offset + w]) {
                                *o += *v;
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::Gather { x, rows } => {
                let d = self.shape(*x)[1];
                self.accumulate(grads, *x, |gx| {
                    for (i, r) in rows.iter().enumerate() {
                        if let Some(r) = *r {
                            for (o, v) in gx[r * d..(r + 1) * d].iter_mut().zip(&g[i * d..(i + 1) * d]) {
                                *o += *v;
                            }
                        }
                    }
                });
            }
            Op::SegmentMean { x, segments } => {
                let d = self.shape(*x)[1];
                self.accumulate(grads, *x, |gx| {
                    for (i, seg) in segments.iter().enumerate() {
                        if seg.is_empty() {
                            continue;
                        }
                        let inv = T::one() / T::of(seg.len() as f64);
                        for r in seg.clone() {
                            for (o, v) in gx[r * d..(r + 1) * d].iter_mut().zip(&g[i * d..(i + 1) * d]) {
                                *o += *v * inv;
                            }
                        }
                    }
                });
            }
            Op::RowsToSeq { x, batch, steps } => {
                let d = self.shape(*x)[1];
                self.accumulate(grads, *x, |gx| {
                    for b in 0..*batch {
                        for t in 0..*steps {
                            for c in 0..d {
                                gx[(b * steps + t) * d + c] += g[(b * d + c) * steps + t];
                            }
                        }
                    }
                });
            }
            Op::SeqToRows { x, start } => {
                let xs = self.shape(*x);
                let (batch, c, steps) = (xs[0], xs[1], xs[2]);
                let kept = steps - start;
                self.accumulate(grads, *x, |gx| {
                    for b in 0..batch {
                        for t in *start..steps {
                            for ch in 0..c {
                                gx[(b * c + ch) * steps + t] += g[(b * kept + t - start) * c + ch];
                            }
                        }
                    }
                });
            }
            Op::SoftmaxCe { logits, targets } => {
                let classes = self.shape(*logits)[1];
                let count = targets.iter().filter(|t| t.is_some()).count();
                if count == 0 {
                    return;
                }
                let scale = g[0] / T::of(count as f64);
                let data = self.value(*logits).data();
                self.accumulate(grads, *logits, |gl| {
                    for ((row, grow), t) in data.chunks(classes).zip(gl.chunks_mut(classes)).zip(targets) {
                        let Some(t) = *t else { continue };
                        let lse = log_sum_exp(row);
                        for (j, (o, l)) in grow.iter_mut().zip(row).enumerate() {
                            let p = (*l - lse).exp();
                            let onehot = if j == t { T::one() } else { T::zero() };
                            *o += scale * (p - onehot);
                        }
                    }
                });
            }
            Op::WeightedSum(terms) => {
                for &(v, c) in terms {
                    self.accumulate(grads, v, |gv| gv[0] += c * g[0]);
                }
            }
            Op::Dot { x, coeffs } => {
                self.accumulate(grads, *x, |gx| {
                    for (o, c) in gx.iter_mut().zip(coeffs) {
                        *o += *c * g[0];
                    }
                });
            }
        }
    }
}

fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    m + row.iter().map(|&x| (x - m).exp()).sum::<T>().ln()
}

/// Softmax cross-entropy of a single logit vector against a class index,
/// evaluated with the log-sum-exp trick.
pub fn softmax_ce_loss<T: Scalar>(logits: &[T], target: usize) -> T {
    log_sum_exp(logits) - logits[target]
}

struct Conv2dGeometry {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
}

impl Conv2dGeometry {
    fn new(xs: &[usize], ws: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (h, w, kh, kw) = (xs[2], xs[3], ws[2], ws[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(AsdError::shape("conv2d", "kernel no larger than padded input", (xs, ws)));
        }
        Ok(Self {
            batch: xs[0],
            c_in: xs[1],
            h,
            w,
            c_out: ws[0],
            kh,
            kw,
            stride,
            pad,
            h_out: (h + 2 * pad - kh) / stride + 1,
            w_out: (w + 2 * pad - kw) / stride + 1,
        })
    }

    fn k(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.batch * self.h_out * self.w_out
    }

    fn im2col<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let n = self.cols();
        let p = self.h_out * self.w_out;
        let mut cols = vec![T::zero(); self.k() * n];
        for c in 0..self.c_in {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    for b in 0..self.batch {
                        let plane = &x[(b * self.c_in + c) * self.h * self.w..][..self.h * self.w];
                        for oy in 0..self.h_out {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= self.h as isize {
                                continue;
                            }
                            let src_row = &plane[iy as usize * self.w..][..self.w];
                            for ox in 0..self.w_out {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix >= 0 && ix < self.w as isize {
                                    dst[b * p + oy * self.w_out + ox] = src_row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im<T: Scalar>(&self, cols: &[T], gx: &mut [T]) {
        let n = self.cols();
        let p = self.h_out * self.w_out;
        for c in 0..self.c_in {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * n..(row + 1) * n];
                    for b in 0..self.batch {
                        let plane = &mut gx[(b * self.c_in + c) * self.h * self.w..][..self.h * self.w];
                        for oy in 0..self.h_out {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= self.h as isize {
                                continue;
                            }
                            for ox in 0..self.w_out {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix >= 0 && ix < self.w as isize {
                                    plane[iy as usize * self.w + ix as usize] += src[b * p + oy * self.w_out + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

struct Conv1dGeometry {
    batch: usize,
    c_in: usize,
    steps: usize,
    c_out: usize,
    kernel: usize,
    dilation: usize,
}

impl Conv1dGeometry {
    fn k(&self) -> usize {
        self.c_in * self.kernel
    }

    fn lag(&self, tap: usize) -> usize {
        (self.kernel - 1 - tap) * self.dilation
    }

    fn im2col<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let n = self.batch * self.steps;
        let mut cols = vec![T::zero(); self.k() * n];
        for c in 0..self.c_in {
            for j in 0..self.kernel {
                let lag = self.lag(j);
                let row = c * self.kernel + j;
                for b in 0..self.batch {
                    let src = &x[(b * self.c_in + c) * self.steps..][..self.steps];
                    let dst = &mut cols[row * n + b * self.steps..][..self.steps];
                    if lag < self.steps {
                        dst[lag..].copy_from_slice(&src[..self.steps - lag]);
                    }
                }
            }
        }
        cols
    }

    fn col2im<T: Scalar>(&self, cols: &[T], gx: &mut [T]) {
        let n = self.batch * self.steps;
        for c in 0..self.c_in {
            for j in 0..self.kernel {
                let lag = self.lag(j);
                if lag >= self.steps {
                    continue;
                }
                let row = c * self.kernel + j;
                for b in 0..self.batch {
                    let src = &cols[row * n + b * self.steps..][..self.steps];
                    let dst = &mut gx[(b * self.c_in + c) * self.steps..][..self.steps];
                    for (o, v) in dst[..self.steps - lag].iter_mut().zip(&src[lag..]) {
                        *o += *v;
                    }
                }
            }
        }
    }
}
