//! Define-by-run reverse-mode differentiation.
//!
//! Every operation evaluates eagerly and appends a node to the [`Tape`]. The tape is
//! append-only, so node order is a topological order and [`Tape::backward`] is a single
//! reverse sweep. Parameters enter as borrowed leaves, which keeps inference on a fresh
//! tape cheap: nothing is copied.

use std::borrow::Cow;

use super::tensor::{gemm_nt, gemm_tn, log_softmax_row, masked_softmax_row, sigmoid};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    OneMinus(Var),
    Sigmoid(Var),
    Tanh(Var),
    Sum(Var),
    Scale(Var, f64),
    Reshape(Var),
    Gather { table: Var, ids: Vec<u32> },
    ConcatCols(Vec<Var>),
    InterleaveSteps(Vec<Var>),
    AddPerSequence { steps: Var, per_row: Var, len: usize },
    MaskedSoftmaxRows { x: Var, mask: Vec<f64> },
    WeightedSumSteps { weights: Var, states: Var },
    BlendRows { new: Var, prev: Var, mask: Vec<f64> },
    ScaleRows { x: Var, w: Vec<f64> },
    LogSoftmaxRows(Var),
    PickNll { logp: Var, targets: Vec<u32>, weights: Vec<f64> },
}

#[derive(Debug)]
struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
}

/// Gradients of one backward sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; exactly zero when the loss does not depend on `v`.
    pub fn get(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape.clone(), g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(a.shape().to_vec(), a.data().iter().map(|&x| f(x)).collect()).expect("same shape")
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'p, Tensor>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn push_owned(&mut self, value: Tensor, op: Op) -> Var {
        self.push(Cow::Owned(value), op)
    }

    /// Borrowed leaf, typically a model parameter.
    pub fn param(&mut self, t: &'p Tensor) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_owned(t, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push_owned(out, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        check_same("add", x, y)?;
        let out = zip_map(x, y, |p, q| p + q);
        Ok(self.push_owned(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        check_same("sub", x, y)?;
        let out = zip_map(x, y, |p, q| p - q);
        Ok(self.push_owned(out, Op::Sub(a, b)))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        check_same("mul", x, y)?;
        let out = zip_map(x, y, |p, q| p * q);
        Ok(self.push_owned(out, Op::Mul(a, b)))
    }

    /// Adds the vector `bias` to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (x, b) = (self.value(a), self.value(bias));
        if b.numel() != x.cols() {
            return Err(Error::shape("add_bias", x.shape(), b.shape()));
        }
        let cols = x.cols();
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += b.data()[i % cols];
        }
        Ok(self.push_owned(out, Op::AddBias(a, bias)))
    }

    pub fn one_minus(&mut self, a: Var) -> Var {
        let out = map(self.value(a), |x| 1.0 - x);
        self.push_owned(out, Op::OneMinus(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = map(self.value(a), sigmoid);
        self.push_owned(out, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = map(self.value(a), f64::tanh);
        self.push_owned(out, Op::Tanh(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push_owned(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = map(self.value(a), |x| x * k);
        self.push_owned(out, Op::Scale(a, k))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape)?;
        Ok(self.push_owned(out, Op::Reshape(a)))
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let t = self.value(table);
        let (rows, cols) = (t.rows(), t.cols());
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id as usize >= rows {
                return Err(Error::Range { id, size: rows });
            }
            out.extend_from_slice(t.row(id as usize));
        }
        let out = Tensor::matrix(ids.len(), cols, out)?;
        Ok(self.push_owned(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let mut total = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows {
                return Err(Error::shape("concat_cols", self.value(parts[0]).shape(), v.shape()));
            }
            total += v.cols();
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::matrix(rows, total, out)?;
        Ok(self.push_owned(out, Op::ConcatCols(parts.to_vec())))
    }

    /// Stacks `T` per-step `[B × n]` states into `[B·T × n]`, row `b·T + t` from step `t`.
    pub fn interleave_steps(&mut self, steps: &[Var]) -> Result<Var> {
        let first = self.value(steps[0]);
        let (b, n) = (first.rows(), first.cols());
        let t_len = steps.len();
        let mut out = vec![0.0; b * t_len * n];
        for (t, &s) in steps.iter().enumerate() {
            let v = self.value(s);
            if v.rows() != b || v.cols() != n {
                return Err(Error::shape("interleave_steps", &[b, n], v.shape()));
            }
            for r in 0..b {
                let dst = (r * t_len + t) * n;
                out[dst..dst + n].copy_from_slice(v.row(r));
            }
        }
        let out = Tensor::matrix(b * t_len, n, out)?;
        Ok(self.push_owned(out, Op::InterleaveSteps(steps.to_vec())))
    }

    /// `steps: [B·len × n]`, `per_row: [B × n]`; adds `per_row[b]` to each of the `len` rows of
    /// sequence `b`.
    pub fn add_per_sequence(&mut self, steps: Var, per_row: Var, len: usize) -> Result<Var> {
        let (s, p) = (self.value(steps), self.value(per_row));
        if s.cols() != p.cols() || s.rows() != p.rows() * len {
            return Err(Error::shape("add_per_sequence", s.shape(), p.shape()));
        }
        let n = s.cols();
        let mut out = s.clone();
        for (r, row) in out.data_mut().chunks_mut(n).enumerate() {
            for (o, &q) in row.iter_mut().zip(p.row(r / len)) {
                *o += q;
            }
        }
        Ok(self.push_owned(out, Op::AddPerSequence { steps, per_row, len }))
    }

    /// Row-wise softmax over positions whose mask is 1.
    pub fn masked_softmax_rows(&mut self, x: Var, mask: &[f64]) -> Result<Var> {
        let v = self.value(x);
        if v.numel() != mask.len() {
            return Err(Error::shape("masked_softmax", v.shape(), &[mask.len()]));
        }
        let n = v.cols();
        let mut out = vec![0.0; v.numel()];
        for ((o, s), m) in out.chunks_mut(n).zip(v.data().chunks(n)).zip(mask.chunks(n)) {
            masked_softmax_row(s, m, o)?;
        }
        let out = Tensor::new(v.shape().to_vec(), out)?;
        Ok(self.push_owned(
            out,
            Op::MaskedSoftmaxRows {
                x,
                mask: mask.to_vec(),
            },
        ))
    }

    /// `weights: [B × T]`, `states: [B·T × n]`; returns `[B × n]` with row `b` equal to
    /// `Σ_t weights[b,t] · states[b·T + t]`.
    pub fn weighted_sum_steps(&mut self, weights: Var, states: Var) -> Result<Var> {
        let (w, s) = (self.value(weights), self.value(states));
        let (b, t_len) = (w.rows(), w.cols());
        if s.rows() != b * t_len {
            return Err(Error::shape("weighted_sum_steps", w.shape(), s.shape()));
        }
        let n = s.cols();
        let mut out = vec![0.0; b * n];
        for r in 0..b {
            let o = &mut out[r * n..(r + 1) * n];
            for t in 0..t_len {
                let a = w.data()[r * t_len + t];
                for (x, &y) in o.iter_mut().zip(s.row(r * t_len + t)) {
                    *x += a * y;
                }
            }
        }
        let out = Tensor::matrix(b, n, out)?;
        Ok(self.push_owned(out, Op::WeightedSumSteps { weights, states }))
    }

    /// Per row: `mask[r]·new[r] + (1 − mask[r])·prev[r]`.
    pub fn blend_rows(&mut self, new: Var, prev: Var, mask: &[f64]) -> Result<Var> {
        let (x, y) = (self.value(new), self.value(prev));
        check_same("blend_rows", x, y)?;
        if mask.len() != x.rows() {
            return Err(Error::shape("blend_rows", x.shape(), &[mask.len()]));
        }
        let n = x.cols();
        let mut out = x.clone();
        for (r, row) in out.data_mut().chunks_mut(n).enumerate() {
            let m = mask[r];
            for (o, &p) in row.iter_mut().zip(y.row(r)) {
                *o = m * *o + (1.0 - m) * p;
            }
        }
        Ok(self.push_owned(
            out,
            Op::BlendRows {
                new,
                prev,
                mask: mask.to_vec(),
            },
        ))
    }

    /// Multiplies row `r` by the constant `w[r]`.
    pub fn scale_rows(&mut self, x: Var, w: &[f64]) -> Result<Var> {
        let v = self.value(x);
        if w.len() != v.rows() {
            return Err(Error::shape("scale_rows", v.shape(), &[w.len()]));
        }
        let n = v.cols();
        let mut out = v.clone();
        for (r, row) in out.data_mut().chunks_mut(n).enumerate() {
            row.iter_mut().for_each(|o| *o *= w[r]);
        }
        Ok(self.push_owned(out, Op::ScaleRows { x, w: w.to_vec() }))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let n = v.cols();
        let mut out = vec![0.0; v.numel()];
        for (o, row) in out.chunks_mut(n).zip(v.data().chunks(n)) {
            log_softmax_row(row, o);
        }
        let out = Tensor::new(v.shape().to_vec(), out).expect("same shape");
        self.push_owned(out, Op::LogSoftmaxRows(x))
    }

    /// Scalar `−Σ_r weights[r] · logp[r, targets[r]]`.
    pub fn pick_nll(&mut self, logp: Var, targets: &[u32], weights: &[f64]) -> Result<Var> {
        let v = self.value(logp);
        if targets.len() != v.rows() || weights.len() != v.rows() {
            return Err(Error::shape("pick_nll", v.shape(), &[targets.len()]));
        }
        let n = v.cols();
        let mut total = 0.0;
        for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
            if t as usize >= n {
                return Err(Error::Range { id: t, size: n });
            }
            if w != 0.0 {
                total -= w * v.data()[r * n + t as usize];
            }
        }
        Ok(self.push_owned(
            Tensor::scalar(total),
            Op::PickNll {
                logp,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
        ))
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut [f64] {
        let len = self.nodes[v.0].value.numel();
        grads[v.0].get_or_insert_with(|| vec![0.0; len])
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.as_ref();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                gemm_nt(g, bv.data(), self.slot(grads, *a), m, n, k);
                gemm_tn(av.data(), g, self.slot(grads, *b), m, k, n);
            }
            Op::Add(a, b) => {
                self.slot(grads, *a).iter_mut().zip(g).for_each(|(x, y)| *x += y);
                self.slot(grads, *b).iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            Op::Sub(a, b) => {
                self.slot(grads, *a).iter_mut().zip(g).for_each(|(x, y)| *x += y);
                self.slot(grads, *b).iter_mut().zip(g).for_each(|(x, y)| *x -= y);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                for ((x, gi), y) in self.slot(grads, *a).iter_mut().zip(g).zip(bv) {
                    *x += gi * y;
                }
                for ((x, gi), y) in self.slot(grads, *b).iter_mut().zip(g).zip(av) {
                    *x += gi * y;
                }
            }
            Op::AddBias(a, bias) => {
                self.slot(grads, *a).iter_mut().zip(g).for_each(|(x, y)| *x += y);
                let gb = self.slot(grads, *bias);
                let n = gb.len();
                for row in g.chunks(n) {
                    gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                }
            }
            Op::OneMinus(a) => {
                self.slot(grads, *a).iter_mut().zip(g).for_each(|(x, y)| *x -= y);
            }
            Op::Sigmoid(a) => {
                for ((x, gi), y) in self.slot(grads, *a).iter_mut().zip(g).zip(out.data()) {
                    *x += gi * y * (1.0 - y);
                }
            }
            Op::Tanh(a) => {
                for ((x, gi), y) in self.slot(grads, *a).iter_mut().zip(g).zip(out.data()) {
                    *x += gi * (1.0 - y * y);
                }
            }
            Op::Sum(a) => {
                self.slot(grads, *a).iter_mut().for_each(|x| *x += g[0]);
            }
            Op::Scale(a, k) => {
                self.slot(grads, *a).iter_mut().zip(g).for_each(|(x, y)| *x += k * y);
            }
            Op::Reshape(a) => {
                self.slot(grads, *a).iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            Op::Gather { table, ids } => {
                let gt = self.slot(grads, *table);
                let n = out.cols();
                for (row, &id) in g.chunks(n).zip(ids) {
                    let dst = &mut gt[id as usize * n..(id as usize + 1) * n];
                    dst.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let gp = self.slot(grads, p);
                    for (r, row) in g.chunks(total).enumerate() {
                        let dst = &mut gp[r * w..(r + 1) * w];
                        dst.iter_mut()
                            .zip(&row[offset..offset + w])
                            .for_each(|(x, y)| *x += y);
                    }
                    offset += w;
                }
            }
            Op::InterleaveSteps(steps) => {
                let n = out.cols();
                let t_len = steps.len();
                for (t, &s) in steps.iter().enumerate() {
                    let gs = self.slot(grads, s);
                    for (r, dst) in gs.chunks_mut(n).enumerate() {
                        let src = &g[(r * t_len + t) * n..(r * t_len + t + 1) * n];
                        dst.iter_mut().zip(src).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::AddPerSequence {
                steps,
                per_row,
                len,
            } => {
                self.slot(grads, *steps).iter_mut().zip(g).for_each(|(x, y)| *x += y);
                let gp = self.slot(grads, *per_row);
                let n = out.cols();
                for (r, row) in g.chunks(n).enumerate() {
                    let dst = &mut gp[(r / len) * n..(r / len + 1) * n];
                    dst.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                }
            }
            Op::MaskedSoftmaxRows { x, mask } => {
                let n = out.cols();
                let gx = self.slot(grads, *x);
                for ((dst, (y, gr)), m) in gx
                    .chunks_mut(n)
                    .zip(out.data().chunks(n).zip(g.chunks(n)))
                    .zip(mask.chunks(n))
                {
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        if m[j] != 0.0 {
                            dst[j] += y[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::WeightedSumSteps { weights, states } => {
                let (w, s) = (self.value(*weights), self.value(*states));
                let (b, t_len, n) = (w.rows(), w.cols(), s.cols());
                {
                    let gw = self.slot(grads, *weights);
                    for r in 0..b {
                        let gr = &g[r * n..(r + 1) * n];
                        for t in 0..t_len {
                            gw[r * t_len + t] +=
                                gr.iter().zip(s.row(r * t_len + t)).map(|(a, c)| a * c).sum::<f64>();
                        }
                    }
                }
                let gs = self.slot(grads, *states);
                for r in 0..b {
                    let gr = &g[r * n..(r + 1) * n];
                    for t in 0..t_len {
                        let a = w.data()[r * t_len + t];
                        let dst = &mut gs[(r * t_len + t) * n..(r * t_len + t + 1) * n];
                        dst.iter_mut().zip(gr).for_each(|(x, y)| *x += a * y);
                    }
                }
            }
            Op::BlendRows { new, prev, mask } => {
                let n = out.cols();
                for (r, row) in self.slot(grads, *new).chunks_mut(n).enumerate() {
                    row.iter_mut()
                        .zip(&g[r * n..(r + 1) * n])
                        .for_each(|(x, y)| *x += mask[r] * y);
                }
                for (r, row) in self.slot(grads, *prev).chunks_mut(n).enumerate() {
                    row.iter_mut()
                        .zip(&g[r * n..(r + 1) * n])
                        .for_each(|(x, y)| *x += (1.0 - mask[r]) * y);
                }
            }
            Op::ScaleRows { x, w } => {
                let n = out.cols();
                for (r, row) in self.slot(grads, *x).chunks_mut(n).enumerate() {
                    row.iter_mut()
                        .zip(&g[r * n..(r + 1) * n])
                        .for_each(|(a, b)| *a += w[r] * b);
                }
            }
            Op::LogSoftmaxRows(x) => {
                let n = out.cols();
                for (dst, (lp, gr)) in self.slot(grads, *x)
                    .chunks_mut(n)
                    .zip(out.data().chunks(n).zip(g.chunks(n)))
                {
                    let total: f64 = gr.iter().sum();
                    for j in 0..n {
                        dst[j] += gr[j] - lp[j].exp() * total;
                    }
                }
            }
            Op::PickNll {
                logp,
                targets,
                weights,
            } => {
                let n = self.value(*logp).cols();
                let gl = self.slot(grads, *logp);
                for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    gl[r * n + t as usize] -= g[0] * w;
                }
            }
        }
    }
}
