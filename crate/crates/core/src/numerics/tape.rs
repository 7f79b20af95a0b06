//! Reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] records every operation as a node holding its value and the
//! indices of its parents. Parameters enter as leaves (borrowed, not copied),
//! fixed inputs as constants. [`Tape::grad_of`] replays the record backward
//! from a scalar node.

use std::borrow::Cow;
use std::sync::Arc;

use crate::error::{Error, Result};

use super::ops;
use super::tensor::{Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<E> {
    Leaf,
    Constant,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, E),
    OnePlus(Var),
    Silu(Var),
    LayerNorm(Var, Vec<E>),
    Softmax(Var),
    Conv1d { x: Var, w: Var, b: Var, kernel: usize },
    Rotate(Var, Arc<[f64]>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Sum(Var),
    Mse(Var, Var),
}

struct Node<'a, E: Real> {
    value: Cow<'a, Tensor<E>>,
    op: Op<E>,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape<'a, E: Real = f64> {
    nodes: Vec<Node<'a, E>>,
}

impl<'a, E: Real> Tape<'a, E> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Cow<'a, Tensor<E>>, op: Op<E>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor<E>, op: Op<E>, parents: &[Var]) -> Var {
        let needs = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.push(Cow::Owned(value), op, needs)
    }

    /// A differentiable input, borrowed for the lifetime of the tape.
    pub fn leaf(&mut self, t: &'a Tensor<E>) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, true)
    }

    pub fn leaf_owned(&mut self, t: Tensor<E>) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, true)
    }

    pub fn constant(&mut self, t: &'a Tensor<E>) -> Var {
        self.push(Cow::Borrowed(t), Op::Constant, false)
    }

    pub fn constant_owned(&mut self, t: Tensor<E>) -> Var {
        self.push(Cow::Owned(t), Op::Constant, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push_op(y, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::matmul_nt(self.value(a), self.value(b))?;
        Ok(self.push_op(y, Op::MatMulNt(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).add(self.value(b))?;
        Ok(self.push_op(y, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).sub(self.value(b))?;
        Ok(self.push_op(y, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).mul(self.value(b))?;
        Ok(self.push_op(y, Op::Mul(a, b), &[a, b]))
    }

    fn check_row(&self, x: Var, row: Var, op: &'static str) -> Result<()> {
        let (xs, rs) = (self.value(x), self.value(row));
        if xs.rank() != 2 || rs.len() != xs.cols() {
            return Err(Error::shape(op, xs.shape(), rs.shape()));
        }
        Ok(())
    }

    /// Add a length-`n` vector to every row of an `m × n` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.check_row(x, row, "add_row")?;
        let r = self.value(row).data();
        let mut y = self.value(x).clone();
        let n = y.cols();
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            *v = *v + r[i % n];
        }
        Ok(self.push_op(y, Op::AddRow(x, row), &[x, row]))
    }

    /// Multiply every row of an `m × n` matrix elementwise by a length-`n` vector.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.check_row(x, row, "mul_row")?;
        let r = self.value(row).data();
        let mut y = self.value(x).clone();
        let n = y.cols();
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            *v = *v * r[i % n];
        }
        Ok(self.push_op(y, Op::MulRow(x, row), &[x, row]))
    }

    pub fn scale(&mut self, x: Var, s: E) -> Var {
        let y = self.value(x).scale(s);
        self.push_op(y, Op::Scale(x, s), &[x])
    }

    pub fn one_plus(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| E::one() + v);
        self.push_op(y, Op::OnePlus(x), &[x])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(ops::silu);
        self.push_op(y, Op::Silu(x), &[x])
    }

    /// Per-row standardization without affine parameters.
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        if self.value(x).rank() != 2 {
            return Err(Error::shape("layer_norm", self.value(x).shape(), &[2]));
        }
        let (y, rstd) = ops::layer_norm_rows(self.value(x));
        Ok(self.push_op(y, Op::LayerNorm(x, rstd), &[x]))
    }

    pub fn softmax_masked(&mut self, x: Var, keep: Arc<[bool]>) -> Result<Var> {
        let y = ops::softmax_rows_masked(self.value(x), &keep)?;
        Ok(self.push_op(y, Op::Softmax(x), &[x]))
    }

    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, kernel: usize) -> Result<Var> {
        let y = ops::conv1d_strided(self.value(x), self.value(w), self.value(b), kernel, kernel)?;
        Ok(self.push_op(y, Op::Conv1d { x, w, b, kernel }, &[x, w, b]))
    }

    /// Rotate coordinate pairs of each row by the given angles
    /// (`rows × cols/2` entries).
    pub fn rotate_pairs(&mut self, x: Var, angles: Arc<[f64]>) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 || xv.cols() % 2 != 0 || angles.len() != xv.rows() * xv.cols() / 2 {
            return Err(Error::shape("rotate_pairs", xv.shape(), &[angles.len()]));
        }
        let y = ops::rotate_pairs(xv, &angles, false);
        Ok(self.push_op(y, Op::Rotate(x, angles), &[x]))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let y = self.value(x).slice_rows(start, end)?;
        Ok(self.push_op(y, Op::SliceRows(x, start), &[x]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let y = self.value(x).slice_cols(start, end)?;
        Ok(self.push_op(y, Op::SliceCols(x, start), &[x]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let y = {
            let refs: Vec<&Tensor<E>> = parts.iter().map(|&p| self.value(p)).collect();
            Tensor::concat_rows(&refs)?
        };
        Ok(self.push_op(y, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let y = {
            let refs: Vec<&Tensor<E>> = parts.iter().map(|&p| self.value(p)).collect();
            Tensor::concat_cols(&refs)?
        };
        Ok(self.push_op(y, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        self.push_op(y, Op::Sum(x), &[x])
    }

    /// Mean over all elements of `(a - b)²`.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.value(a).sub(self.value(b))?;
        let n = E::from_f64(d.len() as f64);
        let y = Tensor::scalar(d.norm_sq() / n);
        Ok(self.push_op(y, Op::Mse(a, b), &[a, b]))
    }

    /// Gradients of the scalar `loss` with respect to each of `leaves`.
    pub fn grad_of(&self, loss: Var, leaves: &[Var]) -> Result<Vec<Tensor<E>>> {
        if loss.0 >= self.nodes.len() || self.value(loss).len() != 1 {
            return Err(Error::Invalid("loss must be a scalar node on the tape".into()));
        }
        for &l in leaves {
            if l.0 >= self.nodes.len() || !matches!(self.nodes[l.0].op, Op::Leaf) {
                return Err(Error::Invalid(format!("node {} is not a leaf on this tape", l.0)));
            }
        }
        let mut grads = self.backward(loss)?;
        Ok(leaves
            .iter()
            .map(|&l| {
                grads[l.0]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(self.value(l).shape()))
            })
            .collect())
    }

    fn backward(&self, loss: Var) -> Result<Vec<Option<Tensor<E>>>> {
        let mut grads: Vec<Option<Tensor<E>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.value(loss).shape()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &gy, &mut grads)?;
            grads[idx] = Some(gy);
        }
        Ok(grads)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<E>>], v: Var, g: Tensor<E>) -> Result<()> {
        if !self.nodes[v.0].needs_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(acc) => acc.axpy(E::one(), &g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, idx: usize, gy: &Tensor<E>, grads: &mut [Option<Tensor<E>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    let ga = ops::matmul_nt(gy, self.value(*b))?;
                    self.accumulate(grads, *a, ga)?;
                }
                if self.wants(*b) {
                    let gb = ops::matmul_tn(self.value(*a), gy)?;
                    self.accumulate(grads, *b, gb)?;
                }
            }
            Op::MatMulNt(a, b) => {
                if self.wants(*a) {
                    let ga = ops::matmul(gy, self.value(*b))?;
                    self.accumulate(grads, *a, ga)?;
                }
                if self.wants(*b) {
                    let gb = ops::matmul_tn(gy, self.value(*a))?;
                    self.accumulate(grads, *b, gb)?;
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gy.clone())?;
                self.accumulate(grads, *b, gy.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gy.clone())?;
                self.accumulate(grads, *b, gy.scale(-E::one()))?;
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, gy.mul(self.value(*b))?)?;
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, gy.mul(self.value(*a))?)?;
                }
            }
            Op::AddRow(x, row) => {
                self.accumulate(grads, *x, gy.clone())?;
                if self.wants(*row) {
                    let g = column_sums(gy, self.value(*row).shape());
                    self.accumulate(grads, *row, g)?;
                }
            }
            Op::MulRow(x, row) => {
                let r = self.value(*row);
                if self.wants(*x) {
                    let n = gy.cols();
                    let mut g = gy.clone();
                    for (i, v) in g.data_mut().iter_mut().enumerate() {
                        *v = *v * r.data()[i % n];
                    }
                    self.accumulate(grads, *x, g)?;
                }
                if self.wants(*row) {
                    let prod = gy.mul(self.value(*x))?;
                    self.accumulate(grads, *row, column_sums(&prod, r.shape()))?;
                }
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, gy.scale(*s))?,
            Op::OnePlus(x) => self.accumulate(grads, *x, gy.clone())?,
            Op::Silu(x) => {
                let g = gy.zip_map(self.value(*x), "silu", |g, v| g * ops::silu_grad(v))?;
                self.accumulate(grads, *x, g)?;
            }
            Op::LayerNorm(x, rstd) => {
                let n = E::from_f64(y.cols() as f64);
                let mut g = gy.clone();
                for (i, &r) in rstd.iter().enumerate() {
                    let (yr, gr) = (y.row(i), gy.row(i));
                    let mean_g = gr.iter().fold(E::zero(), |a, &v| a + v) / n;
                    let mean_gy = gr
                        .iter()
                        .zip(yr)
                        .fold(E::zero(), |a, (&gv, &yv)| a + gv * yv)
                        / n;
                    for (j, out) in g.row_mut(i).iter_mut().enumerate() {
                        *out = r * (gr[j] - mean_g - yr[j] * mean_gy);
                    }
                }
                self.accumulate(grads, *x, g)?;
            }
            Op::Softmax(x) => {
                let mut g = gy.clone();
                for i in 0..y.rows() {
                    let (yr, gr) = (y.row(i), gy.row(i));
                    let dot = yr.iter().zip(gr).fold(E::zero(), |a, (&p, &d)| a + p * d);
                    for (j, out) in g.row_mut(i).iter_mut().enumerate() {
                        *out = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *x, g)?;
            }
            Op::Conv1d { x, w, b, kernel } => {
                self.conv_backward(gy, *x, *w, *b, *kernel, grads)?;
            }
            Op::Rotate(x, angles) => {
                let g = ops::rotate_pairs(gy, angles, true);
                self.accumulate(grads, *x, g)?;
            }
            Op::SliceRows(x, start) => {
                if self.wants(*x) {
                    let mut g = Tensor::zeros(self.value(*x).shape());
                    let c = g.cols();
                    g.data_mut()[start * c..start * c + gy.len()].copy_from_slice(gy.data());
                    self.accumulate(grads, *x, g)?;
                }
            }
            Op::SliceCols(x, start) => {
                if self.wants(*x) {
                    let mut g = Tensor::zeros(self.value(*x).shape());
                    let w = gy.cols();
                    for i in 0..gy.rows() {
                        g.row_mut(i)[*start..start + w].copy_from_slice(gy.row(i));
                    }
                    self.accumulate(grads, *x, g)?;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let r = self.value(p).rows();
                    if self.wants(p) {
                        self.accumulate(grads, p, gy.slice_rows(offset, offset + r)?)?;
                    }
                    offset += r;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if self.wants(p) {
                        self.accumulate(grads, p, gy.slice_cols(offset, offset + c)?)?;
                    }
                    offset += c;
                }
            }
            Op::Sum(x) => {
                let g = Tensor::full(self.value(*x).shape(), gy.data()[0]);
                self.accumulate(grads, *x, g)?;
            }
            Op::Mse(a, b) => {
                let d = self.value(*a).sub(self.value(*b))?;
                let s = gy.data()[0] * E::from_f64(2.0 / d.len() as f64);
                let g = d.scale(s);
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.scale(-E::one()))?;
                }
                self.accumulate(grads, *a, g)?;
            }
        }
        Ok(())
    }

    fn conv_backward(
        &self,
        gy: &Tensor<E>,
        x: Var,
        w: Var,
        b: Var,
        kernel: usize,
        grads: &mut [Option<Tensor<E>>],
    ) -> Result<()> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (c_in, c_out) = (xv.cols(), gy.cols());
        let out_len = gy.rows();
        if self.wants(b) {
            self.accumulate(grads, b, column_sums(gy, &[c_out]))?;
        }
        if self.wants(w) {
            let mut gw = Tensor::zeros(wv.shape());
            let gwd = gw.data_mut();
            for p in 0..out_len {
                let grow = gy.row(p);
                for k in 0..kernel {
                    let xrow = xv.row(p * kernel + k);
                    for (ci, &xval) in xrow.iter().enumerate() {
                        let base = (k * c_in + ci) * c_out;
                        for (co, &gv) in grow.iter().enumerate() {
                            gwd[base + co] = gwd[base + co] + xval * gv;
                        }
                    }
                }
            }
            self.accumulate(grads, w, gw)?;
        }
        if self.wants(x) {
            let mut gx = Tensor::zeros(xv.shape());
            let wd = wv.data();
            for p in 0..out_len {
                let grow = gy.row(p);
                for k in 0..kernel {
                    let xrow = gx.row_mut(p * kernel + k);
                    for (ci, out) in xrow.iter_mut().enumerate() {
                        let base = (k * c_in + ci) * c_out;
                        let mut acc = E::zero();
                        for (co, &gv) in grow.iter().enumerate() {
                            acc = acc + wd[base + co] * gv;
                        }
                        *out = *out + acc;
                    }
                }
            }
            self.accumulate(grads, x, gx)?;
        }
        Ok(())
    }
}

fn column_sums<E: Real>(g: &Tensor<E>, shape: &[usize]) -> Tensor<E> {
    let n = g.cols();
    let mut out = vec![E::zero(); n];
    for i in 0..g.rows() {
        for (o, &v) in out.iter_mut().zip(g.row(i)) {
            *o = *o + v;
        }
    }
    Tensor::from_vec(shape, out).expect("row vector shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff::{finite_difference_grad, max_relative_error};
    use crate::numerics::rng::SeededRng;

    #[test]
    fn sum_gradient_is_ones() {
        let x = Tensor::from_vec(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let s = tape.sum(xv);
        let g = tape.grad_of(s, &[xv]).unwrap();
        assert_eq!(g[0], Tensor::ones(&[2, 3]));
    }

    #[test]
    fn inner_product_gradient_is_two_x() {
        let x = Tensor::from_vec(&[4], vec![1.0, -2.0, 3.0, 0.25]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let sq = tape.mul(xv, xv).unwrap();
        let s = tape.sum(sq);
        let g = tape.grad_of(s, &[xv]).unwrap();
        assert_eq!(g[0], x.scale(2.0));
    }

    #[test]
    fn rejects_non_leaf_and_non_scalar() {
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let c = tape.constant(&x);
        let y = tape.add(xv, c).unwrap();
        let s = tape.sum(y);
        assert!(tape.grad_of(s, &[y]).is_err());
        assert!(tape.grad_of(s, &[c]).is_err());
        assert!(tape.grad_of(y, &[xv]).is_err());
        assert!(tape.grad_of(s, &[Var(99)]).is_err());
    }

    /// Loss builder used by the per-op finite-difference checks: a random
    /// linear functional of the op's output keeps the gradient non-trivial.
    fn check_op(
        shapes: &[Vec<usize>],
        seed: u64,
        build: impl Fn(&mut Tape<'_, f64>, &[Var]) -> Var,
    ) {
        let mut rng = SeededRng::new(seed);
        let inputs: Vec<Tensor> = shapes.iter().map(|s| rng.normal_tensor(s, 1.0)).collect();
        let probe_seed = rng.next_u64();
        let eval = |inputs: &[Tensor]| -> f64 {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
            let out = build(&mut tape, &vars);
            let probe: Tensor = SeededRng::new(probe_seed).normal_tensor(tape.value(out).shape(), 1.0);
            tape.value(out).dot(&probe).unwrap()
        };
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
        let out = build(&mut tape, &vars);
        let probe: Tensor = SeededRng::new(probe_seed).normal_tensor(tape.value(out).shape(), 1.0);
        let pv = tape.constant_owned(probe);
        let prod = tape.mul(out, pv).unwrap();
        let loss = tape.sum(prod);
        let grads = tape.grad_of(loss, &vars).unwrap();
        for (i, g) in grads.iter().enumerate() {
            let fd = finite_difference_grad(
                |xi: &Tensor| {
                    let mut all = inputs.clone();
                    all[i] = xi.clone();
                    eval(&all)
                },
                &inputs[i],
                1e-5,
            );
            let err = max_relative_error(g, &fd, 1e-6);
            assert!(err < 1e-4, "input {i}: relative error {err}");
        }
    }

    const SHAPES: [(usize, usize); 3] = [(1, 4), (3, 4), (5, 6)];

    #[test]
    fn elementwise_ops_match_finite_differences() {
        for (seed, &(m, n)) in SHAPES.iter().enumerate() {
            let s = vec![vec![m, n], vec![m, n]];
            let seed = seed as u64;
            check_op(&s, seed, |t, v| t.add(v[0], v[1]).unwrap());
            check_op(&s, seed, |t, v| t.sub(v[0], v[1]).unwrap());
            check_op(&s, seed, |t, v| t.mul(v[0], v[1]).unwrap());
            check_op(&s[..1], seed, |t, v| t.silu(v[0]));
            check_op(&s[..1], seed, |t, v| t.scale(v[0], 0.3));
            check_op(&s[..1], seed, |t, v| t.one_plus(v[0]));
            check_op(&s[..1], seed, |t, v| t.layer_norm(v[0]).unwrap());
            check_op(&s, seed, |t, v| t.mse(v[0], v[1]).unwrap());
            check_op(&[vec![m, n], vec![n]], seed, |t, v| t.add_row(v[0], v[1]).unwrap());
            check_op(&[vec![m, n], vec![1, n]], seed, |t, v| t.mul_row(v[0], v[1]).unwrap());
        }
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        for (seed, &(m, n)) in SHAPES.iter().enumerate() {
            let seed = seed as u64 + 10;
            check_op(&[vec![m, n], vec![n, 3]], seed, |t, v| t.matmul(v[0], v[1]).unwrap());
            check_op(&[vec![m, n], vec![2, n]], seed, |t, v| t.matmul_nt(v[0], v[1]).unwrap());
            check_op(&[vec![m, n], vec![2, n]], seed, |t, v| t.concat_rows(&[v[0], v[1]]).unwrap());
            check_op(&[vec![m, n], vec![m, 2]], seed, |t, v| t.concat_cols(&[v[0], v[1]]).unwrap());
            check_op(&[vec![m + 1, n]], seed, |t, v| t.slice_rows(v[0], 1, m + 1).unwrap());
            check_op(&[vec![m, n]], seed, |t, v| t.slice_cols(v[0], 1, n).unwrap());
            check_op(&[vec![m, n]], seed, |t, v| {
                let keep: Vec<bool> = (0..m * n).map(|i| i % n <= i / n || i % 3 == 0).collect();
                t.softmax_masked(v[0], keep.into()).unwrap()
            });
            check_op(&[vec![m, n]], seed, |t, v| {
                let angles: Vec<f64> = (0..m * n / 2).map(|i| 0.37 * i as f64).collect();
                t.rotate_pairs(v[0], angles.into()).unwrap()
            });
        }
    }

    #[test]
    fn conv_matches_finite_differences() {
        for (seed, &(len, c)) in [(5, 2), (10, 3), (15, 1)].iter().enumerate() {
            check_op(&[vec![len, c], vec![5, c, 2], vec![2]], seed as u64, |t, v| {
                t.conv1d(v[0], v[1], v[2], 5).unwrap()
            });
        }
    }
}
