//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Every primitive evaluates eagerly and appends a node to the [`Tape`].
//! Nodes are stored in creation order, so the tape is always topologically
//! sorted and [`Tape::backward`] is a single reverse sweep.
//!
//! A node is differentiable when it was created outside a
//! [`Tape::no_grad`] scope and at least one of its inputs is differentiable.
//! Anything built inside the scope is a constant as far as gradients are
//! concerned, which is how frozen parameter copies are expressed.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicU32, Ordering};

use super::{NumericsError, Tensor};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(0);

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    idx: u32,
}

/// Binary keep-mask for dropout together with its rescaling factor.
///
/// The primitive computes `x * bits * scale`. An all-ones mask has
/// `scale == 1` and is therefore the identity.
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutMask {
    pub bits: Tensor,
    pub scale: f64,
}

impl DropoutMask {
    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self {
            bits: Tensor::ones(shape),
            scale: 1.0,
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    Affine { x: Var, w: Var, b: Var },
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddRow { a: Var, row: Var },
    Scale { a: Var, c: f64 },
    AddScalar { a: Var },
    Tanh { a: Var },
    Sigmoid { a: Var },
    Softplus { a: Var },
    Silu { a: Var, sig: Vec<f64> },
    Exp { a: Var },
    Log { a: Var },
    Square { a: Var },
    Sqrt { a: Var },
    Sum { a: Var },
    Mean { a: Var },
    RowSum { a: Var },
    ConcatCols { a: Var, b: Var },
    SliceCols { a: Var, start: usize },
    LayerNorm { a: Var, inv_std: Vec<f64> },
    Dropout { a: Var, mask: DropoutMask },
}

struct Node {
    value: Tensor,
    op: Op,
    grad: bool,
}

/// Recorded computation graph for one forward pass.
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
    no_grad_depth: usize,
    detached: Vec<Tensor>,
    replay: VecDeque<Tensor>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    tape: u32,
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the backpropagated output with respect to `v`.
    ///
    /// Nodes that did not influence the output (including everything built
    /// under `no_grad`) get an all-zero tensor of their shape.
    pub fn get(&self, v: Var) -> Result<Tensor, NumericsError> {
        if v.tape != self.tape || v.idx as usize >= self.grads.len() {
            return Err(NumericsError::UnknownNode(v.idx as usize));
        }
        let i = v.idx as usize;
        Ok(match &self.grads[i] {
            Some(g) => Tensor::from_parts(self.shapes[i].clone(), g.clone()),
            None => Tensor::zeros(self.shapes[i].clone()),
        })
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> NumericsError {
    NumericsError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `c[m,n] (+)= a[m,k] * b[k,n]` with optional transposes given as strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    // Row-major a is [m,k] (or [k,m] when transposed), b is [k,n] (or [n,k]).
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths cover the strided extents computed above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            no_grad_depth: 0,
            detached: Vec::new(),
            replay: VecDeque::new(),
        }
    }

    /// A tape whose `detach` calls return `values` in order instead of the
    /// current value, holding stop-gradient quantities fixed.
    pub fn replaying(values: Vec<Tensor>) -> Self {
        let mut tape = Self::new();
        tape.replay = values.into();
        tape
    }

    /// Values produced by `detach`, in call order.
    pub fn detached_values(&self) -> &[Tensor] {
        &self.detached
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> &Node {
        debug_assert_eq!(v.tape, self.id, "var from a different tape");
        &self.nodes[v.idx as usize]
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    /// Whether gradients can flow into `v`.
    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).grad
    }

    fn check(&self, v: Var) -> Result<(), NumericsError> {
        if v.tape != self.id || v.idx as usize >= self.nodes.len() {
            Err(NumericsError::UnknownNode(v.idx as usize))
        } else {
            Ok(())
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs_grad: bool) -> Var {
        let idx = self.nodes.len() as u32;
        let grad = inputs_grad && self.no_grad_depth == 0;
        self.nodes.push(Node { value, op, grad });
        Var { tape: self.id, idx }
    }

    /// Differentiable input (parameters, or anything a gradient is wanted for).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Runs `f` with gradient recording disabled for every node it creates.
    pub fn no_grad<R>(&mut self, f: impl FnOnce(&mut Self) -> R) -> R {
        self.no_grad_depth += 1;
        let out = f(self);
        self.no_grad_depth -= 1;
        out
    }

    /// Constant copy of `v`; shares the buffer.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = match self.replay.pop_front() {
            Some(fixed) if fixed.shape() == self.value(v).shape() => fixed,
            _ => self.value(v).clone(),
        };
        self.detached.push(value.clone());
        self.constant(value)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).map(f);
        let g = self.requires_grad(a);
        self.push(value, op, g)
    }

    fn binary_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, NumericsError> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(name, ta, tb));
        }
        let value = ta.zip_map(tb, f)?;
        let g = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(value, op, g))
    }

    /// `x[B,in] @ w[in,out] + b[out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NumericsError> {
        for v in [x, w, b] {
            self.check(v)?;
        }
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        if tw.shape().len() != 2 || tx.cols() != tw.shape()[0] {
            return Err(mismatch("affine", tx, tw));
        }
        let out = tw.shape()[1];
        if tb.len() != out {
            return Err(mismatch("affine", tw, tb));
        }
        let rows = tx.rows();
        let mut data = Vec::with_capacity(rows * out);
        for _ in 0..rows {
            data.extend_from_slice(tb.data());
        }
        gemm(rows, tx.cols(), out, tx.data(), false, tw.data(), false, &mut data, true);
        let value = Tensor::from_parts(vec![rows, out], data);
        let g = self.requires_grad(x) || self.requires_grad(w) || self.requires_grad(b);
        Ok(self.push(value, Op::Affine { x, w, b }, g))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.shape().len() != 2 || ta.cols() != tb.shape()[0] {
            return Err(mismatch("matmul", ta, tb));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.shape()[1]);
        let mut data = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut data, false);
        let value = Tensor::from_parts(vec![m, n], data);
        let g = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(value, Op::MatMul { a, b }, g))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary_same("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary_same("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary_same("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    /// Adds a length-`cols` vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, NumericsError> {
        self.check(a)?;
        self.check(row)?;
        let (ta, tr) = (self.value(a), self.value(row));
        let c = ta.cols();
        if tr.len() != c {
            return Err(mismatch("add_row", ta, tr));
        }
        let r = tr.data();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + r[i % c])
            .collect();
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        let g = self.requires_grad(a) || self.requires_grad(row);
        Ok(self.push(value, Op::AddRow { a, row }, g))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| c * x, Op::Scale { a, c })
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar { a })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh { a })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid { a })
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus { a })
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let sig: Vec<f64> = x.data().iter().map(|&v| sigmoid(v)).collect();
        let data = x.data().iter().zip(&sig).map(|(v, s)| v * s).collect();
        let value = Tensor::from_parts(x.shape().to_vec(), data);
        let g = self.requires_grad(a);
        let sig = if g && self.no_grad_depth == 0 { sig } else { Vec::new() };
        self.push(value, Op::Silu { a, sig }, g)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp { a })
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log { a })
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square { a })
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt { a })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let g = self.requires_grad(a);
        self.push(value, Op::Sum { a }, g)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).mean());
        let g = self.requires_grad(a);
        self.push(value, Op::Mean { a }, g)
    }

    /// Sums over the trailing axis: `[B, F] -> [B]`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let c = t.cols();
        let data: Vec<f64> = t.data().chunks(c).map(|r| r.iter().sum()).collect();
        let value = Tensor::from_parts(vec![t.rows()], data);
        let g = self.requires_grad(a);
        self.push(value, Op::RowSum { a }, g)
    }

    /// `[B, F1] ++ [B, F2] -> [B, F1 + F2]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rows() != tb.rows() {
            return Err(mismatch("concat_cols", ta, tb));
        }
        let (ca, cb) = (ta.cols(), tb.cols());
        let mut data = Vec::with_capacity(ta.len() + tb.len());
        for i in 0..ta.rows() {
            data.extend_from_slice(ta.row(i));
            data.extend_from_slice(tb.row(i));
        }
        let value = Tensor::from_parts(vec![ta.rows(), ca + cb], data);
        let g = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(value, Op::ConcatCols { a, b }, g))
    }

    /// Columns `[start, end)` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, NumericsError> {
        self.check(a)?;
        let t = self.value(a);
        if start >= end || end > t.cols() {
            return Err(NumericsError::ShapeMismatch {
                op: "slice_cols",
                lhs: t.shape().to_vec(),
                rhs: vec![start, end],
            });
        }
        let mut data = Vec::with_capacity(t.rows() * (end - start));
        for i in 0..t.rows() {
            data.extend_from_slice(&t.row(i)[start..end]);
        }
        let value = Tensor::from_parts(vec![t.rows(), end - start], data);
        let g = self.requires_grad(a);
        Ok(self.push(value, Op::SliceCols { a, start }, g))
    }

    /// Normalizes each row to zero mean and unit variance; `eps` is added to
    /// the variance. Constant rows map to zeros.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let t = self.value(a);
        let c = t.cols();
        let mut data = Vec::with_capacity(t.len());
        let mut inv_std = Vec::with_capacity(t.rows());
        for r in t.data().chunks(c) {
            let mean = r.iter().sum::<f64>() / c as f64;
            let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            data.extend(r.iter().map(|v| (v - mean) * is));
        }
        let value = Tensor::from_parts(t.shape().to_vec(), data);
        let g = self.requires_grad(a);
        self.push(value, Op::LayerNorm { a, inv_std }, g)
    }

    pub fn dropout(&mut self, a: Var, mask: &DropoutMask) -> Result<Var, NumericsError> {
        self.check(a)?;
        let t = self.value(a);
        if t.shape() != mask.bits.shape() {
            return Err(mismatch("dropout", t, &mask.bits));
        }
        let s = mask.scale;
        let value = t.zip_map(&mask.bits, |x, m| x * m * s)?;
        let g = self.requires_grad(a);
        Ok(self.push(
            value,
            Op::Dropout {
                a,
                mask: mask.clone(),
            },
            g,
        ))
    }

    /// Reverse sweep from a scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients, NumericsError> {
        self.check(output)?;
        let out = self.value(output);
        if out.len() != 1 {
            return Err(NumericsError::NotScalar {
                op: "backward",
                shape: out.shape().to_vec(),
            });
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if self.nodes[output.idx as usize].grad {
            grads[output.idx as usize] = Some(vec![1.0]);
        }

        for i in (0..=output.idx as usize).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(node, &gy, &mut grads);
            grads[i] = Some(gy);
        }

        Ok(Gradients {
            tape: self.id,
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        let node = &self.nodes[v.idx as usize];
        if !node.grad {
            return;
        }
        let slot = &mut grads[v.idx as usize];
        let buf = slot.get_or_insert_with(|| vec![0.0; node.value.len()]);
        f(buf);
    }

    fn accumulate_elementwise(
        &self,
        grads: &mut [Option<Vec<f64>>],
        a: Var,
        gy: &[f64],
        local: impl Fn(usize) -> f64,
    ) {
        self.accumulate(grads, a, |buf| {
            for (j, g) in buf.iter_mut().enumerate() {
                *g += gy[j] * local(j);
            }
        });
    }

    fn propagate(&self, node: &Node, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Affine { x, w, b } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (rows, k, out) = (tx.rows(), tx.cols(), tw.shape()[1]);
                self.accumulate(grads, *x, |buf| {
                    gemm(rows, out, k, gy, false, tw.data(), true, buf, true)
                });
                self.accumulate(grads, *w, |buf| {
                    gemm(k, rows, out, tx.data(), true, gy, false, buf, true)
                });
                self.accumulate(grads, *b, |buf| {
                    for r in gy.chunks(out) {
                        for (g, v) in buf.iter_mut().zip(r) {
                            *g += v;
                        }
                    }
                });
            }
            Op::MatMul { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.shape()[1]);
                self.accumulate(grads, *a, |buf| {
                    gemm(m, n, k, gy, false, tb.data(), true, buf, true)
                });
                self.accumulate(grads, *b, |buf| {
                    gemm(k, m, n, ta.data(), true, gy, false, buf, true)
                });
            }
            Op::Add { a, b } => {
                self.accumulate_elementwise(grads, *a, gy, |_| 1.0);
                self.accumulate_elementwise(grads, *b, gy, |_| 1.0);
            }
            Op::Sub { a, b } => {
                self.accumulate_elementwise(grads, *a, gy, |_| 1.0);
                self.accumulate_elementwise(grads, *b, gy, |_| -1.0);
            }
            Op::Mul { a, b } => {
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate_elementwise(grads, *a, gy, |j| db[j]);
                self.accumulate_elementwise(grads, *b, gy, |j| da[j]);
            }
            Op::AddRow { a, row } => {
                self.accumulate_elementwise(grads, *a, gy, |_| 1.0);
                let c = self.value(*row).len();
                self.accumulate(grads, *row, |buf| {
                    for r in gy.chunks(c) {
                        for (g, v) in buf.iter_mut().zip(r) {
                            *g += v;
                        }
                    }
                });
            }
            Op::Scale { a, c } => self.accumulate_elementwise(grads, *a, gy, |_| *c),
            Op::AddScalar { a } => self.accumulate_elementwise(grads, *a, gy, |_| 1.0),
            Op::Tanh { a } => self.accumulate_elementwise(grads, *a, gy, |j| 1.0 - y[j] * y[j]),
            Op::Sigmoid { a } => {
                self.accumulate_elementwise(grads, *a, gy, |j| y[j] * (1.0 - y[j]))
            }
            Op::Softplus { a } => {
                let x = self.value(*a).data();
                self.accumulate_elementwise(grads, *a, gy, |j| sigmoid(x[j]))
            }
            Op::Silu { a, sig } => {
                let x = self.value(*a).data();
                self.accumulate_elementwise(grads, *a, gy, |j| {
                    let s = sig[j];
                    s * (1.0 + x[j] * (1.0 - s))
                })
            }
            Op::Exp { a } => self.accumulate_elementwise(grads, *a, gy, |j| y[j]),
            Op::Log { a } => {
                let x = self.value(*a).data();
                self.accumulate_elementwise(grads, *a, gy, |j| 1.0 / x[j])
            }
            Op::Square { a } => {
                let x = self.value(*a).data();
                self.accumulate_elementwise(grads, *a, gy, |j| 2.0 * x[j])
            }
            Op::Sqrt { a } => self.accumulate_elementwise(grads, *a, gy, |j| 0.5 / y[j]),
            Op::Sum { a } => {
                let g = gy[0];
                self.accumulate(grads, *a, |buf| buf.iter_mut().for_each(|v| *v += g));
            }
            Op::Mean { a } => {
                let g = gy[0] / self.value(*a).len() as f64;
                self.accumulate(grads, *a, |buf| buf.iter_mut().for_each(|v| *v += g));
            }
            Op::RowSum { a } => {
                let c = self.value(*a).cols();
                self.accumulate(grads, *a, |buf| {
                    for (dst, g) in buf.chunks_mut(c).zip(gy) {
                        dst.iter_mut().for_each(|d| *d += g);
                    }
                });
            }
            Op::ConcatCols { a, b } => {
                let (ca, cb) = (self.value(*a).cols(), self.value(*b).cols());
                let w = ca + cb;
                self.accumulate(grads, *a, |buf| {
                    for (dst, src) in buf.chunks_mut(ca).zip(gy.chunks(w)) {
                        dst.iter_mut().zip(&src[..ca]).for_each(|(d, s)| *d += s);
                    }
                });
                self.accumulate(grads, *b, |buf| {
                    for (dst, src) in buf.chunks_mut(cb).zip(gy.chunks(w)) {
                        dst.iter_mut().zip(&src[ca..]).for_each(|(d, s)| *d += s);
                    }
                });
            }
            Op::SliceCols { a, start } => {
                let c = self.value(*a).cols();
                let width = node.value.cols();
                let start = *start;
                self.accumulate(grads, *a, |buf| {
                    for (dst, src) in buf.chunks_mut(c).zip(gy.chunks(width)) {
                        dst[start..start + width]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, s)| *d += s);
                    }
                });
            }
            Op::LayerNorm { a, inv_std } => {
                let c = node.value.cols();
                self.accumulate(grads, *a, |buf| {
                    for (r, ((dst, g), yh)) in buf
                        .chunks_mut(c)
                        .zip(gy.chunks(c))
                        .zip(y.chunks(c))
                        .enumerate()
                    {
                        let mean_g = g.iter().sum::<f64>() / c as f64;
                        let mean_gy =
                            g.iter().zip(yh).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            dst[j] += inv_std[r] * (g[j] - mean_g - yh[j] * mean_gy);
                        }
                    }
                });
            }
            Op::Dropout { a, mask } => {
                let (m, s) = (mask.bits.data(), mask.scale);
                self.accumulate_elementwise(grads, *a, gy, |j| m[j] * s)
            }
        }
    }
}
