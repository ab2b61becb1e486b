//! Tape-based reverse-mode differentiation over row-major matrices.
//!
//! Every node is a `rows x cols` matrix. Operations append nodes to the tape; [`Graph::backward`]
//! walks the tape once in reverse and may only be called once per recording.

use super::tensor::{cst, gemm, Scalar, Tensor};
use super::ParamSet;
use crate::error::{Error, Result};

/// Clamp bound applied to the arccos argument before differentiating.
pub const ACOS_CLAMP: f64 = 1e-6;
/// Rows with a norm below this are scaled by `1 / NORMALIZE_EPS` instead of normalized.
pub const NORMALIZE_EPS: f64 = 1e-8;
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Linear(Var, Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Min(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Square(Var),
    ConcatCols(Var, Var),
    SliceCols(Var, usize),
    SumRows(Var),
    Sum(Var),
    Mean(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Softmax(Var),
    Attention { q: Var, k: Var, v: Var, seq: usize, probs: Vec<T> },
    MulConst(Var, Vec<T>),
    RowNormalize(Var, Vec<T>),
    RowDot(Var, Var),
    AcosClamp(Var),
    WeightedSum(Var, Vec<T>),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
}

struct Node<T> {
    value: Vec<T>,
    rows: usize,
    cols: usize,
    op: Op<T>,
    requires_grad: bool,
}

/// Leaf variables bound to the tensors of a [`ParamSet`], in parameter order.
#[derive(Debug, Clone)]
pub struct Binding {
    vars: Vec<Var>,
    shapes: Vec<Vec<usize>>,
}

impl Binding {
    pub fn var(&self, id: usize) -> Var {
        self.vars[id]
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf (input or bound parameter); interior nodes report `None`.
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Gradients for every bound parameter; unused or frozen parameters get zeros.
    pub fn for_binding(&self, b: &Binding) -> Vec<Tensor<T>> {
        b.vars
            .iter()
            .zip(&b.shapes)
            .map(|(v, shape)| match &self.grads[v.0] {
                Some(g) => Tensor { shape: shape.clone(), data: g.clone() },
                None => Tensor::zeros(shape),
            })
            .collect()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), backward_done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<T>, rows: usize, cols: usize, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node { value, rows, cols, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    /// Constant input (no gradient).
    pub fn input(&mut self, rows: usize, cols: usize, data: Vec<T>) -> Var {
        assert_eq!(data.len(), rows * cols, "input data length");
        self.push(data, rows, cols, Op::Leaf, false)
    }

    /// Input that receives a gradient.
    pub fn input_grad(&mut self, rows: usize, cols: usize, data: Vec<T>) -> Var {
        assert_eq!(data.len(), rows * cols, "input data length");
        self.push(data, rows, cols, Op::Leaf, true)
    }

    pub fn tensor(&mut self, t: &Tensor<T>, requires_grad: bool) -> Var {
        let (r, c) = t.dims2();
        self.push(t.data.clone(), r, c, Op::Leaf, requires_grad)
    }

    /// Bind all parameters, trainable or frozen as a whole.
    pub fn bind(&mut self, ps: &ParamSet<T>, trainable: bool) -> Binding {
        let mask = vec![trainable; ps.len()];
        self.bind_masked(ps, &mask)
    }

    /// Bind parameters, marking only those with `trainable[i]` as requiring gradients.
    pub fn bind_masked(&mut self, ps: &ParamSet<T>, trainable: &[bool]) -> Binding {
        assert_eq!(trainable.len(), ps.len());
        let mut vars = Vec::with_capacity(ps.len());
        let mut shapes = Vec::with_capacity(ps.len());
        for (t, &tr) in ps.tensors().iter().zip(trainable) {
            vars.push(self.tensor(t, tr));
            shapes.push(t.shape.clone());
        }
        Binding { vars, shapes }
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> (usize, usize) {
        let sa = self.shape(a);
        let sb = self.shape(b);
        assert_eq!(sa, sb, "{what}: shape mismatch {sa:?} vs {sb:?}");
        sa
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let (r, c) = self.shape(a);
        let value = self.nodes[a.0].value.iter().map(|&x| f(x)).collect();
        let rg = self.rg(a);
        self.push(value, r, c, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>, what: &str) -> Var {
        let (r, c) = self.same_shape(a, b, what);
        let value = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(value, r, c, op, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul: inner dimensions {k} vs {k2}");
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, &self.nodes[a.0].value, false, &self.nodes[b.0].value, false, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, m, n, Op::MatMul(a, b), rg)
    }

    /// `x w + b` in one pass, `b` being a single row.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (m, k) = self.shape(x);
        let (k2, n) = self.shape(w);
        assert_eq!(k, k2, "linear: inner dimensions {k} vs {k2}");
        assert_eq!(self.shape(b), (1, n), "linear: bias shape");
        let bias = &self.nodes[b.0].value;
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(bias);
        }
        gemm(m, k, n, &self.nodes[x.0].value, false, &self.nodes[w.0].value, false, &mut out, true);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(out, m, n, Op::Linear(x, w, b), rg)
    }

    /// `x + b` with `b` a single row broadcast over the rows of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let (r, c) = self.shape(x);
        let (br, bc) = self.shape(b);
        assert!(br == 1 && bc == c, "add_bias: bias {br}x{bc} for input {r}x{c}");
        let bias = &self.nodes[b.0].value;
        let mut out = self.nodes[x.0].value.clone();
        for row in out.chunks_exact_mut(c) {
            for (o, &bv) in row.iter_mut().zip(bias) {
                *o = *o + bv;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        self.push(out, r, c, Op::AddBias(x, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b), "mul")
    }

    /// Elementwise minimum; ties send the gradient to `a`.
    pub fn min(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| if y < x { y } else { x }, Op::Min(a, b), "min")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s: T = cst(s);
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let s: T = cst(s);
        self.unary(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.ln(), Op::Log(a))
    }

    /// `ln(1 + e^x)`, computed stably.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        assert_eq!(ra, rb, "concat_cols: row mismatch");
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            out.extend_from_slice(&self.nodes[a.0].value[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&self.nodes[b.0].value[r * cb..(r + 1) * cb]);
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(out, ra, ca + cb, Op::ConcatCols(a, b), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (r, c) = self.shape(a);
        assert!(start + len <= c, "slice_cols out of range");
        let src = &self.nodes[a.0].value;
        let mut out = Vec::with_capacity(r * len);
        for row in 0..r {
            out.extend_from_slice(&src[row * c + start..row * c + start + len]);
        }
        let rg = self.rg(a);
        self.push(out, r, len, Op::SliceCols(a, start), rg)
    }

    /// Per-row sum, `rows x 1`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = self.nodes[a.0].value.chunks_exact(c.max(1)).map(|row| row.iter().copied().sum()).collect();
        let rg = self.rg(a);
        self.push(out, r, 1, Op::SumRows(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.iter().copied().sum();
        let rg = self.rg(a);
        self.push(vec![s], 1, 1, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len();
        let s: T = self.nodes[a.0].value.iter().copied().sum();
        let rg = self.rg(a);
        self.push(vec![s / cst(n as f64)], 1, 1, Op::Mean(a), rg)
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (each `1 x cols`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (r, c) = self.shape(x);
        assert_eq!(self.shape(gamma), (1, c), "layer_norm gamma shape");
        assert_eq!(self.shape(beta), (1, c), "layer_norm beta shape");
        let eps: T = cst(LAYER_NORM_EPS);
        let n: T = cst(c as f64);
        let xv = &self.nodes[x.0].value;
        let gv = &self.nodes[gamma.0].value;
        let bv = &self.nodes[beta.0].value;
        let mut out = vec![T::zero(); r * c];
        let mut xhat = vec![T::zero(); r * c];
        let mut rstd = vec![T::zero(); r];
        for row in 0..r {
            let xs = &xv[row * c..(row + 1) * c];
            let mean = xs.iter().copied().sum::<T>() / n;
            let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[row] = rs;
            for j in 0..c {
                let h = (xs[j] - mean) * rs;
                xhat[row * c + j] = h;
                out[row * c + j] = h * gv[j] + bv[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(out, r, c, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg)
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let mut out = self.nodes[a.0].value.clone();
        for row in out.chunks_exact_mut(c) {
            softmax_in_place(row);
        }
        let rg = self.rg(a);
        self.push(out, r, c, Op::Softmax(a), rg)
    }

    /// Single-head causal scaled dot-product attention over `rows / seq` independent
    /// sequences of length `seq`. Query `i` attends to keys `j <= i` with `key_valid[j]`;
    /// a query without any valid key outputs zeros.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, seq: usize, key_valid: &[bool]) -> Var {
        let (rows, d) = self.same_shape(q, k, "attention q/k");
        self.same_shape(q, v, "attention q/v");
        assert!(seq > 0 && rows % seq == 0, "attention: {rows} rows not divisible by seq {seq}");
        assert_eq!(key_valid.len(), rows, "attention: key mask length");
        let batch = rows / seq;
        let scale: T = cst(1.0 / (d as f64).sqrt());
        let qv = &self.nodes[q.0].value;
        let kv = &self.nodes[k.0].value;
        let vv = &self.nodes[v.0].value;
        let mut probs = vec![T::zero(); batch * seq * seq];
        let mut out = vec![T::zero(); rows * d];
        for b in 0..batch {
            let off = b * seq * d;
            let p = &mut probs[b * seq * seq..(b + 1) * seq * seq];
            gemm(seq, d, seq, &qv[off..off + seq * d], false, &kv[off..off + seq * d], true, p, false);
            for i in 0..seq {
                let row = &mut p[i * seq..(i + 1) * seq];
                let mut max = T::neg_infinity();
                for j in 0..seq {
                    if j <= i && key_valid[b * seq + j] {
                        row[j] = row[j] * scale;
                        if row[j] > max {
                            max = row[j];
                        }
                    }
                }
                if max == T::neg_infinity() {
                    row.iter_mut().for_each(|x| *x = T::zero());
                    continue;
                }
                let mut total = T::zero();
                for j in 0..seq {
                    if j <= i && key_valid[b * seq + j] {
                        row[j] = (row[j] - max).exp();
                        total = total + row[j];
                    } else {
                        row[j] = T::zero();
                    }
                }
                for x in row.iter_mut() {
                    *x = *x / total;
                }
            }
            gemm(seq, seq, d, p, false, &vv[off..off + seq * d], false, &mut out[off..off + seq * d], false);
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(out, rows, d, Op::Attention { q, k, v, seq, probs }, rg)
    }

    /// Elementwise product with a constant (dropout masks).
    pub fn mul_const(&mut self, a: Var, c: Vec<T>) -> Var {
        let (r, cols) = self.shape(a);
        assert_eq!(c.len(), r * cols, "mul_const length");
        let out = self.nodes[a.0].value.iter().zip(&c).map(|(&x, &m)| x * m).collect();
        let rg = self.rg(a);
        self.push(out, r, cols, Op::MulConst(a, c), rg)
    }

    /// Scale every row to unit Euclidean norm.
    pub fn row_normalize(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let eps: T = cst(NORMALIZE_EPS);
        let mut out = self.nodes[a.0].value.clone();
        let mut norms = Vec::with_capacity(r);
        for row in out.chunks_exact_mut(c) {
            let n = row.iter().map(|&x| x * x).sum::<T>().sqrt();
            let d = if n > eps { n } else { eps };
            norms.push(n);
            row.iter_mut().for_each(|x| *x = *x / d);
        }
        let rg = self.rg(a);
        self.push(out, r, c, Op::RowNormalize(a, norms), rg)
    }

    /// Per-row dot product, `rows x 1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let (r, c) = self.same_shape(a, b, "row_dot");
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let out = (0..r)
            .map(|i| (0..c).map(|j| av[i * c + j] * bv[i * c + j]).sum())
            .collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(out, r, 1, Op::RowDot(a, b), rg)
    }

    /// `acos(clamp(x, -1, 1))`; the derivative uses `x` clamped to `±(1 - 1e-6)`.
    pub fn acos_clamp(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(-T::one()).min(T::one()).acos(), Op::AcosClamp(a))
    }

    /// `sum_i w_i a_i` as a 1x1 node.
    pub fn weighted_sum(&mut self, a: Var, w: Vec<T>) -> Var {
        assert_eq!(w.len(), self.nodes[a.0].value.len(), "weighted_sum length");
        let s = self.nodes[a.0].value.iter().zip(&w).map(|(&x, &wi)| x * wi).sum();
        let rg = self.rg(a);
        self.push(vec![s], 1, 1, Op::WeightedSum(a, w), rg)
    }

    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let (r, c) = self.shape(a);
        let src = &self.nodes[a.0].value;
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            assert!(i < r, "gather_rows index {i} out of range {r}");
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let rows = idx.len();
        let rg = self.rg(a);
        self.push(out, rows, c, Op::GatherRows(a, idx), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let c = self.shape(parts[0]).1;
        let mut out = Vec::new();
        let mut rows = 0;
        let mut rg = false;
        for &p in parts {
            let (r, pc) = self.shape(p);
            assert_eq!(pc, c, "concat_rows column mismatch");
            out.extend_from_slice(&self.nodes[p.0].value);
            rows += r;
            rg |= self.rg(p);
        }
        self.push(out, rows, c, Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Reverse pass from a 1x1 `loss` with seed gradient 1.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        let n = self.nodes[loss.0].value.len();
        if n != 1 {
            return Err(Error::shape("backward seed", "1x1 loss", format!("{n} elements")));
        }
        self.backward_with(loss, vec![T::one()])
    }

    /// Reverse pass from `output` seeded with `grad` (same element count as `output`).
    pub fn backward_with(&mut self, output: Var, grad: Vec<T>) -> Result<Gradients<T>> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let out_len = self.nodes[output.0].value.len();
        if grad.len() != out_len {
            return Err(Error::shape("output gradient", out_len, grad.len()));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(grad);
        for i in (0..=output.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            // Interior gradients are dead once propagated; only leaves are reported.
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let (rows, cols) = (node.rows, node.cols);
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(*a);
                let n = cols;
                if self.rg(*a) {
                    let bv = &self.nodes[b.0].value;
                    let ga = self.acc(grads, *a).unwrap();
                    gemm(m, n, k, g, false, bv, true, ga, true);
                }
                if self.rg(*b) {
                    let av = &self.nodes[a.0].value;
                    let gb = self.acc(grads, *b).unwrap();
                    gemm(k, m, n, av, true, g, false, gb, true);
                }
            }
            Op::Linear(x, w, b) => {
                let (m, k) = self.shape(*x);
                let n = cols;
                if self.rg(*x) {
                    let wv = &self.nodes[w.0].value;
                    let gx = self.acc(grads, *x).unwrap();
                    gemm(m, n, k, g, false, wv, true, gx, true);
                }
                if self.rg(*w) {
                    let xv = &self.nodes[x.0].value;
                    let gw = self.acc(grads, *w).unwrap();
                    gemm(k, m, n, xv, true, g, false, gw, true);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for row in g.chunks_exact(cols) {
                        add_into(gb, row);
                    }
                }
            }
            Op::AddBias(x, b) => {
                if let Some(gx) = self.acc(grads, *x) {
                    add_into(gx, g);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for row in g.chunks_exact(cols) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    add_into(gb, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for (d, &s) in gb.iter_mut().zip(g) {
                        *d = *d - s;
                    }
                }
            }
            Op::Mul(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                if let Some(ga) = self.acc(grads, *a) {
                    for j in 0..g.len() {
                        ga[j] = ga[j] + g[j] * bv[j];
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for j in 0..g.len() {
                        gb[j] = gb[j] + g[j] * av[j];
                    }
                }
            }
            Op::Min(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                if let Some(ga) = self.acc(grads, *a) {
                    for j in 0..g.len() {
                        if !(bv[j] < av[j]) {
                            ga[j] = ga[j] + g[j];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for j in 0..g.len() {
                        if bv[j] < av[j] {
                            gb[j] = gb[j] + g[j];
                        }
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (d, &x) in ga.iter_mut().zip(g) {
                        *d = *d + x * *s;
                    }
                }
            }
            Op::AddScalar(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    add_into(ga, g);
                }
            }
            Op::Relu(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for j in 0..g.len() {
                        if y[j] > T::zero() {
                            ga[j] = ga[j] + g[j];
                        }
                    }
                }
            }
            Op::Tanh(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for j in 0..g.len() {
                        ga[j] = ga[j] + g[j] * (T::one() - y[j] * y[j]);
                    }
                }
            }
            Op::Exp(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for j in 0..g.len() {
                        ga[j] = ga[j] + g[j] * y[j];
                    }
                }
            }
            Op::Log(a) => {
                let av = &self.nodes[a.0].value;
                if let Some(ga) = self.acc(grads, *a) {
                    for j in 0..g.len() {
                        ga[j] = ga[j] + g[j] / av[j];
                    }
                }
            }
            Op::Softplus(a) => {
                let av = &self.nodes[a.0].value;
                if let Some(ga) = self.acc(grads, *a) {
                    for j in 0..g.len() {
                        ga[j] = ga[j] + g[j] * sigmoid(av[j]);
                    }
                }
            }
            Op::Square(a) => {
                let av = &self.nodes[a.0].value;
                if let Some(ga) = self.acc(grads, *a) {
                    let two: T = cst(2.0);
                    for j in 0..g.len() {
                        ga[j] = ga[j] + g[j] * two * av[j];
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let ca = self.shape(*a).1;
                let cb = self.shape(*b).1;
                if let Some(ga) = self.acc(grads, *a) {
                    for r in 0..rows {
                        add_into(&mut ga[r * ca..(r + 1) * ca], &g[r * cols..r * cols + ca]);
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for r in 0..rows {
                        add_into(&mut gb[r * cb..(r + 1) * cb], &g[r * cols + ca..(r + 1) * cols]);
                    }
                }
            }
            Op::SliceCols(a, start) => {
                let ca = self.shape(*a).1;
                if let Some(ga) = self.acc(grads, *a) {
                    for r in 0..rows {
                        add_into(&mut ga[r * ca + start..r * ca + start + cols], &g[r * cols..(r + 1) * cols]);
                    }
                }
            }
            Op::SumRows(a) => {
                let ca = self.shape(*a).1;
                if let Some(ga) = self.acc(grads, *a) {
                    for r in 0..rows {
                        for j in 0..ca {
                            ga[r * ca + j] = ga[r * ca + j] + g[r];
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().for_each(|d| *d = *d + g[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let s = g[0] / cst(ga.len() as f64);
                    ga.iter_mut().for_each(|d| *d = *d + s);
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let gv = &self.nodes[gamma.0].value;
                if let Some(gg) = self.acc(grads, *gamma) {
                    for r in 0..rows {
                        for j in 0..cols {
                            gg[j] = gg[j] + g[r * cols + j] * xhat[r * cols + j];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *beta) {
                    for row in g.chunks_exact(cols) {
                        add_into(gb, row);
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    let n: T = cst(cols as f64);
                    let mut dxhat = vec![T::zero(); cols];
                    for r in 0..rows {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..cols {
                            let d = g[r * cols + j] * gv[j];
                            dxhat[j] = d;
                            s1 = s1 + d;
                            s2 = s2 + d * xhat[r * cols + j];
                        }
                        let k = rstd[r] / n;
                        for j in 0..cols {
                            let h = xhat[r * cols + j];
                            gx[r * cols + j] = gx[r * cols + j] + k * (n * dxhat[j] - s1 - h * s2);
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                        for j in 0..cols {
                            ga[r * cols + j] = ga[r * cols + j] + yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::Attention { q, k, v, seq, probs } => self.attention_backward(*q, *k, *v, *seq, probs, g, grads),
            Op::MulConst(a, c) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for j in 0..g.len() {
                        ga[j] = ga[j] + g[j] * c[j];
                    }
                }
            }
            Op::RowNormalize(a, norms) => {
                let eps: T = cst(NORMALIZE_EPS);
                if let Some(ga) = self.acc(grads, *a) {
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let n = norms[r];
                        if n > eps {
                            let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                            for j in 0..cols {
                                ga[r * cols + j] = ga[r * cols + j] + (gr[j] - yr[j] * dot) / n;
                            }
                        } else {
                            for j in 0..cols {
                                ga[r * cols + j] = ga[r * cols + j] + gr[j] / eps;
                            }
                        }
                    }
                }
            }
            Op::RowDot(a, b) => {
                let c = self.shape(*a).1;
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                if let Some(ga) = self.acc(grads, *a) {
                    for r in 0..rows {
                        for j in 0..c {
                            ga[r * c + j] = ga[r * c + j] + g[r] * bv[r * c + j];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for r in 0..rows {
                        for j in 0..c {
                            gb[r * c + j] = gb[r * c + j] + g[r] * av[r * c + j];
                        }
                    }
                }
            }
            Op::AcosClamp(a) => {
                let av = &self.nodes[a.0].value;
                let hi: T = cst(1.0 - ACOS_CLAMP);
                if let Some(ga) = self.acc(grads, *a) {
                    for j in 0..g.len() {
                        let c = av[j].max(-hi).min(hi);
                        ga[j] = ga[j] - g[j] / (T::one() - c * c).sqrt();
                    }
                }
            }
            Op::WeightedSum(a, w) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for j in 0..w.len() {
                        ga[j] = ga[j] + g[0] * w[j];
                    }
                }
            }
            Op::GatherRows(a, idx) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (r, &src) in idx.iter().enumerate() {
                        add_into(&mut ga[src * cols..(src + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.len();
                    if let Some(gp) = self.acc(grads, p) {
                        add_into(gp, &g[off..off + len]);
                    }
                    off += len;
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        seq: usize,
        probs: &[T],
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (rows, d) = self.shape(q);
        let batch = rows / seq;
        let scale: T = cst(1.0 / (d as f64).sqrt());
        let qv = &self.nodes[q.0].value;
        let kv = &self.nodes[k.0].value;
        let vv = &self.nodes[v.0].value;
        let mut dq = vec![T::zero(); rows * d];
        let mut dk = vec![T::zero(); rows * d];
        let mut dv = vec![T::zero(); rows * d];
        let mut dp = vec![T::zero(); seq * seq];
        for b in 0..batch {
            let off = b * seq * d;
            let p = &probs[b * seq * seq..(b + 1) * seq * seq];
            let go = &g[off..off + seq * d];
            // dV = P^T dO
            gemm(seq, seq, d, p, true, go, false, &mut dv[off..off + seq * d], false);
            // dP = dO V^T
            gemm(seq, d, seq, go, false, &vv[off..off + seq * d], true, &mut dp, false);
            // dS = P * (dP - rowsum(dP * P)), pre-scaled by 1/sqrt(d)
            for i in 0..seq {
                let pr = &p[i * seq..(i + 1) * seq];
                let dr = &mut dp[i * seq..(i + 1) * seq];
                let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                for j in 0..seq {
                    dr[j] = pr[j] * (dr[j] - dot) * scale;
                }
            }
            gemm(seq, seq, d, &dp, false, &kv[off..off + seq * d], false, &mut dq[off..off + seq * d], false);
            gemm(seq, seq, d, &dp, true, &qv[off..off + seq * d], false, &mut dk[off..off + seq * d], false);
        }
        if let Some(gq) = self.acc(grads, q) {
            add_into(gq, &dq);
        }
        if let Some(gk) = self.acc(grads, k) {
            add_into(gk, &dk);
        }
        if let Some(gv) = self.acc(grads, v) {
            add_into(gv, &dv);
        }
    }
}

#[inline]
fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total = total + *x;
    }
    for x in row.iter_mut() {
        *x = *x / total;
    }
}
