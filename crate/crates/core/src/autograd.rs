//! Reverse-mode automatic differentiation over dense row-major `f64` matrices.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its forward
//! value and the handles of its inputs. [`Graph::backward`] walks the tape in
//! reverse and accumulates gradients. Parameters live outside the graph in a
//! [`ParamStore`]; each parameter is materialised at most once per graph so a
//! parameter used from several call sites (e.g. two decoders sharing weights)
//! accumulates a single gradient.

use std::collections::HashMap;
use std::rc::Rc;

use crate::nn::{ParamId, ParamStore};

/// Dense row-major matrix. Scalars are `1 x 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Self { rows, cols, data: vec![v; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor shape {rows}x{cols} does not match data length {}", data.len());
        Self { rows, cols, data }
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_vec(1, 1, vec![v])
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on a {}x{} tensor", self.rows, self.cols);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.cols, other.rows, "matmul {}x{} by {}x{}", self.rows, self.cols, other.rows, other.cols);
        let mut out = Tensor::zeros(self.rows, other.cols);
        let n = other.cols;
        for i in 0..self.rows {
            let out_row = &mut out.data[i * n..(i + 1) * n];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * n..(k + 1) * n];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape(), other.shape(), "elementwise op shape mismatch");
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Index map used by [`Graph::gather`]: `out[i] = src[idx[i]]`, or 0 where
/// the entry is `u32::MAX`.
pub const GATHER_ZERO: u32 = u32::MAX;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Max(Var, Var),
    Min(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Exp(Var),
    Ln(Var),
    Abs(Var),
    Sqrt(Var),
    Sin(Var),
    SumAll(Var),
    SumRows(Var),
    SumCols(Var),
    Gather(Var, Rc<Vec<u32>>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SoftmaxRows(Var),
    LogSumExpRows(Var),
    LayerNormRows(Var, f64),
    L2NormalizeRows(Var, f64),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf | Param => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | Max(a, b) | Min(a, b)
            | AddRow(a, b) | MulRow(a, b) | MulCol(a, b) => vec![*a, *b],
            Scale(a, _) | AddScalar(a) | Relu(a) | Sigmoid(a) | LogSigmoid(a) | Exp(a) | Ln(a)
            | Abs(a) | Sqrt(a) | Sin(a) | SumAll(a) | SumRows(a) | SumCols(a) | Gather(a, _)
            | SoftmaxRows(a) | LogSumExpRows(a) | LayerNormRows(a, _) | L2NormalizeRows(a, _) => vec![*a],
            ConcatRows(v) | ConcatCols(v) => v.clone(),
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every parameter that was materialised on the graph.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> + '_ {
        self.params.iter().filter_map(move |(id, v)| self.grads[v.0].as_ref().map(|g| (*id, g)))
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    param_order: Vec<(ParamId, Var)>,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sigmoid(x: f64) -> f64 {
    // log(sigmoid(x)) = -softplus(-x)
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Param => true,
            other => other.inputs().iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Constant input (no gradient is tracked unless requested via [`Graph::input`]).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Differentiable leaf; its gradient is available from [`Gradients::wrt`].
    pub fn input(&mut self, t: Tensor) -> Var {
        let v = self.push(t, Op::Param);
        v
    }

    /// Materialise a stored parameter on this graph (at most once).
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        let v = self.push(store.get(id).clone(), Op::Param);
        self.param_vars.insert(id, v);
        self.param_order.push((id, v));
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip(self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip(self.value(b), |x, y| x - y);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip(self.value(b), |x, y| x * y);
        self.push(out, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip(self.value(b), |x, y| x / y);
        self.push(out, Op::Div(a, b))
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn max(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip(self.value(b), f64::max);
        self.push(out, Op::Max(a, b))
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn min(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip(self.value(b), f64::min);
        self.push(out, Op::Min(a, b))
    }

    /// `a (r x c) + row (1 x c)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (ta, tr) = (self.value(a), self.value(row));
        assert_eq!((1, ta.cols), tr.shape(), "add_row expects a 1x{} row", ta.cols);
        let mut out = ta.clone();
        for r in 0..out.rows {
            for (o, b) in out.data[r * out.cols..(r + 1) * out.cols].iter_mut().zip(&tr.data) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, row))
    }

    /// `a (r x c) * row (1 x c)` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (ta, tr) = (self.value(a), self.value(row));
        assert_eq!((1, ta.cols), tr.shape(), "mul_row expects a 1x{} row", ta.cols);
        let mut out = ta.clone();
        for r in 0..out.rows {
            for (o, b) in out.data[r * out.cols..(r + 1) * out.cols].iter_mut().zip(&tr.data) {
                *o *= b;
            }
        }
        self.push(out, Op::MulRow(a, row))
    }

    /// `a (r x c) * col (r x 1)` broadcast over columns.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (ta, tc) = (self.value(a), self.value(col));
        assert_eq!((ta.rows, 1), tc.shape(), "mul_col expects a {}x1 column", ta.rows);
        let mut out = ta.clone();
        for r in 0..out.rows {
            let s = tc.data[r];
            for o in &mut out.data[r * out.cols..(r + 1) * out.cols] {
                *o *= s;
            }
        }
        self.push(out, Op::MulCol(a, col))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x + s);
        self.push(out, Op::AddScalar(a))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// `s - a`
    pub fn rsub_scalar(&mut self, s: f64, a: Var) -> Var {
        let n = self.neg(a);
        self.add_scalar(n, s)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(log_sigmoid);
        self.push(out, Op::LogSigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        self.push(out, Op::Ln(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::abs);
        self.push(out, Op::Abs(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::sqrt);
        self.push(out, Op::Sqrt(a))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::sin);
        self.push(out, Op::Sin(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    /// Sum of all entries, `1 x 1`.
    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Column sums: `r x c -> 1 x c`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut out = Tensor::zeros(1, t.cols);
        for r in 0..t.rows {
            for (o, v) in out.data.iter_mut().zip(t.row(r)) {
                *o += v;
            }
        }
        self.push(out, Op::SumRows(a))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let n = self.value(a).rows as f64;
        let s = self.sum_rows(a);
        self.scale(s, 1.0 / n)
    }

    /// Row sums: `r x c -> r x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::from_vec(t.rows, 1, (0..t.rows).map(|r| t.row(r).iter().sum()).collect());
        self.push(out, Op::SumCols(a))
    }

    /// Generic linear index map. `idx` has `rows * cols` entries indexing the
    /// flattened source, with [`GATHER_ZERO`] producing a zero.
    pub fn gather(&mut self, a: Var, rows: usize, cols: usize, idx: Rc<Vec<u32>>) -> Var {
        assert_eq!(idx.len(), rows * cols, "gather index length");
        let src = &self.value(a).data;
        let data = idx
            .iter()
            .map(|&i| if i == GATHER_ZERO { 0.0 } else { src[i as usize] })
            .collect();
        self.push(Tensor::from_vec(rows, cols, data), Op::Gather(a, idx))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let idx: Vec<u32> = (0..c).flat_map(|j| (0..r).map(move |i| (i * c + j) as u32)).collect();
        self.gather(a, c, r, Rc::new(idx))
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let (_, c) = self.shape(a);
        let idx: Vec<u32> = rows.iter().flat_map(|&r| (0..c).map(move |j| (r * c + j) as u32)).collect();
        self.gather(a, rows.len(), c, Rc::new(idx))
    }

    pub fn select_cols(&mut self, a: Var, cols: std::ops::Range<usize>) -> Var {
        let (r, c) = self.shape(a);
        let w = cols.len();
        let idx: Vec<u32> = (0..r).flat_map(|i| cols.clone().map(move |j| (i * c + j) as u32)).collect();
        self.gather(a, r, w, Rc::new(idx))
    }

    /// Repeat a `1 x c` row `n` times.
    pub fn repeat_row(&mut self, a: Var, n: usize) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(r, 1, "repeat_row expects a single row");
        let idx: Vec<u32> = (0..n).flat_map(|_| 0..c as u32).collect();
        self.gather(a, n, c, Rc::new(idx))
    }

    /// Reinterpret the flat buffer under a new shape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let n = self.value(a).len();
        assert_eq!(n, rows * cols, "reshape size mismatch");
        self.gather(a, rows, cols, Rc::new((0..n as u32).collect()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = self.value(*p);
            assert_eq!(t.cols, cols, "concat_rows column mismatch");
            data.extend_from_slice(&t.data);
            rows += t.rows;
        }
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for p in parts {
            let t = self.value(*p);
            assert_eq!(t.rows, rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.data[r * cols + off..r * cols + off + t.cols].copy_from_slice(t.row(r));
            }
            off += t.cols;
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut out = t.clone();
        for r in 0..t.rows {
            let row = &mut out.data[r * t.cols..(r + 1) * t.cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    /// Numerically stable log-sum-exp of each row: `r x c -> r x 1`.
    pub fn logsumexp_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = (0..t.rows)
            .map(|r| {
                let row = t.row(r);
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
            })
            .collect();
        self.push(Tensor::from_vec(t.rows, 1, data), Op::LogSumExpRows(a))
    }

    /// Per-row standardisation (no affine part).
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let t = self.value(a);
        let mut out = t.clone();
        let n = t.cols as f64;
        for r in 0..t.rows {
            let row = &mut out.data[r * t.cols..(r + 1) * t.cols];
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
        }
        self.push(out, Op::LayerNormRows(a, eps))
    }

    /// `x / sqrt(|x|^2 + eps)` per row.
    pub fn l2_normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let t = self.value(a);
        let mut out = t.clone();
        for r in 0..t.rows {
            let row = &mut out.data[r * t.cols..(r + 1) * t.cols];
            let inv = 1.0 / (row.iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
            for v in row.iter_mut() {
                *v *= inv;
            }
        }
        self.push(out, Op::L2NormalizeRows(a, eps))
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).len(), 1, "backward expects a scalar output");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::scalar(1.0));
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads, params: self.param_order.clone() }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let val = |v: &Var| &self.nodes[v.0].value;
        let needs = |v: &Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                if needs(a) {
                    acc(*a, g.matmul(&val(b).transpose()));
                }
                if needs(b) {
                    acc(*b, val(a).transpose().matmul(g));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if a == b {
                    acc(*a, g.zip(val(a), |gg, x| 2.0 * gg * x));
                } else {
                    acc(*a, g.zip(val(b), |gg, y| gg * y));
                    acc(*b, g.zip(val(a), |gg, x| gg * x));
                }
            }
            Op::Div(a, b) => {
                acc(*a, g.zip(val(b), |gg, y| gg / y));
                let (ta, tb) = (val(a), val(b));
                let data = g
                    .data
                    .iter()
                    .zip(ta.data.iter().zip(&tb.data))
                    .map(|(gg, (x, y))| -gg * x / (y * y))
                    .collect();
                acc(*b, Tensor::from_vec(g.rows, g.cols, data));
            }
            Op::Max(a, b) | Op::Min(a, b) => {
                let is_max = matches!(node.op, Op::Max(..));
                let (ta, tb) = (val(a), val(b));
                let mut ga = Tensor::zeros(g.rows, g.cols);
                let mut gb = Tensor::zeros(g.rows, g.cols);
                for k in 0..g.len() {
                    let pick_a = if is_max { ta.data[k] >= tb.data[k] } else { ta.data[k] <= tb.data[k] };
                    if pick_a {
                        ga.data[k] = g.data[k];
                    } else {
                        gb.data[k] = g.data[k];
                    }
                }
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                if needs(row) {
                    let mut gr = Tensor::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (o, v) in gr.data.iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    acc(*row, gr);
                }
            }
            Op::MulRow(a, row) => {
                let (ta, tr) = (val(a), val(row));
                if needs(a) {
                    let mut ga = g.clone();
                    for r in 0..g.rows {
                        for (o, s) in ga.data[r * g.cols..(r + 1) * g.cols].iter_mut().zip(&tr.data) {
                            *o *= s;
                        }
                    }
                    acc(*a, ga);
                }
                if needs(row) {
                    let mut gr = Tensor::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            gr.data[c] += g.at(r, c) * ta.at(r, c);
                        }
                    }
                    acc(*row, gr);
                }
            }
            Op::MulCol(a, col) => {
                let (ta, tc) = (val(a), val(col));
                if needs(a) {
                    let mut ga = g.clone();
                    for r in 0..g.rows {
                        let s = tc.data[r];
                        for o in &mut ga.data[r * g.cols..(r + 1) * g.cols] {
                            *o *= s;
                        }
                    }
                    acc(*a, ga);
                }
                if needs(col) {
                    let data = (0..g.rows)
                        .map(|r| g.row(r).iter().zip(ta.row(r)).map(|(x, y)| x * y).sum())
                        .collect();
                    acc(*col, Tensor::from_vec(g.rows, 1, data));
                }
            }
            Op::Scale(a, s) => acc(*a, g.map(|x| x * s)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::Relu(a) => acc(*a, g.zip(val(a), |gg, x| if x > 0.0 { gg } else { 0.0 })),
            Op::Sigmoid(a) => acc(*a, g.zip(out, |gg, s| gg * s * (1.0 - s))),
            Op::LogSigmoid(a) => acc(*a, g.zip(val(a), |gg, x| gg * (1.0 - sigmoid(x)))),
            Op::Exp(a) => acc(*a, g.zip(out, |gg, e| gg * e)),
            Op::Ln(a) => acc(*a, g.zip(val(a), |gg, x| gg / x)),
            Op::Abs(a) => acc(*a, g.zip(val(a), |gg, x| if x >= 0.0 { gg } else { -gg })),
            Op::Sqrt(a) => acc(*a, g.zip(out, |gg, s| gg * 0.5 / s)),
            Op::Sin(a) => acc(*a, g.zip(val(a), |gg, x| gg * x.cos())),
            Op::SumAll(a) => {
                let (r, c) = val(a).shape();
                acc(*a, Tensor::filled(r, c, g.item()));
            }
            Op::SumRows(a) => {
                let (r, c) = val(a).shape();
                let mut ga = Tensor::zeros(r, c);
                for i in 0..r {
                    ga.data[i * c..(i + 1) * c].copy_from_slice(&g.data);
                }
                acc(*a, ga);
            }
            Op::SumCols(a) => {
                let (r, c) = val(a).shape();
                let mut ga = Tensor::zeros(r, c);
                for i in 0..r {
                    for v in &mut ga.data[i * c..(i + 1) * c] {
                        *v = g.data[i];
                    }
                }
                acc(*a, ga);
            }
            Op::Gather(a, idx) => {
                let (r, c) = val(a).shape();
                let mut ga = Tensor::zeros(r, c);
                for (k, &j) in idx.iter().enumerate() {
                    if j != GATHER_ZERO {
                        ga.data[j as usize] += g.data[k];
                    }
                }
                acc(*a, ga);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let (r, c) = val(p).shape();
                    acc(*p, Tensor::from_vec(r, c, g.data[off..off + r * c].to_vec()));
                    off += r * c;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let (r, c) = val(p).shape();
                    let mut gp = Tensor::zeros(r, c);
                    for i in 0..r {
                        gp.data[i * c..(i + 1) * c].copy_from_slice(&g.data[i * g.cols + off..i * g.cols + off + c]);
                    }
                    acc(*p, gp);
                    off += c;
                }
            }
            Op::SoftmaxRows(a) => {
                let mut ga = Tensor::zeros(g.rows, g.cols);
                for r in 0..g.rows {
                    let (y, gy) = (out.row(r), g.row(r));
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for c in 0..g.cols {
                        ga.data[r * g.cols + c] = y[c] * (gy[c] - dot);
                    }
                }
                acc(*a, ga);
            }
            Op::LogSumExpRows(a) => {
                let ta = val(a);
                let mut ga = Tensor::zeros(ta.rows, ta.cols);
                for r in 0..ta.rows {
                    let lse = out.data[r];
                    for c in 0..ta.cols {
                        ga.data[r * ta.cols + c] = g.data[r] * (ta.at(r, c) - lse).exp();
                    }
                }
                acc(*a, ga);
            }
            Op::LayerNormRows(a, eps) => {
                let ta = val(a);
                let n = ta.cols as f64;
                let mut ga = Tensor::zeros(ta.rows, ta.cols);
                for r in 0..ta.rows {
                    let x = ta.row(r);
                    let mean = x.iter().sum::<f64>() / n;
                    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    let inv = 1.0 / (var + eps).sqrt();
                    let (y, gy) = (out.row(r), g.row(r));
                    let gmean = gy.iter().sum::<f64>() / n;
                    let gydot = gy.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / n;
                    for c in 0..ta.cols {
                        ga.data[r * ta.cols + c] = inv * (gy[c] - gmean - y[c] * gydot);
                    }
                }
                acc(*a, ga);
            }
            Op::L2NormalizeRows(a, eps) => {
                let ta = val(a);
                let mut ga = Tensor::zeros(ta.rows, ta.cols);
                for r in 0..ta.rows {
                    let x = ta.row(r);
                    let inv = 1.0 / (x.iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
                    let (y, gy) = (out.row(r), g.row(r));
                    let dot: f64 = gy.iter().zip(y).map(|(a, b)| a * b).sum();
                    for c in 0..ta.cols {
                        ga.data[r * ta.cols + c] = inv * (gy[c] - y[c] * dot);
                    }
                }
                acc(*a, ga);
            }
        }
    }
}

/// Outcome of [`check_gradients`].
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    pub checked: usize,
}

/// Compare reverse-mode gradients of `f` against central finite differences.
///
/// `f` rebuilds the graph from scratch for the given leaf values and returns
/// the scalar output together with the leaf handles. Up to `max_coords`
/// coordinates per leaf are probed (evenly strided).
pub fn check_gradients<F>(leaves: &[Tensor], max_coords: usize, step: f64, f: F) -> GradCheck
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let eval = |vals: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out).item()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = leaves.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out);

    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut vals = leaves.to_vec();
    for (li, leaf) in leaves.iter().enumerate() {
        let analytic = grads.wrt(vars[li]).cloned().unwrap_or_else(|| Tensor::zeros(leaf.rows, leaf.cols));
        let stride = (leaf.len() / max_coords.max(1)).max(1);
        for k in (0..leaf.len()).step_by(stride) {
            let orig = vals[li].data[k];
            vals[li].data[k] = orig + step;
            let plus = eval(&vals);
            vals[li].data[k] = orig - step;
            let minus = eval(&vals);
            vals[li].data[k] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.data[k];
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((a - numeric).abs() / denom);
            checked += 1;
        }
    }
    GradCheck { max_rel_error: worst, checked }
}
