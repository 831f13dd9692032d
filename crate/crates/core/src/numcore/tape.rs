//! Reverse-mode differentiation over a linear operation tape.
//!
//! Every operation appends a node holding its forward value. `backward`
//! walks the nodes in reverse application order and accumulates
//! vector-Jacobian products into the inputs that require gradients.

use alloc::vec;
use alloc::vec::Vec;

use super::tensor::{axis_split, matmul_a_bt_acc, matmul_acc, matmul_at_b_acc, Tensor};
use crate::error::{contract, dim_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ClampMin(Var, f64),
    Sigmoid(Var),
    Relu(Var),
    Gelu(Var),
    Ln(Var),
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, inv_std: Vec<f64> },
    L2NormalizeRows { x: Var, norms: Vec<f64> },
    RowNormalize { x: Var, sums: Vec<f64> },
    AddRowVec(Var, Var),
    MulRowVec(Var, Var),
    AddColVec(Var, Var),
    MulColVec(Var, Var),
    Reshape(Var),
    Transpose(Var),
    Permute { x: Var, perm: Vec<usize> },
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Sum(Var),
    Mean(Var),
    RowSums(Var),
    ColSums(Var),
    Conv2d { x: Var, w: Var, b: Option<Var> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::ClampMin(..) => "clamp_min",
            Op::Sigmoid(..) => "sigmoid",
            Op::Relu(..) => "relu",
            Op::Gelu(..) => "gelu",
            Op::Ln(..) => "ln",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::L2NormalizeRows { .. } => "l2_normalize_rows",
            Op::RowNormalize { .. } => "row_normalize",
            Op::AddRowVec(..) => "add_row_vector",
            Op::MulRowVec(..) => "mul_row_vector",
            Op::AddColVec(..) => "add_col_vector",
            Op::MulColVec(..) => "mul_col_vector",
            Op::Reshape(..) => "reshape",
            Op::Transpose(..) => "transpose",
            Op::Permute { .. } => "permute",
            Op::SliceCols { .. } => "slice_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::GatherRows { .. } => "gather_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::RowSums(..) => "row_sums",
            Op::ColSums(..) => "col_sums",
            Op::Conv2d { .. } => "conv2d",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Operation recorder. Single-threaded; build one per sample.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    order: Vec<usize>,
}

impl Gradients {
    /// Gradient with respect to `v`, or `None` when `v` does not influence
    /// the loss or does not require gradients.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient with respect to `v`; exactly zero when `v` does not
    /// influence the loss.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape().to_vec()))
    }

    /// Node indices in the order backward visited them.
    pub fn visit_order(&self) -> &[usize] {
        &self.order
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(dim_err(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn rows_cols(t: &Tensor) -> (usize, usize) {
    let s = t.shape();
    match s.len() {
        0 => (1, 1),
        1 => (1, s[0]),
        _ => {
            let c = s[s.len() - 1];
            (t.len() / c, c)
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

fn permuted_shape(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    perm.iter().map(|&p| shape[p]).collect()
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Calls `f(out_index, in_index)` for every element of `x.permute(perm)`.
fn for_each_permuted(shape: &[usize], perm: &[usize], mut f: impl FnMut(usize, usize)) {
    let in_strides = strides(shape);
    let out_shape = permuted_shape(shape, perm);
    let n: usize = shape.iter().product();
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    for out in 0..n {
        let mut src = 0;
        for d in 0..rank {
            src += idx[d] * in_strides[perm[d]];
        }
        f(out, src);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

/// Lowers one `[cin×h×w]` image into `[cin·k·k × h·w]` columns (zero padded).
fn im2col(x: &[f64], cin: usize, h: usize, w: usize, k: usize, cols: &mut [f64]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for c in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - pad;
                        dst[y * w + xx] =
                            if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                                x[(c * h + sy as usize) * w + sx as usize]
                            } else {
                                0.0
                            };
                    }
                }
            }
        }
    }
}

fn col2im_acc(cols: &[f64], cin: usize, h: usize, w: usize, k: usize, dx: &mut [f64]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for c in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - pad;
                        if sx >= 0 && sx < w as isize {
                            dx[(c * h + sy as usize) * w + sx as usize] += src[y * w + xx];
                        }
                    }
                }
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Names of the recorded operations in application order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    /// Leaf that receives gradients.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.raw_push(t, Op::Leaf, true)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.raw_push(t, Op::Leaf, false)
    }

    fn raw_push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(op.name()));
        }
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.raw_push(value, op, rg))
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let t = self.value(x).map(f);
        self.push(t, op, &[x])
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(op.name(), ta, tb)?;
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push(t, op, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.unary(x, Op::Scale(x, s), |v| v * s)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        self.unary(x, Op::AddScalar(x), |v| v + s)
    }

    /// `max(x, lo)`; clamped elements pass no gradient.
    pub fn clamp_min(&mut self, x: Var, lo: f64) -> Result<Var> {
        self.unary(x, Op::ClampMin(x, lo), |v| v.max(lo))
    }

    /// `1 - x`
    pub fn one_minus(&mut self, x: Var) -> Result<Var> {
        let n = self.scale(x, -1.0)?;
        self.add_scalar(n, 1.0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Gelu(x), |v| {
            0.5 * v * (1.0 + libm::tanh(GELU_K * (v + GELU_C * v * v * v)))
        })
    }

    /// Natural logarithm; non-positive input yields a non-finite error.
    pub fn ln(&mut self, x: Var) -> Result<Var> {
        self.unary(
            x,
            Op::Ln(x),
            |v| if v > 0.0 { libm::log(v) } else { f64::NAN },
        )
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x).softmax(axis)?;
        self.push(t, Op::Softmax { x, axis }, &[x])
    }

    /// Normalises each row (last axis) to zero mean and unit variance.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = rows_cols(t);
        let mut out = t.data().to_vec();
        let mut inv_std = Vec::with_capacity(r);
        for row in out.chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / libm::sqrt(var + eps);
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        let t = Tensor::from_parts(t.shape().to_vec(), out);
        self.push(t, Op::LayerNorm { x, inv_std }, &[x])
    }

    /// Scales each row to unit L2 norm; all-zero rows stay zero.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (_, c) = rows_cols(t);
        let mut out = t.data().to_vec();
        let mut norms = Vec::new();
        for row in out.chunks_mut(c) {
            let n = libm::sqrt(row.iter().map(|v| v * v).sum::<f64>());
            if n > 0.0 {
                row.iter_mut().for_each(|v| *v /= n);
            }
            norms.push(n);
        }
        let t = Tensor::from_parts(t.shape().to_vec(), out);
        self.push(t, Op::L2NormalizeRows { x, norms }, &[x])
    }

    /// Divides each row of a square matrix by its sum; an all-zero row is
    /// replaced by the matching identity row.
    pub fn row_normalize(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = t.dims2()?;
        if r != c {
            return Err(dim_err("row_normalize", t.shape(), &[c, r]));
        }
        let mut out = t.data().to_vec();
        let mut sums = Vec::with_capacity(r);
        for (i, row) in out.chunks_mut(c).enumerate() {
            let s: f64 = row.iter().sum();
            if s != 0.0 {
                row.iter_mut().for_each(|v| *v /= s);
            } else {
                row.iter_mut().for_each(|v| *v = 0.0);
                row[i] = 1.0;
            }
            sums.push(s);
        }
        let t = Tensor::from_parts(t.shape().to_vec(), out);
        self.push(t, Op::RowNormalize { x, sums }, &[x])
    }

    fn broadcast_vec(&mut self, x: Var, v: Var, along_rows: bool, mul: bool) -> Result<Var> {
        let (tx, tv) = (self.value(x), self.value(v));
        let (r, c) = rows_cols(tx);
        let need = if along_rows { c } else { r };
        if tv.len() != need {
            return Err(dim_err("broadcast_vector", tx.shape(), tv.shape()));
        }
        let vd = tv.data();
        let mut out = tx.data().to_vec();
        for (i, row) in out.chunks_mut(c).enumerate() {
            for (j, o) in row.iter_mut().enumerate() {
                let b = if along_rows { vd[j] } else { vd[i] };
                if mul {
                    *o *= b
                } else {
                    *o += b
                }
            }
        }
        let t = Tensor::from_parts(tx.shape().to_vec(), out);
        let op = match (along_rows, mul) {
            (true, false) => Op::AddRowVec(x, v),
            (true, true) => Op::MulRowVec(x, v),
            (false, false) => Op::AddColVec(x, v),
            (false, true) => Op::MulColVec(x, v),
        };
        self.push(t, op, &[x, v])
    }

    /// Adds `v[c]` to every row of `x[r×c]` (bias add).
    pub fn add_row_vector(&mut self, x: Var, v: Var) -> Result<Var> {
        self.broadcast_vec(x, v, true, false)
    }

    /// Multiplies every row of `x[r×c]` elementwise by `v[c]`.
    pub fn mul_row_vector(&mut self, x: Var, v: Var) -> Result<Var> {
        self.broadcast_vec(x, v, true, true)
    }

    /// Adds `v[i]` to every element of row `i`.
    pub fn add_col_vector(&mut self, x: Var, v: Var) -> Result<Var> {
        self.broadcast_vec(x, v, false, false)
    }

    /// Multiplies row `i` of `x[r×c]` by `v[i]`.
    pub fn mul_col_vector(&mut self, x: Var, v: Var) -> Result<Var> {
        self.broadcast_vec(x, v, false, true)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        self.push(t, Op::Reshape(x), &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).transpose()?;
        self.push(t, Op::Transpose(x), &[x])
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let rank = t.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank
            || perm
                .iter()
                .any(|&p| p >= rank || core::mem::replace(&mut seen[p], true))
        {
            return Err(dim_err("permute", t.shape(), perm));
        }
        let mut out = vec![0.0; t.len()];
        let src = t.data();
        for_each_permuted(t.shape(), perm, |o, i| out[o] = src[i]);
        let t = Tensor::from_parts(permuted_shape(t.shape(), perm), out);
        self.push(
            t,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            &[x],
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = t.dims2()?;
        if len == 0 || start + len > c {
            return Err(dim_err("slice_cols", t.shape(), &[start, len]));
        }
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&t.data()[i * c + start..i * c + start + len]);
        }
        let t = Tensor::from_parts(vec![r, len], out);
        self.push(t, Op::SliceCols { x, start }, &[x])
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = t.dims2()?;
        if len == 0 || start + len > r {
            return Err(dim_err("slice_rows", t.shape(), &[start, len]));
        }
        let out = t.data()[start * c..(start + len) * c].to_vec();
        let t = Tensor::from_parts(vec![len, c], out);
        self.push(t, Op::SliceRows { x, start }, &[x])
    }

    /// Selects rows of a rank-2 tensor by index (duplicates allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = t.dims2()?;
        if idx.is_empty() || idx.iter().any(|&i| i >= r) {
            return Err(dim_err("gather_rows", t.shape(), idx));
        }
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&t.data()[i * c..(i + 1) * c]);
        }
        let t = Tensor::from_parts(vec![idx.len(), c], out);
        self.push(
            t,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        )
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(contract("concat_cols of nothing"));
        }
        let (r, _) = self.value(xs[0]).dims2()?;
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let (ri, ci) = self.value(x).dims2()?;
            if ri != r {
                return Err(dim_err("concat_cols", self.shape(xs[0]), self.shape(x)));
            }
            widths.push(ci);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&x, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(x).data()[i * w..(i + 1) * w]);
            }
        }
        let t = Tensor::from_parts(vec![r, total], out);
        self.push(t, Op::ConcatCols(xs.to_vec()), xs)
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(contract("concat_rows of nothing"));
        }
        let (_, c) = self.value(xs[0]).dims2()?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &x in xs {
            let (ri, ci) = self.value(x).dims2()?;
            if ci != c {
                return Err(dim_err("concat_rows", self.shape(xs[0]), self.shape(x)));
            }
            rows += ri;
            out.extend_from_slice(self.value(x).data());
        }
        let t = Tensor::from_parts(vec![rows, c], out);
        self.push(t, Op::ConcatRows(xs.to_vec()), xs)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let t = Tensor::scalar(self.value(x).sum());
        self.push(t, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let t = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(t, Op::Mean(x), &[x])
    }

    /// `[r×c] -> [r]`
    pub fn row_sums(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = t.dims2()?;
        let out = (0..r)
            .map(|i| t.data()[i * c..(i + 1) * c].iter().sum())
            .collect();
        let t = Tensor::from_parts(vec![r], out);
        self.push(t, Op::RowSums(x), &[x])
    }

    /// `[r×c] -> [c]`
    pub fn col_sums(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (_, c) = t.dims2()?;
        let mut out = vec![0.0; c];
        for row in t.data().chunks(c) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        let t = Tensor::from_parts(vec![c], out);
        self.push(t, Op::ColSums(x), &[x])
    }

    /// Stride-1 "same" convolution with an odd square kernel.
    ///
    /// `x: [B×Cin×H×W]`, `w: [Cout×Cin×k×k]`, `b: [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (&[bn, cin, h, wd], &[cout, cin2, k, k2]) = (tx.shape(), tw.shape()) else {
            return Err(dim_err("conv2d", tx.shape(), tw.shape()));
        };
        if cin != cin2 || k != k2 || k % 2 == 0 {
            return Err(dim_err("conv2d", tx.shape(), tw.shape()));
        }
        if let Some(b) = b {
            if self.value(b).len() != cout {
                return Err(dim_err("conv2d bias", tw.shape(), self.shape(b)));
            }
        }
        let hw = h * wd;
        let ckk = cin * k * k;
        let mut cols = vec![0.0; ckk * hw];
        let mut out = vec![0.0; bn * cout * hw];
        for s in 0..bn {
            im2col(
                &tx.data()[s * cin * hw..(s + 1) * cin * hw],
                cin,
                h,
                wd,
                k,
                &mut cols,
            );
            let o = &mut out[s * cout * hw..(s + 1) * cout * hw];
            matmul_acc(tw.data(), &cols, o, cout, ckk, hw);
            if let Some(b) = b {
                for (co, chunk) in o.chunks_mut(hw).enumerate() {
                    let bv = self.nodes[b.0].value.data()[co];
                    chunk.iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        let t = Tensor::from_parts(vec![bn, cout, h, wd], out);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(t, Op::Conv2d { x, w, b }, &inputs)
    }

    /// Runs reverse-mode accumulation from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(contract("backward requires a scalar loss"));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut order = Vec::new();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            order.push(i);
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                g.filter(|_| node.requires_grad)
                    .map(|g| Tensor::from_parts(node.value.shape().to_vec(), g))
            })
            .collect();
        Ok(Gradients { grads, order })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };
        let elementwise = |acc: &mut dyn FnMut(Var, &mut dyn FnMut(&mut [f64])),
                           x: Var,
                           d: &dyn Fn(usize) -> f64| {
            acc(x, &mut |gx| {
                for (k, o) in gx.iter_mut().enumerate() {
                    *o += g[k] * d(k);
                }
            });
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = self.nodes[a.0].value.dims2().unwrap();
                let n = self.nodes[b.0].value.shape()[1];
                acc(a, &mut |ga| matmul_a_bt_acc(g, val(b), ga, m, n, k));
                acc(b, &mut |gb| matmul_at_b_acc(val(a), g, gb, m, k, n));
            }
            &Op::Add(a, b) => {
                elementwise(&mut acc, a, &|_| 1.0);
                elementwise(&mut acc, b, &|_| 1.0);
            }
            &Op::Sub(a, b) => {
                elementwise(&mut acc, a, &|_| 1.0);
                elementwise(&mut acc, b, &|_| -1.0);
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (val(a), val(b));
                elementwise(&mut acc, a, &|k| vb[k]);
                elementwise(&mut acc, b, &|k| va[k]);
            }
            &Op::Div(a, b) => {
                let vb = val(b);
                elementwise(&mut acc, a, &|k| 1.0 / vb[k]);
                elementwise(&mut acc, b, &|k| -y[k] / vb[k]);
            }
            &Op::Scale(x, s) => elementwise(&mut acc, x, &|_| s),
            &Op::AddScalar(x) => elementwise(&mut acc, x, &|_| 1.0),
            &Op::ClampMin(x, lo) => {
                let vx = val(x);
                elementwise(&mut acc, x, &|k| if vx[k] >= lo { 1.0 } else { 0.0 })
            }
            &Op::Sigmoid(x) => elementwise(&mut acc, x, &|k| y[k] * (1.0 - y[k])),
            &Op::Relu(x) => {
                let vx = val(x);
                elementwise(&mut acc, x, &|k| if vx[k] > 0.0 { 1.0 } else { 0.0 })
            }
            &Op::Gelu(x) => {
                let vx = val(x);
                elementwise(&mut acc, x, &|k| {
                    let v = vx[k];
                    let t = libm::tanh(GELU_K * (v + GELU_C * v * v * v));
                    0.5 * (1.0 + t)
                        + 0.5 * v * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * v * v)
                })
            }
            &Op::Ln(x) => {
                let vx = val(x);
                elementwise(&mut acc, x, &|k| 1.0 / vx[k])
            }
            &Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(node.value.shape(), axis);
                acc(x, &mut |gx| {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let base = o * len * inner + ii;
                            let dot: f64 = (0..len)
                                .map(|a| g[base + a * inner] * y[base + a * inner])
                                .sum();
                            for a in 0..len {
                                let p = base + a * inner;
                                gx[p] += y[p] * (g[p] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, inv_std } => {
                let (_, c) = rows_cols(&node.value);
                acc(*x, &mut |gx| {
                    for (r, is) in inv_std.iter().enumerate() {
                        let (gr, yr) = (&g[r * c..(r + 1) * c], &y[r * c..(r + 1) * c]);
                        let sg: f64 = gr.iter().sum();
                        let sgy: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        let cf = c as f64;
                        for j in 0..c {
                            gx[r * c + j] += is / cf * (cf * gr[j] - sg - yr[j] * sgy);
                        }
                    }
                });
            }
            Op::L2NormalizeRows { x, norms } => {
                let (_, c) = rows_cols(&node.value);
                acc(*x, &mut |gx| {
                    for (r, &nrm) in norms.iter().enumerate() {
                        if nrm == 0.0 {
                            continue;
                        }
                        let (gr, yr) = (&g[r * c..(r + 1) * c], &y[r * c..(r + 1) * c]);
                        let d: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gx[r * c + j] += (gr[j] - yr[j] * d) / nrm;
                        }
                    }
                });
            }
            Op::RowNormalize { x, sums } => {
                let c = sums.len();
                acc(*x, &mut |gx| {
                    for (r, &s) in sums.iter().enumerate() {
                        if s == 0.0 {
                            continue;
                        }
                        let (gr, yr) = (&g[r * c..(r + 1) * c], &y[r * c..(r + 1) * c]);
                        let d: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gx[r * c + j] += (gr[j] - d) / s;
                        }
                    }
                });
            }
            &Op::AddRowVec(x, v)
            | &Op::MulRowVec(x, v)
            | &Op::AddColVec(x, v)
            | &Op::MulColVec(x, v) => {
                let along_rows = matches!(node.op, Op::AddRowVec(..) | Op::MulRowVec(..));
                let mul = matches!(node.op, Op::MulRowVec(..) | Op::MulColVec(..));
                let (_, c) = rows_cols(&node.value);
                let (vx, vv) = (val(x), val(v));
                let pick = |k: usize| if along_rows { k % c } else { k / c };
                elementwise(&mut acc, x, &|k| if mul { vv[pick(k)] } else { 1.0 });
                acc(v, &mut |gv| {
                    for (k, &gk) in g.iter().enumerate() {
                        gv[pick(k)] += if mul { gk * vx[k] } else { gk };
                    }
                });
            }
            &Op::Reshape(x) => elementwise(&mut acc, x, &|_| 1.0),
            &Op::Transpose(x) => {
                let (r, c) = self.nodes[x.0].value.dims2().unwrap();
                acc(x, &mut |gx| {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Permute { x, perm } => {
                let shape = self.nodes[x.0].value.shape();
                acc(*x, &mut |gx| {
                    for_each_permuted(shape, perm, |o, s| gx[s] += g[o])
                });
            }
            &Op::SliceCols { x, start } => {
                let c = self.nodes[x.0].value.shape()[1];
                let (r, len) = node.value.dims2().unwrap();
                acc(x, &mut |gx| {
                    for i in 0..r {
                        for j in 0..len {
                            gx[i * c + start + j] += g[i * len + j];
                        }
                    }
                });
            }
            &Op::SliceRows { x, start } => {
                let c = node.value.shape()[1];
                acc(x, &mut |gx| {
                    for (k, &gk) in g.iter().enumerate() {
                        gx[start * c + k] += gk;
                    }
                });
            }
            Op::GatherRows { x, idx } => {
                let c = node.value.shape()[1];
                acc(*x, &mut |gx| {
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..c {
                            gx[i * c + j] += g[r * c + j];
                        }
                    }
                });
            }
            Op::ConcatCols(xs) => {
                let total = node.value.shape()[1];
                let mut off = 0;
                for &x in xs {
                    let (r, w) = self.nodes[x.0].value.dims2().unwrap();
                    acc(x, &mut |gx| {
                        for i in 0..r {
                            for j in 0..w {
                                gx[i * w + j] += g[i * total + off + j];
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &x in xs {
                    let n = self.nodes[x.0].value.len();
                    acc(x, &mut |gx| {
                        gx.iter_mut()
                            .zip(&g[off..off + n])
                            .for_each(|(o, v)| *o += v);
                    });
                    off += n;
                }
            }
            &Op::Sum(x) => acc(x, &mut |gx| gx.iter_mut().for_each(|o| *o += g[0])),
            &Op::Mean(x) => {
                let n = self.nodes[x.0].value.len() as f64;
                acc(x, &mut |gx| gx.iter_mut().for_each(|o| *o += g[0] / n));
            }
            &Op::RowSums(x) => {
                let (_, c) = self.nodes[x.0].value.dims2().unwrap();
                acc(x, &mut |gx| {
                    gx.iter_mut().enumerate().for_each(|(k, o)| *o += g[k / c])
                });
            }
            &Op::ColSums(x) => {
                let (_, c) = self.nodes[x.0].value.dims2().unwrap();
                acc(x, &mut |gx| {
                    gx.iter_mut().enumerate().for_each(|(k, o)| *o += g[k % c])
                });
            }
            &Op::Conv2d { x, w, b } => {
                let (tx, tw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
                let &[bn, cin, h, wd] = tx.shape() else {
                    unreachable!()
                };
                let &[cout, _, k, _] = tw.shape() else {
                    unreachable!()
                };
                let hw = h * wd;
                let ckk = cin * k * k;
                let mut cols = vec![0.0; ckk * hw];
                let mut dcols = vec![0.0; ckk * hw];
                for s in 0..bn {
                    let gs = &g[s * cout * hw..(s + 1) * cout * hw];
                    if self.nodes[w.0].requires_grad {
                        im2col(
                            &tx.data()[s * cin * hw..(s + 1) * cin * hw],
                            cin,
                            h,
                            wd,
                            k,
                            &mut cols,
                        );
                        acc(w, &mut |gw| matmul_a_bt_acc(gs, &cols, gw, cout, hw, ckk));
                    }
                    if self.nodes[x.0].requires_grad {
                        dcols.iter_mut().for_each(|v| *v = 0.0);
                        matmul_at_b_acc(tw.data(), gs, &mut dcols, cout, ckk, hw);
                        acc(x, &mut |gx| {
                            col2im_acc(
                                &dcols,
                                cin,
                                h,
                                wd,
                                k,
                                &mut gx[s * cin * hw..(s + 1) * cin * hw],
                            )
                        });
                    }
                    if let Some(b) = b {
                        acc(b, &mut |gb| {
                            for (co, chunk) in gs.chunks(hw).enumerate() {
                                gb[co] += chunk.iter().sum::<f64>();
                            }
                        });
                    }
                }
            }
        }
    }
}
