use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{contract, dim_err, Error, Result};

/// Dense row-major array of `f64` with shape metadata.
///
/// A rank-0 shape (`[]`) holds a single scalar.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?}[{} values]", self.shape, self.data.len())
        }
    }
}

impl Tensor {
    /// Builds a tensor, checking that the shape is positive, matches the
    /// data length and that every value is finite.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().any(|&d| d == 0) {
            return Err(contract("tensor dimensions must be positive"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(dim_err("Tensor::new", &shape, &[data.len()]));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Tensor::new"));
        }
        Ok(Self { shape, data })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros([n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Seeded normal initialisation with standard deviation `std`.
    pub fn randn<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, std: f64, rng: &mut R) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Self { shape, data }
    }

    pub fn uniform<R: Rng + ?Sized>(
        shape: impl Into<Vec<usize>>,
        lo: f64,
        hi: f64,
        rng: &mut R,
    ) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(contract("item() on a tensor with more than one element"));
        }
        Ok(self.data[0])
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(contract("expected a rank-2 tensor")),
        }
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.shape[self.shape.len() - 1];
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() || shape.contains(&0) {
            return Err(dim_err("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self::from_parts(vec![c, r], out))
    }

    pub fn matmul(&self, rhs: &Tensor) -> Result<Self> {
        let (m, k) = self.dims2()?;
        let (k2, n) = rhs.dims2()?;
        if k != k2 {
            return Err(dim_err("matmul", &self.shape, &rhs.shape));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(&self.data, &rhs.data, &mut out, m, k, n);
        Ok(Self::from_parts(vec![m, n], out))
    }

    pub fn softmax(&self, axis: usize) -> Result<Self> {
        if axis >= self.shape.len() {
            return Err(contract("softmax axis out of range"));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("softmax"));
        }
        let mut out = self.data.clone();
        softmax_axis(&mut out, &self.shape, axis);
        Ok(Self::from_parts(self.shape.clone(), out))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_parts(
            self.shape.clone(),
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Rows and columns of one register tile in [`gemm_acc`].
const MR: usize = 4;
const NR: usize = 8;

/// `out[m×n] += A · b` where `A[i,p] = a[i·row_stride + p·col_stride]` and
/// `b` is row-major `[k×n]`. Each block of `MR` rows of `A` is packed
/// contiguously; full tiles accumulate in registers and ragged edges take
/// the scalar path.
fn gemm_acc(
    a: &[f64],
    row_stride: usize,
    col_stride: usize,
    b: &[f64],
    out: &mut [f64],
    m: usize,
    k: usize,
    n: usize,
) {
    if k == 0 || n == 0 {
        return;
    }
    let mut pack = vec![0.0; k * MR];
    for i0 in (0..m).step_by(MR) {
        let rows = MR.min(m - i0);
        for (p, slot) in pack.chunks_exact_mut(MR).enumerate() {
            for (r, v) in slot.iter_mut().enumerate() {
                *v = if r < rows {
                    a[(i0 + r) * row_stride + p * col_stride]
                } else {
                    0.0
                };
            }
        }
        for j0 in (0..n).step_by(NR) {
            let cols = NR.min(n - j0);
            if cols == NR {
                let mut acc = [[0.0; NR]; MR];
                for (ap, brow) in pack.chunks_exact(MR).zip(b.chunks_exact(n)) {
                    let bt: &[f64; NR] = brow[j0..j0 + NR].try_into().expect("tile width");
                    for (acc_row, &av) in acc.iter_mut().zip(ap) {
                        for c in 0..NR {
                            acc_row[c] += av * bt[c];
                        }
                    }
                }
                for (r, acc_row) in acc.iter().enumerate().take(rows) {
                    let o = &mut out[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR];
                    for c in 0..NR {
                        o[c] += acc_row[c];
                    }
                }
            } else {
                for r in 0..rows {
                    for c in j0..j0 + cols {
                        let mut sum = 0.0;
                        for (ap, brow) in pack.chunks_exact(MR).zip(b.chunks_exact(n)) {
                            sum += ap[r] * brow[c];
                        }
                        out[(i0 + r) * n + c] += sum;
                    }
                }
            }
        }
    }
}

/// `out += a[m×k] · b[k×n]`
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    gemm_acc(a, k, 1, b, out, m, k, n);
}

/// `out += aᵀ · b` where `a` is `[k×m]` and `b` is `[k×n]`.
pub(crate) fn matmul_at_b_acc(a: &[f64], b: &[f64], out: &mut [f64], k: usize, m: usize, n: usize) {
    gemm_acc(a, 1, m, b, out, m, k, n);
}

/// `out += a · bᵀ` where `a` is `[m×k]` and `b` is `[n×k]`.
pub(crate) fn matmul_a_bt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    let mut bt = vec![0.0; k * n];
    for j in 0..n {
        for p in 0..k {
            bt[p * n + j] = b[j * k + p];
        }
    }
    gemm_acc(a, k, 1, &bt, out, m, k, n);
}

/// Splits `shape` around `axis` into (outer, axis length, inner).
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// In-place max-subtracted softmax along `axis`.
pub(crate) fn softmax_axis(data: &mut [f64], shape: &[usize], axis: usize) {
    let (outer, len, inner) = axis_split(shape, axis);
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut mx = f64::NEG_INFINITY;
            for a in 0..len {
                mx = mx.max(data[base + a * inner]);
            }
            let mut s = 0.0;
            for a in 0..len {
                let e = libm::exp(data[base + a * inner] - mx);
                data[base + a * inner] = e;
                s += e;
            }
            for a in 0..len {
                data[base + a * inner] /= s;
            }
        }
    }
}
