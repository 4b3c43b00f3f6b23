//! Dense row-major tensors with deterministic arithmetic.
//!
//! Ranks 1 through 3 cover everything the engine needs. Every reduction and
//! matrix product accumulates left to right over a fixed index order, so a
//! given input produces bitwise-identical output on every run. Operations
//! return `Result` and fail loudly on shape mismatches instead of
//! broadcasting silently; the only broadcasts are the explicit `*_broadcast_*`
//! methods. Tensors register their element count with the allocation tracer
//! on construction and deregister on drop, which is why there is no `Clone`;
//! use [`Tensor::duplicate`], which can fail under a traced memory cap.

use std::fmt::{Debug, Display};
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::Error;
use crate::trace;
use crate::Result;

/// Element types the engine runs at. f64 is the default throughout; f32
/// exists to demonstrate precision sensitivity, not to pass the tight
/// equivalence tolerances.
pub trait Element:
    'static + Copy + Send + Sync + Debug + Display + Float + AddAssign + SubAssign + MulAssign
{
    /// Additive mask constant: a large negative finite number rather than
    /// negative infinity, so masked scores stay finite while exp underflows
    /// to exactly zero.
    const MASK_NEG: Self;
    /// Bytes per element at this precision.
    const BYTES: usize;

    fn of_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    /// Threshold below which a row maximum means every entry was masked.
    /// Real scores never get anywhere near half the mask constant.
    fn mask_threshold() -> Self {
        Self::MASK_NEG * Self::of_f64(0.5)
    }
}

impl Element for f64 {
    const MASK_NEG: Self = -1e30;
    const BYTES: usize = 8;

    fn of_f64(v: f64) -> Self {
        v
    }

    fn to_f64(self) -> f64 {
        self
    }
}

impl Element for f32 {
    const MASK_NEG: Self = -1e30;
    const BYTES: usize = 4;

    fn of_f64(v: f64) -> Self {
        v as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }
}

/// Dense row-major tensor.
pub struct Tensor<T: Element = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
    trace_id: Option<u64>,
}

impl<T: Element> Drop for Tensor<T> {
    fn drop(&mut self) {
        if let Some(id) = self.trace_id {
            trace::release(id);
        }
    }
}

impl<T: Element> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

fn shape_len(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Element> Tensor<T> {
    /// Registers with the tracer (enforcing any cap) before `fill` builds the
    /// buffer. All operator outputs come through here.
    fn build(shape: &[usize], fill: impl FnOnce() -> Vec<T>) -> Result<Self> {
        let n = shape_len(shape);
        let trace_id = trace::register(n as u64)?;
        let data = fill();
        debug_assert_eq!(data.len(), n);
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            trace_id,
        })
    }

    /// Wraps an existing buffer. The buffer is registered at wrap time, so
    /// prefer operator methods inside traced regions.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape_len(shape) != data.len() {
            return Err(Error::shape(
                "from_vec",
                format!("shape {:?} needs {} elements, got {}", shape, shape_len(shape), data.len()),
            ));
        }
        Self::build(shape, || data)
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::build(shape, || vec![T::zero(); shape_len(shape)])
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        Self::build(shape, || vec![value; shape_len(shape)])
    }

    /// Identity matrix, for tests and degenerate projections.
    pub fn identity(n: usize) -> Result<Self> {
        Self::build(&[n, n], || {
            let mut data = vec![T::zero(); n * n];
            for i in 0..n {
                data[i * n + i] = T::one();
            }
            data
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn element_count(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// In-place element access for the optimizer and embedding updates; no
    /// allocation, so no trace event.
    pub(crate) fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Rows of a rank-2 tensor. Panics on other ranks: rank misuse is a bug
    /// in the caller, not a data condition.
    pub fn rows(&self) -> usize {
        assert_eq!(self.ndim(), 2, "rows() needs rank 2, have {:?}", self.shape);
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.ndim(), 2, "cols() needs rank 2, have {:?}", self.shape);
        self.shape[1]
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[T] {
        let w = self.cols();
        &self.data[r * w..(r + 1) * w]
    }

    /// Explicit fallible copy; `Clone` is deliberately absent because copies
    /// allocate and may exceed a traced cap.
    pub fn duplicate(&self) -> Result<Self> {
        Self::build(&self.shape, || self.data.clone())
    }

    /// Reinterprets the shape without touching the buffer; the element count
    /// must match. Keeps the existing trace registration.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape_len(shape) != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape, shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    fn same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(())
    }

    fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.same_shape(other, op)?;
        Self::build(&self.shape, || {
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect()
        })
    }

    fn map(&self, f: impl Fn(T) -> T) -> Result<Self> {
        Self::build(&self.shape, || self.data.iter().map(|&a| f(a)).collect())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul_elem(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "mul_elem", |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Result<Self> {
        self.map(|a| a * s)
    }

    pub fn add_scalar(&self, s: T) -> Result<Self> {
        self.map(|a| a + s)
    }

    pub fn exp(&self) -> Result<Self> {
        self.map(|a| a.exp())
    }

    pub fn relu(&self) -> Result<Self> {
        self.map(|a| if a > T::zero() { a } else { T::zero() })
    }

    /// Gradient gate for relu: keeps entries of `self` where `gate` is
    /// strictly positive. `gate` is the relu output, whose positive set
    /// equals its input's, so the input never needs saving.
    pub fn relu_gate(&self, gate: &Self) -> Result<Self> {
        self.zip_map(gate, "relu_gate", |g, r| if r > T::zero() { g } else { T::zero() })
    }

    /// In-place elementwise accumulation; no allocation, no trace event.
    pub fn accumulate(&mut self, other: &Self) -> Result<()> {
        self.same_shape(other, "accumulate")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// In-place accumulation of `other` into the rectangle whose top-left
    /// corner is (`row0`, `col0`).
    pub fn accumulate_block(&mut self, row0: usize, col0: usize, other: &Self) -> Result<()> {
        let (m, n) = (self.rows(), self.cols());
        let (bm, bn) = (other.rows(), other.cols());
        if row0 + bm > m || col0 + bn > n {
            return Err(Error::shape(
                "accumulate_block",
                format!("block {bm}x{bn} at ({row0},{col0}) exceeds {m}x{n}"),
            ));
        }
        for i in 0..bm {
            let dst = &mut self.data[(row0 + i) * n + col0..(row0 + i) * n + col0 + bn];
            let src = other.row(i);
            for (a, &b) in dst.iter_mut().zip(src) {
                *a += b;
            }
        }
        Ok(())
    }

    /// Adds a rank-1 tensor to every row.
    pub fn add_broadcast_row(&self, row: &Self) -> Result<Self> {
        let n = self.cols();
        if row.shape != [n] {
            return Err(Error::shape(
                "add_broadcast_row",
                format!("{:?} + row {:?}", self.shape, row.shape),
            ));
        }
        Self::build(&self.shape, || {
            let mut out = Vec::with_capacity(self.data.len());
            for r in self.data.chunks_exact(n) {
                for (a, b) in r.iter().zip(&row.data) {
                    out.push(*a + *b);
                }
            }
            out
        })
    }

    fn col_broadcast(&self, col: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        let m = self.rows();
        if col.shape != [m, 1] {
            return Err(Error::shape(
                op,
                format!("{:?} with column {:?}", self.shape, col.shape),
            ));
        }
        let n = self.cols();
        Self::build(&self.shape, || {
            let mut out = Vec::with_capacity(self.data.len());
            for (i, r) in self.data.chunks_exact(n).enumerate() {
                let c = col.data[i];
                for &a in r {
                    out.push(f(a, c));
                }
            }
            out
        })
    }

    /// Subtracts an [m x 1] column from every column.
    pub fn sub_broadcast_col(&self, col: &Self) -> Result<Self> {
        self.col_broadcast(col, "sub_broadcast_col", |a, c| a - c)
    }

    pub fn mul_broadcast_col(&self, col: &Self) -> Result<Self> {
        self.col_broadcast(col, "mul_broadcast_col", |a, c| a * c)
    }

    pub fn div_broadcast_col(&self, col: &Self) -> Result<Self> {
        self.col_broadcast(col, "div_broadcast_col", |a, c| a / c)
    }

    /// Multiplies every row by a rank-1 tensor elementwise.
    pub fn mul_broadcast_row(&self, row: &Self) -> Result<Self> {
        let n = self.cols();
        if row.shape != [n] {
            return Err(Error::shape(
                "mul_broadcast_row",
                format!("{:?} * row {:?}", self.shape, row.shape),
            ));
        }
        Self::build(&self.shape, || {
            let mut out = Vec::with_capacity(self.data.len());
            for r in self.data.chunks_exact(n) {
                for (a, b) in r.iter().zip(&row.data) {
                    out.push(*a * *b);
                }
            }
            out
        })
    }

    /// Row maxima as an [m x 1] column.
    pub fn rowmax(&self) -> Result<Self> {
        let (m, n) = (self.rows(), self.cols());
        if n == 0 {
            return Err(Error::shape("rowmax", "zero-width tensor".to_string()));
        }
        Self::build(&[m, 1], || {
            self.data
                .chunks_exact(n)
                .map(|r| r.iter().copied().fold(T::neg_infinity(), T::max))
                .collect()
        })
    }

    /// Row sums as an [m x 1] column, accumulated left to right.
    pub fn rowsum(&self) -> Result<Self> {
        let (m, n) = (self.rows(), self.cols());
        Self::build(&[m, 1], || {
            self.data
                .chunks_exact(n)
                .map(|r| {
                    let mut acc = T::zero();
                    for &a in r {
                        acc += a;
                    }
                    acc
                })
                .collect()
        })
    }

    /// Fused row sums of `self * other` as an [m x 1] column; avoids
    /// materializing the product.
    pub fn rowsum_mul(&self, other: &Self) -> Result<Self> {
        self.same_shape(other, "rowsum_mul")?;
        let (m, _n) = (self.rows(), self.cols());
        Self::build(&[m, 1], || {
            let mut out = Vec::with_capacity(m);
            for i in 0..m {
                let mut acc = T::zero();
                for (a, b) in self.row(i).iter().zip(other.row(i)) {
                    acc += *a * *b;
                }
                out.push(acc);
            }
            out
        })
    }

    /// Column sums as a rank-1 tensor, accumulated top to bottom.
    pub fn colsum(&self) -> Result<Self> {
        let n = self.cols();
        Self::build(&[n], || {
            let mut out = vec![T::zero(); n];
            for r in self.data.chunks_exact(n) {
                for (acc, &a) in out.iter_mut().zip(r) {
                    *acc += a;
                }
            }
            out
        })
    }

    /// Elementwise maximum.
    pub fn max_elem(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "max_elem", T::max)
    }

    /// Matrix product [m x k][k x n]. The k loop runs outermost per row, so
    /// each output element accumulates over ascending k exactly like the
    /// scalar triple loop.
    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        let (m, k) = (self.rows(), self.cols());
        let (k2, n) = (rhs.rows(), rhs.cols());
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", self.shape, rhs.shape),
            ));
        }
        Self::build(&[m, n], || {
            let mut out = vec![T::zero(); m * n];
            for i in 0..m {
                let a_row = self.row(i);
                let o_row = &mut out[i * n..(i + 1) * n];
                for (kk, &a) in a_row.iter().enumerate() {
                    let b_row = &rhs.data[kk * n..(kk + 1) * n];
                    for (o, &b) in o_row.iter_mut().zip(b_row) {
                        *o += a * b;
                    }
                }
            }
            out
        })
    }

    /// Product with the transpose of `rhs`: [m x k][n x k]^T -> [m x n].
    /// Both operands stream row-major; accumulation runs over ascending k.
    pub fn matmul_nt(&self, rhs: &Self) -> Result<Self> {
        let (m, k) = (self.rows(), self.cols());
        let (n, k2) = (rhs.rows(), rhs.cols());
        if k != k2 {
            return Err(Error::shape(
                "matmul_nt",
                format!("{:?} x {:?}^T", self.shape, rhs.shape),
            ));
        }
        Self::build(&[m, n], || {
            let mut out = Vec::with_capacity(m * n);
            for i in 0..m {
                let a_row = self.row(i);
                for j in 0..n {
                    let b_row = rhs.row(j);
                    let mut acc = T::zero();
                    for (&a, &b) in a_row.iter().zip(b_row) {
                        acc += a * b;
                    }
                    out.push(acc);
                }
            }
            out
        })
    }

    /// Transposed-left product: [k x m]^T [k x n] -> [m x n]. The k loop is
    /// outermost, so every output element accumulates over ascending k.
    pub fn matmul_tn(&self, rhs: &Self) -> Result<Self> {
        let (k, m) = (self.rows(), self.cols());
        let (k2, n) = (rhs.rows(), rhs.cols());
        if k != k2 {
            return Err(Error::shape(
                "matmul_tn",
                format!("{:?}^T x {:?}", self.shape, rhs.shape),
            ));
        }
        Self::build(&[m, n], || {
            let mut out = vec![T::zero(); m * n];
            for kk in 0..k {
                let a_row = self.row(kk);
                let b_row = rhs.row(kk);
                for (i, &a) in a_row.iter().enumerate() {
                    let o_row = &mut out[i * n..(i + 1) * n];
                    for (o, &b) in o_row.iter_mut().zip(b_row) {
                        *o += a * b;
                    }
                }
            }
            out
        })
    }

    /// Numerically stable softmax over each row: subtract the row max, then
    /// exponentiate and normalize. A row made entirely of mask-constant
    /// entries has no finite distribution and is an error.
    pub fn row_softmax(&self) -> Result<Self> {
        let (m, n) = (self.rows(), self.cols());
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let r = self.row(i);
            let max = r.iter().copied().fold(T::neg_infinity(), T::max);
            if max <= T::mask_threshold() {
                return Err(Error::FullyMaskedRow { row: i });
            }
            let start = out.len();
            let mut denom = T::zero();
            for &a in r {
                let e = (a - max).exp();
                denom += e;
                out.push(e);
            }
            for e in &mut out[start..] {
                *e = *e / denom;
            }
        }
        Self::build(&[m, n], || out)
    }

    /// Copies `n_rows` rows starting at `row0`.
    pub fn row_block(&self, row0: usize, n_rows: usize) -> Result<Self> {
        let (m, n) = (self.rows(), self.cols());
        if row0 + n_rows > m {
            return Err(Error::shape(
                "row_block",
                format!("rows {row0}..{} of {m}", row0 + n_rows),
            ));
        }
        Self::build(&[n_rows, n], || {
            self.data[row0 * n..(row0 + n_rows) * n].to_vec()
        })
    }

    /// Copies `n_cols` columns starting at `col0`.
    pub fn col_block(&self, col0: usize, n_cols: usize) -> Result<Self> {
        let (m, n) = (self.rows(), self.cols());
        if col0 + n_cols > n {
            return Err(Error::shape(
                "col_block",
                format!("cols {col0}..{} of {n}", col0 + n_cols),
            ));
        }
        Self::build(&[m, n_cols], || {
            let mut out = Vec::with_capacity(m * n_cols);
            for i in 0..m {
                out.extend_from_slice(&self.row(i)[col0..col0 + n_cols]);
            }
            out
        })
    }

    /// Stacks rank-2 tensors vertically; all must share a width.
    pub fn concat_rows(parts: &[Tensor<T>]) -> Result<Self> {
        let refs: Vec<&Tensor<T>> = parts.iter().collect();
        Self::concat_rows_ref(&refs)
    }

    /// As [`Tensor::concat_rows`], over borrowed parts.
    pub fn concat_rows_ref(parts: &[&Tensor<T>]) -> Result<Self> {
        let Some(first) = parts.first() else {
            return Err(Error::shape("concat_rows", "no parts".to_string()));
        };
        let n = first.cols();
        let mut m = 0;
        for p in parts {
            if p.cols() != n {
                return Err(Error::shape(
                    "concat_rows",
                    format!("width {} vs {}", p.cols(), n),
                ));
            }
            m += p.rows();
        }
        Self::build(&[m, n], || {
            let mut out = Vec::with_capacity(m * n);
            for p in parts {
                out.extend_from_slice(&p.data);
            }
            out
        })
    }

    /// Stacks rank-2 tensors side by side; all must share a height.
    pub fn concat_cols(parts: &[Tensor<T>]) -> Result<Self> {
        let Some(first) = parts.first() else {
            return Err(Error::shape("concat_cols", "no parts".to_string()));
        };
        let m = first.rows();
        let mut n = 0;
        for p in parts {
            if p.rows() != m {
                return Err(Error::shape(
                    "concat_cols",
                    format!("height {} vs {}", p.rows(), m),
                ));
            }
            n += p.cols();
        }
        Self::build(&[m, n], || {
            let mut out = Vec::with_capacity(m * n);
            for i in 0..m {
                for p in parts {
                    out.extend_from_slice(p.row(i));
                }
            }
            out
        })
    }

    /// Largest absolute elementwise difference, in f64.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max))
    }

    /// True when every element is bitwise identical.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| Element::to_f64(*a).to_bits() == Element::to_f64(*b).to_bits())
    }
}

/// Views a [s x d] tensor as [n_blocks x block x d] without copying.
pub fn split_blocks<T: Element>(x: Tensor<T>, block: usize) -> Result<Tensor<T>> {
    let (s, d) = (x.rows(), x.cols());
    if block == 0 || s % block != 0 {
        return Err(Error::Partition { len: s, block });
    }
    x.reshape(&[s / block, block, d])
}

/// Inverse of [`split_blocks`].
pub fn merge_blocks<T: Element>(x: Tensor<T>) -> Result<Tensor<T>> {
    let shape = x.shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::shape(
            "merge_blocks",
            format!("need rank 3, have {shape:?}"),
        ));
    }
    x.reshape(&[shape[0] * shape[1], shape[2]])
}
