//! Dense row-major matrices and the handful of kernels the attention code needs.
//!
//! Loop orders are fixed: for a given input every kernel performs the same
//! floating-point operations in the same order, whether or not rows are
//! processed in parallel. Golden files rely on this.

use std::fmt;
use std::ops::{Index, IndexMut};

use num_traits::{Float, FromPrimitive, NumAssign};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

/// Scalar types the kernels are generic over (`f64` by default, `f32` for benchmarks).
pub trait Real:
    Float + FromPrimitive + NumAssign + Default + Send + Sync + fmt::Debug + fmt::Display + 'static
{
    const NAME: &'static str;

    fn lit(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite f64 converts")
    }

    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("float converts to f64")
    }
}

impl Real for f64 {
    const NAME: &'static str = "f64";
}

impl Real for f32 {
    const NAME: &'static str = "f32";
}

/// Dense row-major matrix.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat<T = f64> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

/// Double-precision matrix, the default carrier everywhere.
pub type Matrix = Mat<f64>;
/// Single-precision matrix, used by the benchmark's `f32` mode.
pub type MatrixF32 = Mat<f32>;

impl<T: Real> Mat<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                op: "Mat::new",
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Mat {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn diag(values: &[T]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, &v) in values.iter().enumerate() {
            m.data[i * n + i] = v;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Mat { rows, cols, data }
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    op: "Mat::from_rows",
                    left: (i, r.len()),
                    right: (0, cols),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Mat {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn column(values: &[T]) -> Self {
        Mat {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col_to_vec(&self, j: usize) -> Vec<T> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    /// Number of bytes held by the element buffer.
    pub fn buffer_bytes(&self) -> usize {
        self.data.len() * std::mem::size_of::<T>()
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|x| x * s)
    }

    fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::DimensionMismatch {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(Mat {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    /// `self += other`, element-wise.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::DimensionMismatch {
                op: "add_assign",
                left: self.shape(),
                right: other.shape(),
            });
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// `c·I + self` for square matrices.
    pub fn add_identity(&self, c: T) -> Result<Self> {
        if !self.is_square() {
            return Err(Error::DimensionMismatch {
                op: "add_identity",
                left: self.shape(),
                right: (self.rows, self.rows),
            });
        }
        let mut out = self.clone();
        for i in 0..self.rows {
            out.data[i * self.cols + i] += c;
        }
        Ok(out)
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        matmul(self, other)
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Self) -> Result<Self> {
        if self.cols != other.cols {
            return Err(Error::DimensionMismatch {
                op: "matmul_t",
                left: self.shape(),
                right: other.shape(),
            });
        }
        matmul(self, &other.transpose())
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &x| acc + x)
    }

    pub fn row_sums(&self) -> Vec<T> {
        (0..self.rows)
            .map(|i| self.row(i).iter().fold(T::zero(), |acc, &x| acc + x))
            .collect()
    }

    pub fn frobenius_norm(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |acc, &x| acc + x * x)
            .sqrt()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &x| acc.max(x.abs()))
    }

    /// Largest element-wise absolute difference.
    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        Ok(self.sub(other)?.max_abs())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Mat<U> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| U::lit(x.as_f64())).collect(),
        }
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.cols {
            return Err(Error::DimensionMismatch {
                op: "slice_cols",
                left: self.shape(),
                right: (start, len),
            });
        }
        Ok(Mat::from_fn(self.rows, len, |i, j| self[(i, start + j)]))
    }

    /// Rows `start..start + len`.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.rows {
            return Err(Error::DimensionMismatch {
                op: "slice_rows",
                left: self.shape(),
                right: (start, len),
            });
        }
        Ok(Mat {
            rows: len,
            cols: self.cols,
            data: self.data[start * self.cols..(start + len) * self.cols].to_vec(),
        })
    }

    /// Horizontal concatenation.
    pub fn hconcat(parts: &[Self]) -> Result<Self> {
        let rows = parts.first().map_or(0, |p| p.rows);
        if let Some(bad) = parts.iter().find(|p| p.rows != rows) {
            return Err(Error::DimensionMismatch {
                op: "hconcat",
                left: (rows, 0),
                right: bad.shape(),
            });
        }
        let cols = parts.iter().map(|p| p.cols).sum();
        let mut out = Self::zeros(rows, cols);
        for i in 0..rows {
            let mut off = 0;
            let dst = out.row_mut(i);
            for p in parts {
                dst[off..off + p.cols].copy_from_slice(p.row(i));
                off += p.cols;
            }
        }
        Ok(out)
    }

    /// Vertical concatenation.
    pub fn vconcat(parts: &[Self]) -> Result<Self> {
        let cols = parts.first().map_or(0, |p| p.cols);
        if let Some(bad) = parts.iter().find(|p| p.cols != cols) {
            return Err(Error::DimensionMismatch {
                op: "vconcat",
                left: (0, cols),
                right: bad.shape(),
            });
        }
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.data.len()).sum());
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Ok(Mat {
            rows: data.len() / cols.max(1),
            cols,
            data,
        })
    }
}

impl<T> Index<(usize, usize)> for Mat<T> {
    type Output = T;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl<T> IndexMut<(usize, usize)> for Mat<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl<T: fmt::Debug> fmt::Debug for Mat<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "Mat<{}> {}x{} [",
            std::any::type_name::<T>(),
            self.rows,
            self.cols
        )?;
        for i in 0..self.rows.min(8) {
            write!(f, "  ")?;
            for j in 0..self.cols.min(8) {
                write!(f, "{:>12.6?} ", self[(i, j)])?;
            }
            if self.cols > 8 {
                write!(f, "...")?;
            }
            writeln!(f)?;
        }
        if self.rows > 8 {
            writeln!(f, "  ...")?;
        }
        write!(f, "]")
    }
}

/// Matrix product with a fixed `i-k-j` loop order.
///
/// Each output entry accumulates `a[i][p] * b[p][j]` for `p = 0, 1, ...` starting
/// from zero, which is the same operation sequence as the textbook triple loop.
pub fn matmul<T: Real>(a: &Mat<T>, b: &Mat<T>) -> Result<Mat<T>> {
    if a.cols != b.rows {
        return Err(Error::DimensionMismatch {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let (n, k, m) = (a.rows, a.cols, b.cols);
    let mut out = Mat::zeros(n, m);
    par::for_each_row_mut(&mut out.data, m, k * m, |i, crow| {
        let arow = &a.data[i * k..(i + 1) * k];
        for (p, &aik) in arow.iter().enumerate() {
            let brow = &b.data[p * m..(p + 1) * m];
            for (c, &bv) in crow.iter_mut().zip(brow) {
                *c += aik * bv;
            }
        }
    });
    Ok(out)
}

/// Row-wise softmax with max subtraction.
pub fn rowwise_softmax<T: Real>(m: &Mat<T>) -> Mat<T> {
    let mut out = m.clone();
    let cols = m.cols;
    par::for_each_row_mut(&mut out.data, cols, cols * 8, |_, row| {
        softmax_in_place(row)
    });
    out
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |acc, &x| acc.max(x));
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// Maximum absolute column sum.
pub fn norm_1<T: Real>(m: &Mat<T>) -> T {
    let mut sums = vec![T::zero(); m.cols];
    for i in 0..m.rows {
        for (s, &x) in sums.iter_mut().zip(m.row(i)) {
            *s += x.abs();
        }
    }
    sums.into_iter().fold(T::zero(), T::max)
}

/// Maximum absolute row sum.
pub fn norm_inf<T: Real>(m: &Mat<T>) -> T {
    (0..m.rows)
        .map(|i| m.row(i).iter().fold(T::zero(), |acc, &x| acc + x.abs()))
        .fold(T::zero(), T::max)
}

/// Pivot magnitudes below this are treated as singular.
pub const SINGULAR_PIVOT: f64 = 1e-12;

/// Gauss-Jordan inverse with partial pivoting. Used as an independent oracle
/// for the iterative pseudoinverse.
pub fn gauss_jordan_inverse<T: Real>(a: &Mat<T>) -> Result<Mat<T>> {
    if !a.is_square() {
        return Err(Error::DimensionMismatch {
            op: "gauss_jordan_inverse",
            left: a.shape(),
            right: (a.rows, a.rows),
        });
    }
    let n = a.rows;
    let mut work = a.clone();
    let mut inv = Mat::<T>::identity(n);
    let threshold = T::lit(SINGULAR_PIVOT);
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&r, &s| {
                work[(r, col)]
                    .abs()
                    .partial_cmp(&work[(s, col)].abs())
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(s.cmp(&r))
            })
            .unwrap_or(col);
        if work[(pivot_row, col)].abs() < threshold {
            return Err(Error::Singular { pivot: col });
        }
        if pivot_row != col {
            for j in 0..n {
                work.data.swap(pivot_row * n + j, col * n + j);
                inv.data.swap(pivot_row * n + j, col * n + j);
            }
        }
        let p = work[(col, col)];
        for j in 0..n {
            work[(col, j)] /= p;
            inv[(col, j)] /= p;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let factor = work[(r, col)];
            if factor == T::zero() {
                continue;
            }
            for j in 0..n {
                let w = work[(col, j)];
                let v = inv[(col, j)];
                work[(r, j)] -= factor * w;
                inv[(r, j)] -= factor * v;
            }
        }
    }
    Ok(inv)
}

/// Plain-text matrix format shared by all golden fixtures: a `rows cols`
/// header, then one row per line of space-separated decimals with 17
/// significant digits (enough to round-trip an `f64` exactly).
pub mod text {
    use std::path::Path;

    use super::Matrix;
    use crate::error::{Error, Result};

    pub fn to_string(m: &Matrix) -> String {
        let mut out = format!("{} {}\n", m.rows(), m.cols());
        for i in 0..m.rows() {
            let line: Vec<String> = m.row(i).iter().map(|x| format!("{x:.16e}")).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn parse(s: &str) -> Result<Matrix> {
        let mut lines = s.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or(Error::Parse {
            line: 1,
            msg: "missing header".into(),
        })?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse {
                line: 1,
                msg: format!("bad header {header:?}: {e}"),
            })?;
        let [rows, cols] = dims[..] else {
            return Err(Error::Parse {
                line: 1,
                msg: format!("header must be `rows cols`, got {header:?}"),
            });
        };
        let mut data = Vec::with_capacity(rows * cols);
        let mut seen = 0;
        for (idx, line) in lines {
            let before = data.len();
            for tok in line.split_whitespace() {
                let v: f64 = tok.parse().map_err(|e| Error::Parse {
                    line: idx + 1,
                    msg: format!("bad value {tok:?}: {e}"),
                })?;
                data.push(v);
            }
            if data.len() - before != cols {
                return Err(Error::Parse {
                    line: idx + 1,
                    msg: format!("expected {cols} values, got {}", data.len() - before),
                });
            }
            seen += 1;
        }
        if seen != rows {
            return Err(Error::Parse {
                line: 0,
                msg: format!("expected {rows} rows, got {seen}"),
            });
        }
        Matrix::new(rows, cols, data)
    }

    pub fn read(path: &Path) -> Result<Matrix> {
        parse(&std::fs::read_to_string(path)?)
    }

    pub fn write(path: &Path, m: &Matrix) -> Result<()> {
        std::fs::write(path, to_string(m))?;
        Ok(())
    }
}
