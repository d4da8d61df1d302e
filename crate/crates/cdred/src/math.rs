//! Row-major matrices and the scalar abstraction used by every numerical
//! subsystem. Training runs on `f32`; gradient-verification tests instantiate
//! the identical code paths with `f64` so finite differences are meaningful.

use num_traits::{Float, FromPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

/// Scalar type for all tensor math.
pub trait Real:
    Float
    + FromPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn f64(self) -> f64;
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("finite literal")
    }
}

impl Real for f32 {
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn f64(self) -> f64 {
        self
    }
}

/// Lift an `f64` literal into the active scalar type.
#[inline(always)]
pub fn r<R: Real>(v: f64) -> R {
    R::of(v)
}

/// Dense row-major matrix. Rows are the batch dimension throughout the crate.
#[derive(Clone, PartialEq)]
pub struct Matrix<R> {
    rows: usize,
    cols: usize,
    data: Vec<R>,
}

impl<R: Real> Matrix<R> {
    pub fn new(rows: usize, cols: usize, data: Vec<R>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Matrix { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![R::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, v: R) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn from_row(row: &[R]) -> Self {
        Matrix::new(1, row.len(), row.to_vec())
    }

    /// Stack equal-length rows into a matrix.
    pub fn from_rows(rows: &[Vec<R>]) -> Self {
        assert!(!rows.is_empty(), "from_rows needs at least one row");
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Matrix::new(rows.len(), cols, data)
    }

    #[inline(always)]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline(always)]
    pub fn cols(&self) -> usize {
        self.cols
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

    #[inline(always)]
    pub fn row(&self, i: usize) -> &[R] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline(always)]
    pub fn row_mut(&mut self, i: usize) -> &mut [R] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline(always)]
    pub fn get(&self, i: usize, j: usize) -> R {
        self.data[i * self.cols + j]
    }

    #[inline(always)]
    pub fn set(&mut self, i: usize, j: usize, v: R) {
        self.data[i * self.cols + j] = v;
    }

    pub fn data(&self) -> &[R] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [R] {
        &mut self.data
    }

    pub fn fill(&mut self, v: R) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn map(&self, f: impl Fn(R) -> R) -> Self {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Matrix<R>) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn scale(&mut self, s: R) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Concatenate columns of two matrices with identical row counts.
    pub fn hcat(a: &Matrix<R>, b: &Matrix<R>) -> Matrix<R> {
        assert_eq!(a.rows, b.rows, "hcat row mismatch");
        let cols = a.cols + b.cols;
        let mut data = Vec::with_capacity(a.rows * cols);
        for i in 0..a.rows {
            data.extend_from_slice(a.row(i));
            data.extend_from_slice(b.row(i));
        }
        Matrix::new(a.rows, cols, data)
    }

    /// Split columns at `at`: returns (left `at` columns, right remainder).
    pub fn hsplit(&self, at: usize) -> (Matrix<R>, Matrix<R>) {
        assert!(at <= self.cols);
        let mut left = Vec::with_capacity(self.rows * at);
        let mut right = Vec::with_capacity(self.rows * (self.cols - at));
        for i in 0..self.rows {
            let row = self.row(i);
            left.extend_from_slice(&row[..at]);
            right.extend_from_slice(&row[at..]);
        }
        (
            Matrix::new(self.rows, at, left),
            Matrix::new(self.rows, self.cols - at, right),
        )
    }

    /// Cast element type (used at checkpoint boundaries).
    pub fn cast<T: Real>(&self) -> Matrix<T> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| T::of(x.f64())).collect(),
        }
    }
}

impl<R: Real> Debug for Matrix<R> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Matrix({}x{})", self.rows, self.cols)
    }
}

/// `out = a · b` with `a: [m,k]`, `b: [k,n]`. The k-inner axpy ordering keeps
/// the inner loop contiguous so it vectorizes.
pub fn matmul<R: Real>(a: &Matrix<R>, b: &Matrix<R>) -> Matrix<R> {
    assert_eq!(a.cols, b.rows, "matmul inner dimension mismatch");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = Matrix::zeros(m, n);
    for i in 0..m {
        let a_row = a.row(i);
        let out_row = out.row_mut(i);
        for (p, &a_ip) in a_row.iter().enumerate().take(k) {
            if a_ip == R::zero() {
                continue;
            }
            let b_row = b.row(p);
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * bv;
            }
        }
    }
    out
}

/// `out = a · bᵀ` with `a: [m,k]`, `b: [n,k]`.
pub fn matmul_nt<R: Real>(a: &Matrix<R>, b: &Matrix<R>) -> Matrix<R> {
    assert_eq!(a.cols, b.cols, "matmul_nt inner dimension mismatch");
    let (m, n) = (a.rows, b.rows);
    let mut out = Matrix::zeros(m, n);
    for i in 0..m {
        let a_row = a.row(i);
        let out_row = out.row_mut(i);
        for j in 0..n {
            let b_row = b.row(j);
            let mut acc = R::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            out_row[j] = acc;
        }
    }
    out
}

/// `out = aᵀ · b` with `a: [m,k]`, `b: [m,n]`, so `out: [k,n]`.
pub fn matmul_tn<R: Real>(a: &Matrix<R>, b: &Matrix<R>) -> Matrix<R> {
    assert_eq!(a.rows, b.rows, "matmul_tn outer dimension mismatch");
    let (k, n) = (a.cols, b.cols);
    let mut out = Matrix::zeros(k, n);
    for i in 0..a.rows {
        let a_row = a.row(i);
        let b_row = b.row(i);
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == R::zero() {
                continue;
            }
            let out_row = out.row_mut(p);
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * bv;
            }
        }
    }
    out
}

/// Numerically stable softmax over a slice, written in place.
pub fn softmax_inplace<R: Real>(x: &mut [R]) {
    let max = x.iter().cloned().fold(R::neg_infinity(), R::max);
    let mut sum = R::zero();
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

/// Euclidean norm of a slice.
pub fn l2_norm<R: Real>(x: &[R]) -> R {
    x.iter().map(|&v| v * v).sum::<R>().sqrt()
}

/// Squared Euclidean distance between two equal-length slices.
pub fn sq_dist<R: Real>(a: &[R], b: &[R]) -> R {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x - y;
            d * d
        })
        .sum()
}
