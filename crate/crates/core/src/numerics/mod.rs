//! Dense linear algebra primitives shared by every other module.
//!
//! All values are `f64`. Matrices are row-major.

pub mod kernels;
mod rng;
mod svd;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use rng::{derive_seed, seeded_rng, Rng};
pub use svd::{truncated_svd, SvdFactors, SVD_MAX_SWEEPS};

/// Dense row-major matrix of finite `f64` values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::arg(format!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite matrix entry at flat index {bad}"
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::arg(format!(
                    "row {i} has length {}, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    /// Builds a matrix whose columns are the given vectors.
    pub fn from_columns<C: AsRef<[f64]>>(cols: &[C]) -> Result<Self> {
        Ok(Self::from_rows(cols)?.transpose())
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            m.data[i * n + i] = *v;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::arg(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        kernels::matmul(
            &self.data,
            &other.data,
            self.rows,
            self.cols,
            other.cols,
            &mut out.data,
        );
        Ok(out)
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::arg("matrix shapes differ"));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        })
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Keeps the first `k` columns.
    pub fn take_columns(&self, k: usize) -> Matrix {
        let k = k.min(self.cols);
        let mut out = Self::zeros(self.rows, k);
        for r in 0..self.rows {
            out.row_mut(r).copy_from_slice(&self.row(r)[..k]);
        }
        out
    }
}

/// Dense vector of finite `f64` values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite vector entry at index {bad}"
            )));
        }
        Ok(Self(data))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn scale(&self, s: f64) -> Vector {
        Vector(self.0.iter().map(|v| v * s).collect())
    }

    /// Element-wise `self - other`. Dimensions must agree.
    pub fn sub(&self, other: &Vector) -> Vector {
        assert_eq!(self.dim(), other.dim(), "vector dimensions differ");
        Vector(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    /// Element-wise `self + other`. Dimensions must agree.
    pub fn add(&self, other: &Vector) -> Vector {
        assert_eq!(self.dim(), other.dim(), "vector dimensions differ");
        Vector(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|v| *v == 0.0)
    }
}

impl std::ops::Index<usize> for Vector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Column mean of a `d x n` matrix.
///
/// Uses the running update `m += (x - m) / k`, which reproduces a constant
/// column exactly regardless of `n`.
pub fn mean_columns(m: &Matrix) -> Result<Vector> {
    if m.cols() == 0 {
        return Err(Error::arg("mean of an empty column set"));
    }
    let mut mean = vec![0.0; m.rows()];
    for (j, out) in mean.iter_mut().enumerate() {
        *out = running_mean(m.row(j).iter().copied());
    }
    Ok(Vector(mean))
}

/// Row mean of an `n x d` matrix (mean over examples when rows are examples).
pub fn mean_rows(m: &Matrix) -> Result<Vector> {
    if m.rows() == 0 {
        return Err(Error::arg("mean of an empty row set"));
    }
    let mut mean = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        let k = (r + 1) as f64;
        for (acc, x) in mean.iter_mut().zip(m.row(r)) {
            *acc += (x - *acc) / k;
        }
    }
    Ok(Vector(mean))
}

fn running_mean(values: impl Iterator<Item = f64>) -> f64 {
    let mut mean = 0.0;
    for (i, x) in values.enumerate() {
        mean += (x - mean) / (i + 1) as f64;
    }
    mean
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let mut out = z.to_vec();
    softmax_in_place(&mut out);
    out
}

pub fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

/// `ln(sum(exp(z)))`, max-subtracted.
pub fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn mean_of_two_columns() {
        let m = Matrix::from_columns(&[[1.0, 0.0], [3.0, 0.0]]).unwrap();
        assert_eq!(mean_columns(&m).unwrap().as_slice(), &[2.0, 0.0]);
    }

    #[test]
    fn mean_of_single_column_is_identity() {
        let m = Matrix::from_columns(&[[5.0, -2.0]]).unwrap();
        assert_eq!(mean_columns(&m).unwrap().as_slice(), &[5.0, -2.0]);
    }

    #[test]
    fn mean_of_constant_columns_is_exact() {
        let c = [0.1, -7.3, 1.0 + f64::EPSILON, 1e-300, 3.3333333333333335];
        let cols = vec![c; 64];
        let m = Matrix::from_columns(&cols).unwrap();
        assert_eq!(mean_columns(&m).unwrap().as_slice(), &c);
        let cols = vec![c; 37];
        let m = Matrix::from_columns(&cols).unwrap();
        assert_eq!(mean_columns(&m).unwrap().as_slice(), &c);
    }

    #[test]
    fn mean_of_empty_is_error() {
        let m = Matrix::zeros(3, 0);
        assert!(matches!(mean_columns(&m), Err(Error::Argument(_))));
    }

    #[test]
    fn softmax_symmetric_and_stable() {
        assert_eq!(softmax(&[0.0, 0.0]), vec![0.5, 0.5]);
        let p = softmax(&[1000.0, 0.0]);
        assert_eq!(p[0], 1.0);
        assert_eq!(p[1], 0.0);
        assert!(p.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn non_finite_rejected() {
        assert!(Matrix::from_vec(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(Vector::new(vec![f64::INFINITY]).is_err());
    }

    proptest! {
        #[test]
        fn softmax_is_simplex_and_shift_invariant(
            z in proptest::collection::vec(-50.0f64..50.0, 1..12),
            c in -100.0f64..100.0,
        ) {
            let p = softmax(&z);
            let s: f64 = p.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
            prop_assert!(p.iter().all(|v| *v >= 0.0 && *v <= 1.0));
            let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
            let q = softmax(&shifted);
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn mean_is_linear(
            data in proptest::collection::vec(-10.0f64..10.0, 12),
            alpha in -5.0f64..5.0,
        ) {
            let m = Matrix::from_vec(3, 4, data).unwrap();
            let lhs = mean_columns(&m.scale(alpha)).unwrap();
            let rhs = mean_columns(&m).unwrap().scale(alpha);
            for (a, b) in lhs.as_slice().iter().zip(rhs.as_slice()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
