use serde::{Deserialize, Serialize};

use super::kernels::dot;
use super::{Matrix, Vector};
use crate::error::{Error, Result};

/// Sweep cap for the one-sided Jacobi iteration.
pub const SVD_MAX_SWEEPS: usize = 60;

/// Rank-`k` factors with `M ≈ U · diag(S) · Vᵀ`.
///
/// `u` is `d×k`, `s` holds `k` descending non-negative values, `v` is `n×k`.
/// The largest-magnitude entry of every `u` column is positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvdFactors {
    pub u: Matrix,
    pub s: Vector,
    pub v: Matrix,
}

impl SvdFactors {
    pub fn rank(&self) -> usize {
        self.s.dim()
    }

    /// `U · diag(S) · Vᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        let (d, k) = self.u.shape();
        let n = self.v.rows();
        let mut us = self.u.clone();
        for r in 0..d {
            for (c, x) in us.row_mut(r).iter_mut().enumerate() {
                *x *= self.s[c];
            }
        }
        let mut out = Matrix::zeros(d, n);
        let vt = self.v.transpose();
        super::kernels::matmul(us.as_slice(), vt.as_slice(), d, k, n, out.data_mut());
        out
    }
}

/// Truncated SVD by one-sided (Hestenes) Jacobi rotations.
///
/// The full decomposition is computed on the thinner orientation of `m`,
/// sorted, and cut to the leading `k` triplets. Columns belonging to
/// numerically zero singular values are completed to an orthonormal set.
pub fn truncated_svd(m: &Matrix, k: usize) -> Result<SvdFactors> {
    let (d, n) = m.shape();
    let full = d.min(n);
    if k == 0 || k > full {
        return Err(Error::arg(format!(
            "rank {k} out of range 1..={full} for a {d}x{n} matrix"
        )));
    }

    // Work on A (p×q, p ≥ q) stored column-wise: `cols[j]` is column j of A.
    let transposed = d < n;
    let (p, q) = if transposed { (n, d) } else { (d, n) };
    let mut cols: Vec<Vec<f64>> = if transposed {
        (0..d).map(|r| m.row(r).to_vec()).collect()
    } else {
        (0..n).map(|c| m.column(c)).collect()
    };
    let mut vcols: Vec<Vec<f64>> = (0..q)
        .map(|j| {
            let mut e = vec![0.0; q];
            e[j] = 1.0;
            e
        })
        .collect();

    let tol = (p as f64) * f64::EPSILON;
    let mut converged = false;
    let mut last_max_cos = 0.0f64;
    for _sweep in 0..SVD_MAX_SWEEPS {
        let mut rotated = false;
        last_max_cos = 0.0;
        for i in 0..q {
            for j in (i + 1)..q {
                let alpha = dot(&cols[i], &cols[i]);
                let beta = dot(&cols[j], &cols[j]);
                let gamma = dot(&cols[i], &cols[j]);
                if alpha == 0.0 || beta == 0.0 || gamma == 0.0 {
                    continue;
                }
                let cos = gamma.abs() / (alpha.sqrt() * beta.sqrt());
                last_max_cos = last_max_cos.max(cos);
                if cos <= tol {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = if zeta.abs() > 1e150 {
                    0.5 / zeta
                } else {
                    zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, i, j, c, s);
                rotate(&mut vcols, i, j, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Numerical(format!(
            "truncated SVD of a {d}x{n} matrix did not converge after {SVD_MAX_SWEEPS} sweeps \
             (largest remaining column cosine {last_max_cos:.3e}, tolerance {tol:.3e})"
        )));
    }

    let sigma: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..q).collect();
    order.sort_by(|&a, &b| sigma[b].total_cmp(&sigma[a]).then(a.cmp(&b)));
    order.truncate(k);

    let sigma_max = sigma[order[0]];
    let negligible = sigma_max * (p as f64) * f64::EPSILON;

    // Normalised side: columns of A divided by sigma (length p).
    let mut left: Vec<Option<Vec<f64>>> = order
        .iter()
        .map(|&j| {
            if sigma[j] > negligible && sigma[j] > 0.0 {
                Some(cols[j].iter().map(|x| x / sigma[j]).collect())
            } else {
                None
            }
        })
        .collect();
    complete_orthonormal(&mut left, p);
    let left: Vec<Vec<f64>> = left.into_iter().map(|c| c.expect("completed")).collect();
    let right: Vec<Vec<f64>> = order.iter().map(|&j| vcols[j].clone()).collect();
    let s: Vec<f64> = order.iter().map(|&j| sigma[j]).collect();

    // A = L Σ Rᵀ. Not transposed: M = A. Transposed: M = Aᵀ = R Σ Lᵀ.
    let (mut ucols, mut vcols_out) = if transposed {
        (right, left)
    } else {
        (left, right)
    };

    for (uc, vc) in ucols.iter_mut().zip(vcols_out.iter_mut()) {
        let mut best = 0usize;
        for (i, x) in uc.iter().enumerate() {
            if x.abs() > uc[best].abs() {
                best = i;
            }
        }
        if uc[best] < 0.0 {
            uc.iter_mut().for_each(|x| *x = -*x);
            vc.iter_mut().for_each(|x| *x = -*x);
        }
    }

    Ok(SvdFactors {
        u: Matrix::from_columns(&ucols)?,
        s: Vector::new(s)?,
        v: Matrix::from_columns(&vcols_out)?,
    })
}

fn rotate(cols: &mut [Vec<f64>], i: usize, j: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(j);
    let ci = &mut lo[i];
    let cj = &mut hi[0];
    for (x, y) in ci.iter_mut().zip(cj.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Fills `None` slots with unit vectors orthogonal to every other slot.
fn complete_orthonormal(slots: &mut [Option<Vec<f64>>], len: usize) {
    let missing: Vec<usize> = (0..slots.len()).filter(|&i| slots[i].is_none()).collect();
    let mut basis_idx = 0usize;
    for slot in missing {
        while basis_idx < len {
            let mut e = vec![0.0; len];
            e[basis_idx] = 1.0;
            basis_idx += 1;
            // Two Gram-Schmidt passes.
            for _ in 0..2 {
                for other in slots.iter().flatten() {
                    let proj = dot(&e, other);
                    for (x, o) in e.iter_mut().zip(other) {
                        *x -= proj * o;
                    }
                }
            }
            let norm = dot(&e, &e).sqrt();
            if norm > 0.5 {
                e.iter_mut().for_each(|x| *x /= norm);
                slots[slot] = Some(e);
                break;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn max_orthonormality_error(m: &Matrix) -> f64 {
        let g = m.transpose().matmul(m).unwrap();
        let mut worst = 0.0f64;
        for i in 0..g.rows() {
            for j in 0..g.cols() {
                let want = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((g.get(i, j) - want).abs());
            }
        }
        worst
    }

    #[test]
    fn diagonal_matrix_singular_values() {
        let m = Matrix::diag(&[3.0, 2.0, 1.0]);
        let f = truncated_svd(&m, 2).unwrap();
        assert!((f.s[0] - 3.0).abs() < 1e-12);
        assert!((f.s[1] - 2.0).abs() < 1e-12);
        assert_eq!(f.u.shape(), (3, 2));
        assert_eq!(f.v.shape(), (3, 2));
    }

    #[test]
    fn unsorted_diagonal_is_sorted() {
        let m = Matrix::diag(&[1.0, 5.0, 3.0]);
        let f = truncated_svd(&m, 3).unwrap();
        assert_eq!(f.s.as_slice().len(), 3);
        assert!((f.s[0] - 5.0).abs() < 1e-12);
        assert!((f.s[1] - 3.0).abs() < 1e-12);
        assert!((f.s[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rank_out_of_range() {
        let m = Matrix::zeros(3, 2);
        assert!(matches!(truncated_svd(&m, 0), Err(Error::Argument(_))));
        assert!(matches!(truncated_svd(&m, 3), Err(Error::Argument(_))));
    }

    #[test]
    fn full_rank_reconstruction_both_orientations() {
        for (d, n) in [(5, 3), (3, 5), (4, 4), (1, 6), (6, 1)] {
            let data: Vec<f64> = (0..d * n)
                .map(|i| ((i * 7 + 3) % 11) as f64 - 5.0 + 0.1 * i as f64)
                .collect();
            let m = Matrix::from_vec(d, n, data).unwrap();
            let f = truncated_svd(&m, d.min(n)).unwrap();
            let err = f.reconstruct().sub(&m).unwrap().frobenius_norm() / m.frobenius_norm();
            assert!(err <= 1e-12, "{d}x{n}: {err}");
            assert!(max_orthonormality_error(&f.u) < 1e-10);
            assert!(max_orthonormality_error(&f.v) < 1e-10);
        }
    }

    #[test]
    fn rank_deficient_columns_are_completed() {
        // Two identical columns and a zero column: rank 1.
        let m = Matrix::from_columns(&[[1.0, 2.0, 2.0], [1.0, 2.0, 2.0], [0.0, 0.0, 0.0]]).unwrap();
        let f = truncated_svd(&m, 3).unwrap();
        assert!((f.s[0] - 18f64.sqrt()).abs() < 1e-12);
        assert!(f.s[1].abs() < 1e-12 && f.s[2].abs() < 1e-12);
        assert!(max_orthonormality_error(&f.u) < 1e-10);
        assert!(max_orthonormality_error(&f.v) < 1e-10);
        let zero = Matrix::zeros(4, 2);
        let f = truncated_svd(&zero, 2).unwrap();
        assert!(max_orthonormality_error(&f.u) < 1e-10);
        assert_eq!(f.reconstruct(), zero);
    }

    #[test]
    fn sign_convention_and_determinism() {
        let m = Matrix::from_vec(3, 2, vec![-4.0, 1.0, -2.0, 0.5, 1.0, -3.0]).unwrap();
        let a = truncated_svd(&m, 2).unwrap();
        let b = truncated_svd(&m, 2).unwrap();
        assert_eq!(a, b);
        for c in 0..2 {
            let col = a.u.column(c);
            let big = col.iter().copied().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
            assert!(big > 0.0);
        }
    }
}
