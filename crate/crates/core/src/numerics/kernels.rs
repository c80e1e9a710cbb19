//! Flat-slice matrix kernels used on the model's hot path.
//!
//! Shapes are passed explicitly; every buffer is row-major. Each output row
//! depends only on the matching input row, so results for one example never
//! depend on which other examples share the buffer.

/// `out = a · b`, with `a: m×k`, `b: k×n`, `out: m×n`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.fill(0.0);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out = a · b + bias` (bias broadcast over rows).
pub fn linear(a: &[f64], w: &[f64], bias: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    matmul(a, w, m, k, n, out);
    for row in out.chunks_exact_mut(n) {
        for (o, b) in row.iter_mut().zip(bias) {
            *o += b;
        }
    }
}

/// `out = a · bᵀ`, with `a: m×n`, `b: k×n`, `out: m×k`.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * k);
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for j in 0..k {
            out[i * k + j] = dot(a_row, &b[j * n..(j + 1) * n]);
        }
    }
}

/// `out += aᵀ · b`, with `a: m×k`, `b: m×n`, `out: k×n`.
pub fn matmul_tn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out += column sums of a` (`a: m×n`).
pub fn column_sums_acc(a: &[f64], n: usize, out: &mut [f64]) {
    for row in a.chunks_exact(n) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += alpha * x`.
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (o, v) in y.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernels_agree_with_naive_products() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 - 2.5).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64).sin()).collect(); // 3x4
        let mut out = vec![0.0; 8];
        matmul(&a, &b, 2, 3, 4, &mut out);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|p| a[i * 3 + p] * b[p * 4 + j]).sum();
                assert!((out[i * 4 + j] - want).abs() < 1e-12);
            }
        }

        // a · bᵀ with b as 4x3
        let bt: Vec<f64> = (0..12).map(|v| (v as f64).cos()).collect();
        let mut out = vec![0.0; 8];
        matmul_nt(&a, &bt, 2, 3, 4, &mut out);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|p| a[i * 3 + p] * bt[j * 3 + p]).sum();
                assert!((out[i * 4 + j] - want).abs() < 1e-12);
            }
        }

        // aᵀ · c with c as 2x4
        let c: Vec<f64> = (0..8).map(|v| v as f64 * 0.5).collect();
        let mut out = vec![1.0; 12];
        matmul_tn_acc(&a, &c, 2, 3, 4, &mut out);
        for p in 0..3 {
            for j in 0..4 {
                let want: f64 = 1.0 + (0..2).map(|i| a[i * 3 + p] * c[i * 4 + j]).sum::<f64>();
                assert!((out[p * 4 + j] - want).abs() < 1e-12);
            }
        }
    }
}
