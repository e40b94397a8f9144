//! Dense symmetric positive definite solves in f64 via Cholesky. Sized for
//! the per-row normal equations of layer refits (a few hundred unknowns).

use alloc::vec;
use alloc::vec::Vec;

/// Solve `A x = b` for symmetric positive definite `A` (row-major, n x n).
/// Returns `None` when a pivot is not strictly positive.
pub fn solve_spd(mut a: Vec<f64>, n: usize, mut b: Vec<f64>) -> Option<Vec<f64>> {
    debug_assert_eq!(a.len(), n * n);
    debug_assert_eq!(b.len(), n);
    if n == 0 {
        return Some(b);
    }
    // In-place lower Cholesky factor.
    for k in 0..n {
        let mut diag = a[k * n + k];
        for j in 0..k {
            diag -= a[k * n + j] * a[k * n + j];
        }
        if diag <= 0.0 || !diag.is_finite() {
            return None;
        }
        let lkk = libm::sqrt(diag);
        a[k * n + k] = lkk;
        for i in (k + 1)..n {
            let mut v = a[i * n + k];
            for j in 0..k {
                v -= a[i * n + j] * a[k * n + j];
            }
            a[i * n + k] = v / lkk;
        }
    }
    // Forward substitution: L y = b.
    for i in 0..n {
        let mut v = b[i];
        for j in 0..i {
            v -= a[i * n + j] * b[j];
        }
        b[i] = v / a[i * n + i];
    }
    // Back substitution: L^T x = y.
    for i in (0..n).rev() {
        let mut v = b[i];
        for j in (i + 1)..n {
            v -= a[j * n + i] * b[j];
        }
        b[i] = v / a[i * n + i];
    }
    Some(b)
}

/// Gram matrix `X^T X` (features x features) of a row-major (samples,
/// features) activation matrix, accumulated in f64.
pub fn gram(x: &[f32], samples: usize, features: usize) -> Vec<f64> {
    debug_assert_eq!(x.len(), samples * features);
    let mut g = vec![0.0f64; features * features];
    for row in x.chunks(features) {
        for (i, &xi) in row.iter().enumerate() {
            let xi = xi as f64;
            let g_row = &mut g[i * features..(i + 1) * features];
            for (gv, &xj) in g_row.iter_mut().zip(row) {
                *gv += xi * xj as f64;
            }
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_known_system() {
        // A = [[4,1],[1,3]], b = [1,2] -> x = [1/11, 7/11]
        let a = vec![4.0, 1.0, 1.0, 3.0];
        let x = solve_spd(a, 2, vec![1.0, 2.0]).unwrap();
        assert!((x[0] - 1.0 / 11.0).abs() < 1e-12);
        assert!((x[1] - 7.0 / 11.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_singular() {
        let a = vec![1.0, 1.0, 1.0, 1.0];
        assert!(solve_spd(a, 2, vec![1.0, 1.0]).is_none());
    }

    #[test]
    fn gram_is_symmetric_xtx() {
        // X = [[1,2],[3,4]] -> X^T X = [[10,14],[14,20]]
        let g = gram(&[1.0, 2.0, 3.0, 4.0], 2, 2);
        assert_eq!(g, vec![10.0, 14.0, 14.0, 20.0]);
    }

    #[test]
    fn empty_system_is_trivial() {
        assert_eq!(solve_spd(Vec::new(), 0, Vec::new()), Some(Vec::new()));
    }
}
