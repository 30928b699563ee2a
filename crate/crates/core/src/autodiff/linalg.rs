//! Dense spectral routines for small matrices: symmetric eigenvalues via
//! classical Jacobi rotations, singular values via one-sided (Hestenes)
//! Jacobi, and an LU log-determinant. Sizes here are minibatch-scale
//! (n up to a few hundred), where these methods are simple and robust.

use crate::autodiff::Tensor;
use crate::{Error, Result};

const MAX_SWEEPS: usize = 100;
const OFF_DIAG_TOL: f64 = 1e-12;
const SYMMETRY_TOL: f64 = 1e-9;

/// Eigenvalues of a symmetric matrix, in descending order.
///
/// The input must be square and symmetric within 1e-9. Fails with a numeric
/// error if the rotation sweeps do not converge.
pub fn spectrum(m: &Tensor) -> Result<Vec<f64>> {
    let n = match m.shape() {
        [r, c] if r == c => *r,
        s => return Err(Error::Dimension(format!("spectrum expects a square matrix, got {s:?}"))),
    };
    let values = m.values();
    for i in 0..n {
        for j in (i + 1)..n {
            if (values[i * n + j] - values[j * n + i]).abs() > SYMMETRY_TOL {
                return Err(Error::Contract(format!(
                    "matrix not symmetric within {SYMMETRY_TOL:e} at ({i},{j})"
                )));
            }
        }
    }
    let mut a = values.to_vec();
    sym_eigenvalues_in_place(&mut a, n)
}

/// Symmetric eigenvalues on a raw row-major buffer (consumed as workspace).
pub(crate) fn sym_eigenvalues_in_place(a: &mut [f64], n: usize) -> Result<Vec<f64>> {
    if n == 1 {
        return Ok(vec![a[0]]);
    }
    let scale = a.iter().fold(0.0f64, |acc, v| acc.max(v.abs())).max(1.0);
    let tol = OFF_DIAG_TOL * scale;
    for _ in 0..MAX_SWEEPS {
        let mut off_max = 0.0f64;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let apq = a[p * n + q];
                off_max = off_max.max(apq.abs());
                if apq.abs() <= tol {
                    continue;
                }
                let (c, s) = rotation(a[p * n + p], a[q * n + q], apq);
                apply_jacobi_rotation(a, n, p, q, c, s);
            }
        }
        if off_max <= tol {
            let mut eig: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
            eig.sort_by(|x, y| y.partial_cmp(x).unwrap());
            return Ok(eig);
        }
    }
    Err(Error::Numeric(format!("Jacobi eigenvalue iteration did not converge in {MAX_SWEEPS} sweeps")))
}

/// Rotation (c, s) annihilating the (p,q) entry given app, aqq, apq.
fn rotation(app: f64, aqq: f64, apq: f64) -> (f64, f64) {
    let theta = (aqq - app) / (2.0 * apq);
    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
    let c = 1.0 / (t * t + 1.0).sqrt();
    (c, t * c)
}

fn apply_jacobi_rotation(a: &mut [f64], n: usize, p: usize, q: usize, c: f64, s: f64) {
    for k in 0..n {
        let akp = a[k * n + p];
        let akq = a[k * n + q];
        a[k * n + p] = c * akp - s * akq;
        a[k * n + q] = s * akp + c * akq;
    }
    for k in 0..n {
        let apk = a[p * n + k];
        let aqk = a[q * n + k];
        a[p * n + k] = c * apk - s * aqk;
        a[q * n + k] = s * apk + c * aqk;
    }
}

/// Singular values of an arbitrary matrix, in descending order, via
/// one-sided Jacobi orthogonalization of the columns.
pub fn singular_values(m: &Tensor) -> Result<Vec<f64>> {
    let (rows, cols) = match m.shape() {
        [r, c] => (*r, *c),
        s => return Err(Error::Dimension(format!("singular_values expects a matrix, got {s:?}"))),
    };
    // Work on the tall orientation; singular values are transpose-invariant.
    let (r, c, data) = if rows >= cols {
        (rows, cols, m.values().to_vec())
    } else {
        let mut t = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                t[j * rows + i] = m.values()[i * cols + j];
            }
        }
        (cols, rows, t)
    };
    singular_values_tall(data, r, c)
}

fn singular_values_tall(mut a: Vec<f64>, rows: usize, cols: usize) -> Result<Vec<f64>> {
    let col = |a: &[f64], j: usize, i: usize| a[i * cols + j];
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..cols.saturating_sub(1) {
            for q in p + 1..cols {
                let mut alpha = 0.0;
                let mut beta = 0.0;
                let mut gamma = 0.0;
                for i in 0..rows {
                    let ap = col(&a, p, i);
                    let aq = col(&a, q, i);
                    alpha += ap * ap;
                    beta += aq * aq;
                    gamma += ap * aq;
                }
                let limit = OFF_DIAG_TOL * (alpha * beta).sqrt();
                if gamma.abs() <= limit || limit == 0.0 {
                    continue;
                }
                rotated = true;
                let (c, s) = rotation(alpha, beta, gamma);
                for i in 0..rows {
                    let ap = col(&a, p, i);
                    let aq = col(&a, q, i);
                    a[i * cols + p] = c * ap - s * aq;
                    a[i * cols + q] = s * ap + c * aq;
                }
            }
        }
        if !rotated {
            let mut sv: Vec<f64> = (0..cols)
                .map(|j| (0..rows).map(|i| col(&a, j, i).powi(2)).sum::<f64>().sqrt())
                .collect();
            sv.sort_by(|x, y| y.partial_cmp(x).unwrap());
            return Ok(sv);
        }
    }
    Err(Error::Numeric(format!("one-sided Jacobi SVD did not converge in {MAX_SWEEPS} sweeps")))
}

/// Nuclear norm: the sum of singular values.
pub fn nuclear_norm(m: &Tensor) -> Result<f64> {
    Ok(singular_values(m)?.iter().sum())
}

/// log|det| of a square matrix via LU with partial pivoting.
/// Returns `None` for an exactly singular matrix.
pub fn log_abs_det(matrix: &[f64], n: usize) -> Result<Option<f64>> {
    if matrix.len() != n * n {
        return Err(Error::Dimension(format!("log_abs_det expects {n}x{n} values")));
    }
    let mut a = matrix.to_vec();
    let mut log_det = 0.0;
    for k in 0..n {
        let mut pivot_row = k;
        let mut pivot_val = a[k * n + k].abs();
        for i in k + 1..n {
            let v = a[i * n + k].abs();
            if v > pivot_val {
                pivot_val = v;
                pivot_row = i;
            }
        }
        if pivot_val == 0.0 {
            return Ok(None);
        }
        if pivot_row != k {
            for j in 0..n {
                a.swap(k * n + j, pivot_row * n + j);
            }
        }
        let pivot = a[k * n + k];
        log_det += pivot.abs().ln();
        for i in k + 1..n {
            let factor = a[i * n + k] / pivot;
            if factor == 0.0 {
                continue;
            }
            for j in k..n {
                a[i * n + j] -= factor * a[k * n + j];
            }
        }
    }
    if log_det.is_finite() {
        Ok(Some(log_det))
    } else {
        Ok(None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tensor(shape: &[usize], values: &[f64]) -> Tensor {
        Tensor::from_values(shape.to_vec(), values.to_vec()).unwrap()
    }

    #[test]
    fn nuclear_norm_diagonal() {
        let m = tensor(&[2, 2], &[3.0, 0.0, 0.0, 4.0]);
        assert!((nuclear_norm(&m).unwrap() - 7.0).abs() < 1e-12);
    }

    #[test]
    fn spectrum_rank_one_symmetric() {
        let m = tensor(&[2, 2], &[1.0, -1.0, -1.0, 1.0]);
        let eig = spectrum(&m).unwrap();
        assert!((eig[0] - 2.0).abs() < 1e-12);
        assert!(eig[1].abs() < 1e-12);
    }

    #[test]
    fn spectrum_rejects_asymmetric() {
        let m = tensor(&[2, 2], &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(spectrum(&m), Err(Error::Contract(_))));
    }

    #[test]
    fn singular_values_match_gram_eigenvalues() {
        // Independent route: eigenvalues of M^T M are squared singular values.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let values: Vec<f64> = (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let m = tensor(&[4, 3], &values);
            let sv = singular_values(&m).unwrap();

            let mut gram = vec![0.0; 9];
            for i in 0..3 {
                for j in 0..3 {
                    for k in 0..4 {
                        gram[i * 3 + j] += values[k * 3 + i] * values[k * 3 + j];
                    }
                }
            }
            let eig = sym_eigenvalues_in_place(&mut gram, 3).unwrap();
            for (s, e) in sv.iter().zip(&eig) {
                let expected = e.max(0.0).sqrt();
                assert!(
                    (s - expected).abs() <= 1e-8 * expected.max(1.0),
                    "sv {s} vs gram eig route {expected}"
                );
            }
        }
    }

    #[test]
    fn nuclear_norm_rotation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let values: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let m = tensor(&[4, 4], &values);
        let base = nuclear_norm(&m).unwrap();

        // Apply a chain of Givens rotations on the left.
        let mut rotated = values;
        for _ in 0..6 {
            let i = rng.gen_range(0..4);
            let mut j = rng.gen_range(0..4);
            if i == j {
                j = (j + 1) % 4;
            }
            let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let (s, c) = angle.sin_cos();
            for col in 0..4 {
                let vi = rotated[i * 4 + col];
                let vj = rotated[j * 4 + col];
                rotated[i * 4 + col] = c * vi - s * vj;
                rotated[j * 4 + col] = s * vi + c * vj;
            }
        }
        let m2 = tensor(&[4, 4], &rotated);
        assert!((nuclear_norm(&m2).unwrap() - base).abs() <= 1e-8 * base.max(1.0));
    }

    #[test]
    fn log_abs_det_diag_and_singular() {
        let d = [3.0, 0.0, 0.0, 4.0];
        assert!((log_abs_det(&d, 2).unwrap().unwrap() - 12.0f64.ln()).abs() < 1e-12);
        let s = [1.0, 2.0, 1.0, 2.0];
        assert!(log_abs_det(&s, 2).unwrap().is_none());
    }
}
