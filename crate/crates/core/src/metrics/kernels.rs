//! Shared metric math: row-wise Pearson correlation, the kernel-divergence
//! score over correlation eigenvalues, cosine-similarity scoring of
//! normalized Jacobian rows, and small aggregation helpers.

use crate::autodiff::{Tape, TensorId};

/// Offset added to correlation eigenvalues inside the kernel divergence.
pub const KERNEL_OFFSET: f64 = 1e-5;

/// Why a score could not be computed as a finite number.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DegenerateReason {
    /// A row of the correlated matrix has (numerically) zero variance.
    ZeroVariance,
    /// The kernel matrix is singular.
    SingularKernel,
    /// The metric does not apply to this architecture (e.g. no softmax
    /// heads, no activation nodes).
    Inapplicable,
    /// The computation produced a non-finite value.
    NonFinite,
}

impl DegenerateReason {
    pub fn code(&self) -> &'static str {
        match self {
            DegenerateReason::ZeroVariance => "zero_variance",
            DegenerateReason::SingularKernel => "singular_kernel",
            DegenerateReason::Inapplicable => "inapplicable",
            DegenerateReason::NonFinite => "non_finite",
        }
    }

    pub fn from_code(code: &str) -> Option<Self> {
        Some(match code {
            "zero_variance" => DegenerateReason::ZeroVariance,
            "singular_kernel" => DegenerateReason::SingularKernel,
            "inapplicable" => DegenerateReason::Inapplicable,
            "non_finite" => DegenerateReason::NonFinite,
            _ => return None,
        })
    }
}

/// Pearson product-moment correlation matrix between the rows of an
/// `n x d` matrix (numpy `corrcoef` semantics: each row is one observation
/// vector, centered by its own mean).
pub fn pearson_rows(data: &[f64], n: usize, d: usize) -> Result<Vec<f64>, DegenerateReason> {
    debug_assert_eq!(data.len(), n * d);
    let mut centered = vec![0.0; n * d];
    let mut norms = vec![0.0; n];
    for i in 0..n {
        let row = &data[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let mut norm_sq = 0.0;
        let mut scale = 0.0f64;
        for (j, &v) in row.iter().enumerate() {
            let c = v - mean;
            centered[i * d + j] = c;
            norm_sq += c * c;
            scale = scale.max(v.abs());
        }
        let norm = norm_sq.sqrt();
        if norm <= 1e-12 * scale.max(1.0) {
            return Err(DegenerateReason::ZeroVariance);
        }
        norms[i] = norm;
    }
    let mut r = vec![0.0; n * n];
    for i in 0..n {
        r[i * n + i] = 1.0;
        for j in i + 1..n {
            let mut dot = 0.0;
            for k in 0..d {
                dot += centered[i * d + k] * centered[j * d + k];
            }
            let v = dot / (norms[i] * norms[j]);
            r[i * n + j] = v;
            r[j * n + i] = v;
        }
    }
    Ok(r)
}

/// Kernel divergence of correlation eigenvalues:
/// `-sum_n(log(l_n + k) + 1/(l_n + k))` with `k = 1e-5`.
pub fn kernel_divergence(eigenvalues: &[f64]) -> Result<f64, DegenerateReason> {
    let mut total = 0.0;
    for &l in eigenvalues {
        let shifted = l + KERNEL_OFFSET;
        if shifted <= 0.0 {
            return Err(DegenerateReason::NonFinite);
        }
        total += shifted.ln() + 1.0 / shifted;
    }
    if total.is_finite() {
        Ok(-total)
    } else {
        Err(DegenerateReason::NonFinite)
    }
}

/// Cosine-similarity score of a Jacobian: rows normalized to unit length,
/// then `1 - (1/(N^2-N)) * sum_{i != j} |u_i . u_j|^(1/20)`.
pub fn cosine_score(rows: &[f64], n: usize, d: usize) -> Result<f64, DegenerateReason> {
    debug_assert_eq!(rows.len(), n * d);
    let mut unit = vec![0.0; n * d];
    for i in 0..n {
        let row = &rows[i * d..(i + 1) * d];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        let scale = row.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if norm <= 1e-12 * scale.max(1.0) {
            return Err(DegenerateReason::ZeroVariance);
        }
        for (j, &v) in row.iter().enumerate() {
            unit[i * d + j] = v / norm;
        }
    }
    let mut off_diag_sum = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let mut dot = 0.0;
            for k in 0..d {
                dot += unit[i * d + k] * unit[j * d + k];
            }
            off_diag_sum += dot.abs().powf(1.0 / 20.0);
        }
    }
    let pairs = (n * n - n) as f64;
    let score = 1.0 - off_diag_sum / pairs;
    if score.is_finite() {
        Ok(score)
    } else {
        Err(DegenerateReason::NonFinite)
    }
}

/// Sum over parameters of `|grad * value|` (the saliency aggregate).
pub fn abs_grad_weight_sum(tape: &Tape, params: &[(String, TensorId)]) -> f64 {
    let mut total = 0.0;
    for (_, id) in params {
        let values = tape.values(*id);
        // Parameters the loss never reaches contribute zero.
        if let Some(grads) = tape.grad(*id) {
            for (v, g) in values.iter().zip(grads) {
                total += (v * g).abs();
            }
        }
    }
    total
}

/// Mean over inputs of |max entry| of each input's block.
pub fn mean_abs_max_per_input(values: &[f64], n: usize) -> f64 {
    let block = values.len() / n;
    let mut total = 0.0;
    for i in 0..n {
        let max = values[i * block..(i + 1) * block]
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        total += max.abs();
    }
    total / n as f64
}

/// |inner product| of a head output with its gradient, over all entries.
pub fn abs_inner_product(values: &[f64], grads: &[f64]) -> f64 {
    values.iter().zip(grads).map(|(v, g)| v * g).sum::<f64>().abs()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::linalg;

    fn eig_of(r: &[f64], n: usize) -> Vec<f64> {
        let t = crate::autodiff::Tensor::from_values(vec![n, n], r.to_vec()).unwrap();
        linalg::spectrum(&t).unwrap()
    }

    #[test]
    fn duplicated_rows_give_all_ones_correlation() {
        // Two identical observation rows: R = [[1,1],[1,1]], eigenvalues
        // {2, 0}, and the kernel divergence reproduces the direct formula.
        let row = [0.3, -1.2, 0.7, 2.0];
        let data: Vec<f64> = row.iter().chain(row.iter()).cloned().collect();
        let r = pearson_rows(&data, 2, 4).unwrap();
        assert!((r[1] - 1.0).abs() < 1e-12);
        let eig = eig_of(&r, 2);
        assert!((eig[0] - 2.0).abs() < 1e-9);
        assert!(eig[1].abs() < 1e-9);

        let k = KERNEL_OFFSET;
        let oracle = -((2.0 + k).ln() + 1.0 / (2.0 + k) + k.ln() + 1.0 / k);
        let score = kernel_divergence(&eig).unwrap();
        assert!((score - oracle).abs() <= 1e-8 * oracle.abs());
        // Sanity anchor: about -9.99897e4.
        assert!((score + 9.99897e4).abs() < 1.0);
    }

    #[test]
    fn anticorrelated_rows_match_hand_eigendecomposition() {
        // Rows (1,0) and (0,1): centered (0.5,-0.5) and (-0.5,0.5),
        // R = [[1,-1],[-1,1]] with eigenvalues {2, 0}.
        let data = [1.0, 0.0, 0.0, 1.0];
        let r = pearson_rows(&data, 2, 2).unwrap();
        assert!((r[1] + 1.0).abs() < 1e-12);
        let eig = eig_of(&r, 2);
        let k = KERNEL_OFFSET;
        let oracle = -((2.0 + k).ln() + 1.0 / (2.0 + k) + k.ln() + 1.0 / k);
        let score = kernel_divergence(&eig).unwrap();
        assert!((score - oracle).abs() <= 1e-8 * oracle.abs());
    }

    #[test]
    fn identity_correlation_scores_near_minus_two() {
        // Orthogonal centered rows: R = I for N = 2, both eigenvalues 1.
        let data = [1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0];
        let r = pearson_rows(&data, 2, 4).unwrap();
        assert!(r[1].abs() < 1e-12);
        let eig = eig_of(&r, 2);
        let k = KERNEL_OFFSET;
        let oracle = -2.0 * ((1.0 + k).ln() + 1.0 / (1.0 + k));
        let score = kernel_divergence(&eig).unwrap();
        assert!((score - oracle).abs() <= 1e-8 * oracle.abs());
    }

    #[test]
    fn constant_row_is_zero_variance() {
        let data = [2.0, 2.0, 2.0, 1.0, 0.0, 3.0];
        assert_eq!(pearson_rows(&data, 2, 3), Err(DegenerateReason::ZeroVariance));
    }

    #[test]
    fn correlation_invariant_under_row_rescaling() {
        let data = [1.0, -0.5, 2.0, 0.3, 0.9, -1.1];
        let r1 = pearson_rows(&data, 2, 3).unwrap();
        let scaled: Vec<f64> = data
            .iter()
            .enumerate()
            .map(|(i, &v)| if i < 3 { v * 7.5 } else { v * 0.02 })
            .collect();
        let r2 = pearson_rows(&scaled, 2, 3).unwrap();
        for (a, b) in r1.iter().zip(&r2) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_score_orthogonal_rows() {
        let data = [1.0, 0.0, 0.0, 1.0];
        assert!((cosine_score(&data, 2, 2).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_score_identical_rows() {
        let data = [0.5, 0.5, 0.5, 0.5];
        // Off-diagonal |1|^(1/20) = 1 -> S = 0.
        assert!(cosine_score(&data, 2, 2).unwrap().abs() < 1e-12);
    }

    #[test]
    fn cosine_score_matches_straight_line_reimplementation() {
        // Independent oracle: re-derive the formula step by step.
        let rows = [0.3, -0.7, 1.1, 0.2, 0.9, 0.4, -0.6, 1.3, 0.05, -0.2, 0.8, -1.0];
        let (n, d) = (3usize, 4usize);
        let mut unit = vec![0.0; n * d];
        for i in 0..n {
            let norm: f64 = rows[i * d..(i + 1) * d].iter().map(|v| v * v).sum::<f64>().sqrt();
            for j in 0..d {
                unit[i * d + j] = rows[i * d + j] / norm;
            }
        }
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    let dot: f64 = (0..d).map(|k| unit[i * d + k] * unit[j * d + k]).sum();
                    acc += dot.abs().powf(0.05);
                }
            }
        }
        let oracle = 1.0 - acc / ((n * n - n) as f64);
        let got = cosine_score(&rows, n, d).unwrap();
        assert!((got - oracle).abs() <= 1e-12);
    }

    #[test]
    fn cosine_score_zero_row_degenerate() {
        let data = [0.0, 0.0, 1.0, 2.0];
        assert_eq!(cosine_score(&data, 2, 2), Err(DegenerateReason::ZeroVariance));
    }

    #[test]
    fn mean_abs_max_cases() {
        // All zeros -> 0; constant max 0.9 -> 0.9; negative max -> |max|.
        assert_eq!(mean_abs_max_per_input(&[0.0; 6], 2), 0.0);
        assert!((mean_abs_max_per_input(&[0.9, 0.1, 0.9, 0.2], 2) - 0.9).abs() < 1e-15);
        assert!((mean_abs_max_per_input(&[-3.0, -5.0], 2) - 4.0).abs() < 1e-15);
    }

    #[test]
    fn importance_inner_product() {
        assert_eq!(abs_inner_product(&[1.0, 2.0], &[0.0, 0.0]), 0.0);
        assert!((abs_inner_product(&[1.0, -2.0], &[3.0, 1.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn saliency_scalar_model() {
        // L = (w*x - y)^2 with w=2, x=1, y=1: dL/dw = 2, S = |2*2| = 4.
        use crate::autodiff::{Tape, Tensor};
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::scalar(2.0).with_grad());
        let x = tape.leaf(Tensor::scalar(1.0));
        let y = tape.leaf(Tensor::scalar(1.0));
        let wx = tape.mul(w, x).unwrap();
        let diff = tape.sub(wx, y).unwrap();
        let loss = tape.mul(diff, diff).unwrap();
        tape.backward(loss).unwrap();
        let params = vec![("w".to_string(), w)];
        let s = abs_grad_weight_sum(&tape, &params);
        assert!((s - 4.0).abs() <= 1e-8 * 4.0);
    }

    #[test]
    fn saliency_invariant_to_loss_constant() {
        use crate::autodiff::{Tape, Tensor};
        let build = |offset: f64| {
            let mut tape = Tape::new();
            let w = tape.leaf(Tensor::scalar(1.5).with_grad());
            let sq = tape.mul(w, w).unwrap();
            let c = tape.leaf(Tensor::scalar(offset));
            let loss = tape.add(sq, c).unwrap();
            tape.backward(loss).unwrap();
            abs_grad_weight_sum(&tape, &[("w".to_string(), w)])
        };
        assert_eq!(build(0.0), build(100.0));
    }

    #[test]
    fn zero_parameters_zero_saliency() {
        use crate::autodiff::{Tape, Tensor};
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::from_values(vec![2], vec![0.0, 0.0]).unwrap().with_grad());
        let s = tape.sum(w);
        tape.backward(s).unwrap();
        assert_eq!(abs_grad_weight_sum(&tape, &[("w".to_string(), w)]), 0.0);
    }
}
