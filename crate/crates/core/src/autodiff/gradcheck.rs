//! Central finite-difference utilities for verifying reverse-mode gradients.
//!
//! These helpers only re-run forward passes; they never consult the tape's
//! backward rules, so they stay an independent check of them.

/// Default finite-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Central difference of a scalar-valued function of one coordinate.
pub fn central_diff(mut f: impl FnMut(f64) -> f64, x0: f64, step: f64) -> f64 {
    (f(x0 + step) - f(x0 - step)) / (2.0 * step)
}

/// Relative error between an analytic and a reference value, with a floor so
/// that near-zero pairs compare absolutely.
pub fn rel_err(analytic: f64, reference: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(reference.abs()).max(floor);
    (analytic - reference).abs() / denom
}

/// Compare a full analytic gradient against central differences of `loss`,
/// which receives a perturbed copy of `point`. Returns the maximum relative
/// error over all coordinates whose magnitude exceeds `skip_below`.
pub fn max_grad_rel_err(
    mut loss: impl FnMut(&[f64]) -> f64,
    point: &[f64],
    analytic: &[f64],
    step: f64,
    skip_below: f64,
) -> f64 {
    assert_eq!(point.len(), analytic.len());
    let mut work = point.to_vec();
    let mut worst = 0.0f64;
    for i in 0..point.len() {
        let x0 = point[i];
        let fd = central_diff(
            |x| {
                work[i] = x;
                let v = loss(&work);
                work[i] = x0;
                v
            },
            x0,
            step,
        );
        if fd.abs().max(analytic[i].abs()) < skip_below {
            continue;
        }
        worst = worst.max(rel_err(analytic[i], fd, skip_below));
    }
    worst
}
