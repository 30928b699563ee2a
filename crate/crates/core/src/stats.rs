//! Rank-correlation machinery: tie-corrected Kendall tau (tau-b) with an
//! O(n log n) merge-counting implementation plus a brute-force reference
//! path, Spearman rho over fractional ranks, and report assembly joining
//! metric scores against trained-performance records.

use crate::metrics::ScoreValue;
use crate::{Error, Result};
use std::collections::BTreeMap;

/// Integer pair counts shared by both Kendall implementations. The final
/// coefficient is always computed from these by [`tau_from_tallies`], so the
/// fast and brute-force paths agree bit-for-bit whenever their counts agree.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairTallies {
    pub n: usize,
    pub concordant_minus_discordant: i64,
    /// Pairs tied in x (including pairs tied in both).
    pub pairs_tied_x: u64,
    /// Pairs tied in y (including pairs tied in both).
    pub pairs_tied_y: u64,
    pub pairs_tied_both: u64,
}

/// Tau-b from pair tallies; `None` when either list is entirely tied.
pub fn tau_from_tallies(t: &PairTallies) -> Option<f64> {
    let n0 = (t.n as u64) * (t.n as u64 - 1) / 2;
    let d1 = n0 - t.pairs_tied_x;
    let d2 = n0 - t.pairs_tied_y;
    if d1 == 0 || d2 == 0 {
        return None;
    }
    let tau = t.concordant_minus_discordant as f64 / ((d1 as f64) * (d2 as f64)).sqrt();
    Some(tau.clamp(-1.0, 1.0))
}

fn check_inputs(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::Dimension(format!("rank inputs differ: {} vs {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::Contract(format!("need at least 2 observations, got {}", x.len())));
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Contract("rank inputs must be finite".into()));
    }
    Ok(())
}

/// Brute-force O(n^2) pair counting; the reference the fast path is checked
/// against.
pub fn kendall_tallies_brute(x: &[f64], y: &[f64]) -> Result<PairTallies> {
    check_inputs(x, y)?;
    let n = x.len();
    let mut cmd = 0i64;
    let (mut tx, mut ty, mut txy) = (0u64, 0u64, 0u64);
    for i in 0..n {
        for j in i + 1..n {
            let dx = x[i].partial_cmp(&x[j]).expect("finite");
            let dy = y[i].partial_cmp(&y[j]).expect("finite");
            match (dx.is_eq(), dy.is_eq()) {
                (true, true) => {
                    tx += 1;
                    ty += 1;
                    txy += 1;
                }
                (true, false) => tx += 1,
                (false, true) => ty += 1,
                (false, false) => {
                    if (dx.is_lt() && dy.is_lt()) || (dx.is_gt() && dy.is_gt()) {
                        cmd += 1;
                    } else {
                        cmd -= 1;
                    }
                }
            }
        }
    }
    Ok(PairTallies {
        n,
        concordant_minus_discordant: cmd,
        pairs_tied_x: tx,
        pairs_tied_y: ty,
        pairs_tied_both: txy,
    })
}

/// O(n log n) pair counting (sort by x, then merge-count discordant swaps
/// on y).
pub fn kendall_tallies(x: &[f64], y: &[f64]) -> Result<PairTallies> {
    check_inputs(x, y)?;
    let n = x.len();
    let mut pairs: Vec<(f64, f64)> = x.iter().cloned().zip(y.iter().cloned()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));

    // Tie runs in x and in (x, y).
    let run_pairs = |len: u64| len * (len - 1) / 2;
    let (mut tx, mut txy) = (0u64, 0u64);
    let mut x_run = 1u64;
    let mut xy_run = 1u64;
    for i in 1..n {
        if pairs[i].0 == pairs[i - 1].0 {
            x_run += 1;
            if pairs[i].1 == pairs[i - 1].1 {
                xy_run += 1;
            } else {
                txy += run_pairs(xy_run);
                xy_run = 1;
            }
        } else {
            tx += run_pairs(x_run);
            txy += run_pairs(xy_run);
            x_run = 1;
            xy_run = 1;
        }
    }
    tx += run_pairs(x_run);
    txy += run_pairs(xy_run);

    // Discordant pairs = swaps needed to sort y by merge sort.
    let mut ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let mut buf = vec![0.0; n];
    let swaps = merge_count(&mut ys, &mut buf);

    // Tie runs in y alone.
    let mut y_sorted: Vec<f64> = y.to_vec();
    y_sorted.sort_by(|a, b| a.total_cmp(b));
    let mut ty = 0u64;
    let mut y_run = 1u64;
    for i in 1..n {
        if y_sorted[i] == y_sorted[i - 1] {
            y_run += 1;
        } else {
            ty += run_pairs(y_run);
            y_run = 1;
        }
    }
    ty += run_pairs(y_run);

    let n0 = (n as u64) * (n as u64 - 1) / 2;
    let comparable = (n0 - tx - ty + txy) as i64;
    Ok(PairTallies {
        n,
        concordant_minus_discordant: comparable - 2 * swaps as i64,
        pairs_tied_x: tx,
        pairs_tied_y: ty,
        pairs_tied_both: txy,
    })
}

/// Merge sort counting inversions; strictly-greater comparisons only, so
/// ties contribute no swaps.
fn merge_count(values: &mut [f64], buf: &mut [f64]) -> u64 {
    let n = values.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = merge_count(&mut values[..mid], buf);
    swaps += merge_count(&mut values[mid..], buf);
    let (mut i, mut j, mut k) = (0usize, mid, 0usize);
    while i < mid || j < n {
        if i < mid && (j >= n || values[i] <= values[j]) {
            buf[k] = values[i];
            i += 1;
        } else {
            swaps += (mid - i) as u64;
            buf[k] = values[j];
            j += 1;
        }
        k += 1;
    }
    values.copy_from_slice(&buf[..n]);
    swaps
}

/// Tie-corrected Kendall tau-b; `None` when either list is entirely tied.
pub fn kendall_tau(x: &[f64], y: &[f64]) -> Result<Option<f64>> {
    Ok(tau_from_tallies(&kendall_tallies(x, y)?))
}

/// Brute-force tau-b, for verification.
pub fn kendall_tau_brute(x: &[f64], y: &[f64]) -> Result<Option<f64>> {
    Ok(tau_from_tallies(&kendall_tallies_brute(x, y)?))
}

/// Fractional ranks with ties averaged, 1-based.
pub fn fractional_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // Average of 1-based ranks i+1..=j+1.
        let avg = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rho: Pearson correlation of fractional ranks. `None` when either
/// rank vector has zero variance.
pub fn spearman_rho(x: &[f64], y: &[f64]) -> Result<Option<f64>> {
    check_inputs(x, y)?;
    let rx = fractional_ranks(x);
    let ry = fractional_ranks(y);
    let n = rx.len() as f64;
    let mean = (n + 1.0) / 2.0; // ranks always average to (n+1)/2
    let mut num = 0.0;
    let mut var_x = 0.0;
    let mut var_y = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        let dx = a - mean;
        let dy = b - mean;
        num += dx * dy;
        var_x += dx * dx;
        var_y += dy * dy;
    }
    if var_x == 0.0 || var_y == 0.0 {
        return Ok(None);
    }
    Ok(Some((num / (var_x * var_y).sqrt()).clamp(-1.0, 1.0)))
}

/// Paired (metric score, trained score) data with rank-correlation
/// coefficients and discard accounting.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationReport {
    pub metric_id: String,
    pub n_evaluated: usize,
    pub n_discarded: usize,
    /// `None` = undefined (fewer than 2 pairs, or one list all-tied).
    pub kendall_tau: Option<f64>,
    pub spearman_rho: Option<f64>,
    /// (metric value, raw trained score), in record order.
    pub pairs: Vec<(f64, f64)>,
}

/// Join metric scores against benchmark records on a shared key and rank
/// them. `performance_sign` makes "better" consistently larger: -1 for loss,
/// +1 for accuracy-like scores. Degenerate scores are discarded and counted.
pub fn build_report<K: Ord>(
    metric_id: &str,
    scores: &[(K, ScoreValue)],
    records: &[(K, f64)],
    performance_sign: i8,
) -> Result<CorrelationReport> {
    if performance_sign != 1 && performance_sign != -1 {
        return Err(Error::Contract(format!("performance sign must be +1 or -1, got {performance_sign}")));
    }
    let by_key: BTreeMap<&K, &ScoreValue> = scores.iter().map(|(k, v)| (k, v)).collect();
    let mut pairs = Vec::new();
    let mut n_discarded = 0usize;
    let mut joined = 0usize;
    for (key, trained) in records {
        let Some(value) = by_key.get(key) else { continue };
        joined += 1;
        match value {
            ScoreValue::Finite(v) => pairs.push((*v, *trained)),
            ScoreValue::Degenerate(_) => n_discarded += 1,
        }
    }
    if joined == 0 {
        return Err(Error::Contract("no overlap between scores and benchmark records".into()));
    }
    let (kendall, spearman) = if pairs.len() >= 2 {
        let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let ys: Vec<f64> =
            pairs.iter().map(|p| p.1 * performance_sign as f64).collect();
        (kendall_tau(&xs, &ys)?, spearman_rho(&xs, &ys)?)
    } else {
        (None, None)
    };
    Ok(CorrelationReport {
        metric_id: metric_id.to_string(),
        n_evaluated: pairs.len(),
        n_discarded,
        kendall_tau: kendall,
        spearman_rho: spearman,
        pairs,
    })
}
