//! Machine-readable evaluation output: a JSON report per run plus
//! plot-ready pair tables (metric value vs. trained score).

use crate::{HarnessError, Result};
use serde::Serialize;
use std::path::Path;
use tfnas_core::stats::CorrelationReport;

#[derive(Debug, Serialize)]
pub struct EvaluationReport {
    pub version: u32,
    pub search_space: String,
    pub performance_sign: i8,
    pub reports: Vec<MetricReport>,
}

#[derive(Debug, Serialize)]
pub struct MetricReport {
    pub metric: String,
    pub normalized: bool,
    pub n_evaluated: usize,
    pub n_discarded: usize,
    pub kendall_tau: Option<f64>,
    pub spearman_rho: Option<f64>,
    pub pairs_file: String,
}

pub fn pairs_file_name(metric: &str, normalized: bool) -> String {
    format!("pairs_{metric}_{}.tsv", if normalized { "normalized" } else { "raw" })
}

/// Write one pair table: metric value, tab, raw trained score per line.
pub fn write_pairs(dir: &Path, name: &str, report: &CorrelationReport) -> Result<()> {
    let mut out = String::from("#metric_value\ttrained_score\n");
    for (metric_value, trained) in &report.pairs {
        out.push_str(&format!("{metric_value}\t{trained}\n"));
    }
    let path = dir.join(name);
    std::fs::write(&path, out).map_err(|e| HarnessError::io(path, e))
}

pub fn write_report(dir: &Path, report: &EvaluationReport) -> Result<()> {
    let path = dir.join("report.json");
    let json = serde_json::to_string_pretty(report)?;
    std::fs::write(&path, json + "\n").map_err(|e| HarnessError::io(path, e))
}

/// Per-architecture spread statistics for one ablation axis.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub metric: String,
    /// "seed" or "minibatch".
    pub axis: &'static str,
    /// Decile rank of the architecture in the benchmark table (0..10).
    pub decile: usize,
    pub genome_idx: usize,
    pub n_finite: usize,
    pub n_flagged: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    /// Coefficient of variation: population std over |mean|.
    pub cv: f64,
    pub values: Vec<f64>,
}

/// Spread statistics over one cell's finite values.
pub fn spread_stats(values: &[f64]) -> (f64, f64, f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let cv = if mean == 0.0 { f64::INFINITY } else { var.sqrt() / mean.abs() };
    (mean, min, max, cv)
}

pub fn write_ablation(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut out = String::from(
        "#metric\taxis\tdecile\tgenome_idx\tn_finite\tn_flagged\tmean\tmin\tmax\tcv\tvalues\n",
    );
    for row in rows {
        let values: Vec<String> = row.values.iter().map(|v| format!("{v}")).collect();
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            row.metric,
            row.axis,
            row.decile,
            row.genome_idx,
            row.n_finite,
            row.n_flagged,
            row.mean,
            row.min,
            row.max,
            row.cv,
            values.join(",")
        ));
    }
    std::fs::write(path, out).map_err(|e| HarnessError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spread_stats_match_direct_recomputation() {
        let values = [2.0, 4.0, 4.0, 6.0];
        let (mean, min, max, cv) = spread_stats(&values);
        assert_eq!(mean, 4.0);
        assert_eq!(min, 2.0);
        assert_eq!(max, 6.0);
        // Population variance: ((2-4)^2 + 0 + 0 + (6-4)^2)/4 = 2.
        assert!((cv - (2.0f64).sqrt() / 4.0).abs() < 1e-15);
    }
}
