//! Binary-classification metrics: ROC/AUC, background rejection at fixed
//! signal-efficiency operating points, and median/IQR aggregation over runs.
//!
//! All functions are pure over immutable sample slices. Quantiles use linear
//! interpolation between order statistics; the rejection threshold is the
//! largest score cut whose true-positive rate still reaches the requested
//! efficiency, which also minimizes the false-positive rate among achieving
//! cuts.

use alloc::vec::Vec;
use core::fmt;

/// Errors from metric computations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricsError {
    /// Empty input where at least one value is required.
    Empty,
    /// Samples contain only one of the two classes.
    SingleClass,
    /// Requested efficiency outside (0, 1).
    BadEfficiency,
    /// A score is NaN or infinite.
    NonFiniteScore,
    /// A label other than 0 or 1.
    InvalidLabel,
}

impl fmt::Display for MetricsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let msg = match self {
            MetricsError::Empty => "no samples",
            MetricsError::SingleClass => "both classes required",
            MetricsError::BadEfficiency => "efficiency must lie in (0, 1)",
            MetricsError::NonFiniteScore => "score is not finite",
            MetricsError::InvalidLabel => "label out of range",
        };
        f.write_str(msg)
    }
}

#[cfg(feature = "std")]
impl std::error::Error for MetricsError {}

/// One classifier output with its true class (1 = signal, 0 = background).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredSample {
    pub score: f64,
    pub label: u8,
}

impl ScoredSample {
    pub fn new(score: f64, label: u8) -> ScoredSample {
        ScoredSample { score, label }
    }
}

/// AUC plus rejection values at requested efficiency points and the full
/// operating-point curve.
#[derive(Debug, Clone)]
pub struct RocSummary {
    pub auc: f64,
    /// `(efficiency, rejection)` at each requested operating point.
    pub rejections: Vec<(f64, f64)>,
    /// `(efficiency, rejection)` at every distinct score threshold,
    /// descending in threshold. Rejection is `+inf` where no background
    /// passes the cut.
    pub curve: Vec<(f64, f64)>,
}

fn validate(samples: &[ScoredSample]) -> Result<(usize, usize), MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut n_sig = 0usize;
    let mut n_bkg = 0usize;
    for s in samples {
        if !s.score.is_finite() {
            return Err(MetricsError::NonFiniteScore);
        }
        match s.label {
            1 => n_sig += 1,
            0 => n_bkg += 1,
            _ => return Err(MetricsError::InvalidLabel),
        }
    }
    if n_sig == 0 || n_bkg == 0 {
        return Err(MetricsError::SingleClass);
    }
    Ok((n_sig, n_bkg))
}

/// Probability that a uniformly random signal sample outscores a uniformly
/// random background sample, ties counted one half (the rank statistic).
pub fn roc_auc(samples: &[ScoredSample]) -> Result<f64, MetricsError> {
    let (n_sig, n_bkg) = validate(samples)?;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.sort_by(|&a, &b| samples[a].score.partial_cmp(&samples[b].score).unwrap());
    // Sum of average ranks (1-based) over signal samples.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && samples[order[j]].score == samples[order[i]].score {
            j += 1;
        }
        // Ranks i+1 ..= j share the average (i + j + 1) / 2.
        let avg_rank = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            if samples[k].label == 1 {
                rank_sum += avg_rank;
            }
        }
        i = j;
    }
    let u = rank_sum - (n_sig * (n_sig + 1)) as f64 / 2.0;
    Ok(u / (n_sig * n_bkg) as f64)
}

/// Distinct score thresholds in descending order.
fn descending_thresholds(samples: &[ScoredSample]) -> Vec<f64> {
    let mut t: Vec<f64> = samples.iter().map(|s| s.score).collect();
    t.sort_by(|a, b| b.partial_cmp(a).unwrap());
    t.dedup();
    t
}

/// True-positive and false-positive rates of the cut `score >= threshold`.
fn rates_at(samples: &[ScoredSample], n_sig: usize, n_bkg: usize, threshold: f64) -> (f64, f64) {
    let mut sig_pass = 0usize;
    let mut bkg_pass = 0usize;
    for s in samples {
        if s.score >= threshold {
            if s.label == 1 {
                sig_pass += 1;
            } else {
                bkg_pass += 1;
            }
        }
    }
    (sig_pass as f64 / n_sig as f64, bkg_pass as f64 / n_bkg as f64)
}

/// Background rejection `1 / FPR` at the largest score cut whose signal
/// efficiency reaches `eff`; `+inf` when no background passes that cut (the
/// background sample size is then a lower bound on the true rejection).
pub fn rejection_at_efficiency(
    samples: &[ScoredSample],
    eff: f64,
) -> Result<f64, MetricsError> {
    if !(eff > 0.0 && eff < 1.0) {
        return Err(MetricsError::BadEfficiency);
    }
    let (n_sig, n_bkg) = validate(samples)?;
    for threshold in descending_thresholds(samples) {
        let (tpr, fpr) = rates_at(samples, n_sig, n_bkg, threshold);
        if tpr >= eff {
            return Ok(if fpr == 0.0 { f64::INFINITY } else { 1.0 / fpr });
        }
    }
    // The lowest threshold passes every sample, so TPR = 1 >= eff always
    // terminates the loop above.
    unreachable!("descending scan always reaches TPR = 1");
}

/// Operating points `(efficiency, rejection)` at every distinct threshold,
/// descending in threshold (ascending in efficiency).
pub fn roc_curve(samples: &[ScoredSample]) -> Result<Vec<(f64, f64)>, MetricsError> {
    let (n_sig, n_bkg) = validate(samples)?;
    let mut curve = Vec::new();
    for threshold in descending_thresholds(samples) {
        let (tpr, fpr) = rates_at(samples, n_sig, n_bkg, threshold);
        let rejection = if fpr == 0.0 { f64::INFINITY } else { 1.0 / fpr };
        curve.push((tpr, rejection));
    }
    Ok(curve)
}

/// AUC, rejections at the requested efficiency points, and the full curve.
pub fn roc_summary(
    samples: &[ScoredSample],
    eff_points: &[f64],
) -> Result<RocSummary, MetricsError> {
    let auc = roc_auc(samples)?;
    let mut rejections = Vec::with_capacity(eff_points.len());
    for &eff in eff_points {
        rejections.push((eff, rejection_at_efficiency(samples, eff)?));
    }
    Ok(RocSummary { auc, rejections, curve: roc_curve(samples)? })
}

/// Quantile by linear interpolation between order statistics of sorted data.
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p;
    let lo = h as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Median and inter-quartile range (Q3 - Q1) with linear interpolation.
pub fn median_iqr(values: &[f64]) -> Result<(f64, f64), MetricsError> {
    if values.is_empty() {
        return Err(MetricsError::Empty);
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(MetricsError::NonFiniteScore);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = quantile_sorted(&sorted, 0.5);
    let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
    Ok((median, iqr))
}
