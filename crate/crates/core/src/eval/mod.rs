//! Open-set scoring and metrics.
//!
//! A sample is scored by its plain Euclidean distance to the nearest
//! prototype; `exp(-distance)` is its known-class confidence. All metrics are
//! pure functions over slices.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Default percentile of training min-distances used as the rejection threshold.
pub const DEFAULT_PERCENTILE: f64 = 95.0;
pub const DEFAULT_BINS: usize = 50;

/// A predicted or true label in the open label space: one of the `N` known
/// classes (0-based) or the single unknown class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OpenLabel {
    Known(usize),
    Unknown,
}

impl OpenLabel {
    /// Index in `0..=n_known`, with unknown mapped to `n_known`.
    pub fn index(self, n_known: usize) -> Result<usize> {
        match self {
            OpenLabel::Known(k) if k < n_known => Ok(k),
            OpenLabel::Known(k) => Err(Error::usage(format!("class {k} outside 0..{n_known}"))),
            OpenLabel::Unknown => Ok(n_known),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub min_distance: f64,
    pub nearest_class: usize,
    pub known_score: f64,
}

/// Scores every row of `features` [B×D] against `prototypes` [N×D].
pub fn score<T: Scalar>(features: &Tensor<T>, prototypes: &Tensor<T>) -> Result<Vec<ScoredSample>> {
    let (fs, ps) = (features.shape(), prototypes.shape());
    if fs.len() != 2 || ps.len() != 2 || fs[1] != ps[1] || ps[0] == 0 {
        return Err(Error::dim(format!("score: features {fs:?} vs prototypes {ps:?}")));
    }
    let (d, n) = (fs[1], ps[0]);
    let p = prototypes.data();
    Ok(features
        .data()
        .chunks(d.max(1))
        .take(fs[0])
        .map(|f| {
            let mut best = (f64::INFINITY, 0);
            for k in 0..n {
                let mut sq = 0.0;
                for j in 0..d {
                    let diff = f[j].as_f64() - p[k * d + j].as_f64();
                    sq += diff * diff;
                }
                if sq < best.0 {
                    best = (sq, k);
                }
            }
            let min_distance = best.0.sqrt();
            ScoredSample {
                min_distance,
                nearest_class: best.1,
                known_score: (-min_distance).exp(),
            }
        })
        .collect())
}

/// The `percentile` of `distances` with linear interpolation between order
/// statistics (rank `p/100 * (n-1)`).
pub fn calibrate_threshold(distances: &[f64], percentile: f64) -> Result<f64> {
    if distances.is_empty() {
        return Err(Error::usage("threshold calibration needs at least one distance"));
    }
    if !(percentile > 0.0 && percentile < 100.0) {
        return Err(Error::usage(format!(
            "percentile must be in (0, 100), got {percentile}"
        )));
    }
    if distances.iter().any(|d| !d.is_finite()) {
        return Err(Error::Numeric("non-finite distance in calibration set".into()));
    }
    let mut sorted = distances.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = percentile / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = rank - lo as f64;
    Ok(sorted[lo] + frac * (sorted[hi] - sorted[lo]))
}

/// Rejects samples strictly farther than `tau`; the boundary counts as known.
pub fn predict_open(sample: &ScoredSample, tau: f64) -> OpenLabel {
    if sample.min_distance > tau {
        OpenLabel::Unknown
    } else {
        OpenLabel::Known(sample.nearest_class)
    }
}

/// Probability that a random known sample outscores a random unknown one,
/// ties counting one half. Computed from rank sums in integer arithmetic.
pub fn auroc(known_scores: &[f64], unknown_scores: &[f64]) -> Result<f64> {
    if known_scores.is_empty() || unknown_scores.is_empty() {
        return Err(Error::usage("auroc needs both score lists to be nonempty"));
    }
    if known_scores.iter().chain(unknown_scores).any(|s| s.is_nan()) {
        return Err(Error::Numeric("NaN score passed to auroc".into()));
    }
    let mut pooled: Vec<(f64, bool)> = known_scores
        .iter()
        .map(|&s| (s, true))
        .chain(unknown_scores.iter().map(|&s| (s, false)))
        .collect();
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Doubled mid-ranks are integers: a tie group spanning 1-based ranks
    // first..=last gets rank (first + last) / 2 each.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < pooled.len() {
        let mut j = i;
        // -0.0 and 0.0 must tie
        while j + 1 < pooled.len() && pooled[j + 1].0 == pooled[i].0 {
            j += 1;
        }
        let twice_rank = (i + 1 + j + 1) as u128;
        let known_in_group = pooled[i..=j].iter().filter(|p| p.1).count() as u128;
        twice_rank_sum += twice_rank * known_in_group;
        i = j + 1;
    }
    let (n1, n2) = (known_scores.len() as u128, unknown_scores.len() as u128);
    let twice_u = twice_rank_sum - n1 * (n1 + 1);
    Ok(twice_u as f64 / (2 * n1 * n2) as f64)
}

pub fn closed_accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::usage(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::usage("closed_accuracy on an empty set"));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroF1 {
    pub macro_f1: f64,
    /// `n_known + 1` entries; the last is the unknown class.
    pub per_class: Vec<f64>,
}

/// Unweighted mean of per-class F1 over the `n_known` classes plus unknown.
/// A class with no true and no predicted members scores 0.
pub fn macro_f1(predictions: &[OpenLabel], truths: &[OpenLabel], n_known: usize) -> Result<MacroF1> {
    if predictions.len() != truths.len() {
        return Err(Error::usage(format!(
            "{} predictions for {} truths",
            predictions.len(),
            truths.len()
        )));
    }
    let k = n_known + 1;
    let (mut tp, mut fp, mut fneg) = (vec![0u64; k], vec![0u64; k], vec![0u64; k]);
    for (p, t) in predictions.iter().zip(truths) {
        let (p, t) = (p.index(n_known)?, t.index(n_known)?);
        if p == t {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fneg[t] += 1;
        }
    }
    let per_class: Vec<f64> = (0..k).map(|c| f1_from_counts(tp[c], fp[c], fneg[c])).collect();
    let macro_f1 = per_class.iter().sum::<f64>() / k as f64;
    Ok(MacroF1 { macro_f1, per_class })
}

/// `2PR/(P+R)` written as `2TP/(2TP+FP+FN)`; 0 when the denominator is 0.
pub fn f1_from_counts(tp: u64, fp: u64, fneg: u64) -> f64 {
    let denom = 2 * tp + fp + fneg;
    if denom == 0 {
        0.0
    } else {
        (2 * tp) as f64 / denom as f64
    }
}

/// `1 - sqrt(2 n_train / (n_test + n_target))`.
pub fn openness(n_train: usize, n_test: usize, n_target: usize) -> Result<f64> {
    if n_train == 0 || n_test == 0 || n_target == 0 {
        return Err(Error::usage("openness needs positive class counts"));
    }
    if 2 * n_train > n_test + n_target {
        return Err(Error::usage(format!(
            "openness undefined for n_train={n_train}, n_test={n_test}, n_target={n_target}"
        )));
    }
    Ok(1.0 - (2.0 * n_train as f64 / (n_test + n_target) as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` ascending edges; the last bin is closed on the right.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceHistograms {
    pub known: Histogram,
    pub unknown: Histogram,
    pub known_median: f64,
    pub unknown_median: f64,
}

/// Distances of every row of `features` to `center`.
pub fn distances_to<T: Scalar>(features: &Tensor<T>, center: &[f64]) -> Result<Vec<f64>> {
    let s = features.shape();
    if s.len() != 2 || s[1] != center.len() {
        return Err(Error::dim(format!("features {s:?} vs center of dim {}", center.len())));
    }
    Ok((0..s[0])
        .map(|i| crate::model::euclidean(features.row(i).iter().map(|v| v.as_f64()), center))
        .collect())
}

/// Histograms of known and unknown distances to `center` on a shared grid of
/// `bins` equal-width bins over the pooled range.
pub fn distance_histograms<T: Scalar>(
    features_known: &Tensor<T>,
    features_unknown: &Tensor<T>,
    center: &[f64],
    bins: usize,
) -> Result<DistanceHistograms> {
    if features_known.is_empty() || features_unknown.is_empty() {
        return Err(Error::usage("distance histograms need nonempty known and unknown sets"));
    }
    if bins == 0 {
        return Err(Error::usage("histogram needs at least one bin"));
    }
    let known = distances_to(features_known, center)?;
    let unknown = distances_to(features_unknown, center)?;
    let (lo, hi) = known
        .iter()
        .chain(&unknown)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &d| (a.min(d), b.max(d)));
    // A degenerate range still gets a usable grid; everything lands in bin 0.
    let width = if hi > lo {
        (hi - lo) / bins as f64
    } else {
        1.0 / bins as f64
    };
    let edges: Vec<f64> = (0..=bins).map(|i| lo + width * i as f64).collect();
    let hist = |ds: &[f64]| {
        let mut counts = vec![0; bins];
        for &d in ds {
            let b = (((d - lo) / width).floor() as usize).min(bins - 1);
            counts[b] += 1;
        }
        Histogram {
            edges: edges.clone(),
            counts,
        }
    };
    Ok(DistanceHistograms {
        known: hist(&known),
        unknown: hist(&unknown),
        known_median: median(&known)?,
        unknown_median: median(&unknown)?,
    })
}

pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::usage("median of an empty list"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Ok(if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    })
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Everything one evaluation run reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub closed_accuracy: f64,
    pub auroc: f64,
    pub macro_f1: Option<f64>,
    pub per_class_f1: Option<Vec<f64>>,
    pub threshold: f64,
    pub percentile: f64,
    pub openness: Option<f64>,
    pub histograms: Option<DistanceHistograms>,
}

#[cfg(test)]
mod tests;
