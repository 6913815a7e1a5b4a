//! Prototype losses.
//!
//! * `dce`: cross-entropy over the logits `-d(feature, prototype_i)`.
//! * `pl`: squared distance of each feature to its own class prototype.
//! * `slc`: unbiased variance of the prototypes' distances to their centroid.
//!
//! PL uses `dce` alone, GCPL adds `lambda * pl`, SLCPL adds `slc` on top of GCPL.
//! Batch terms are averaged over the batch.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Scalar, Var};
use crate::error::{Error, Result};

/// Added under the square root of each prototype-to-centroid distance so the
/// derivative stays finite when a prototype sits on the centroid.
pub const RADIUS_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Pl,
    Gcpl,
    Slcpl,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Pl => "pl",
            Variant::Gcpl => "gcpl",
            Variant::Slcpl => "slcpl",
        })
    }
}

/// Which distance enters the cross-entropy logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceMode {
    Squared,
    Plain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub variant: Variant,
    pub lambda: f64,
    pub distance_in_logits: DistanceMode,
    /// Coefficient of the slc term; 1.0 reproduces the SLCPL objective.
    pub slc_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            variant: Variant::Slcpl,
            lambda: 0.1,
            distance_in_logits: DistanceMode::Squared,
            slc_weight: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.slc_weight >= 0.0 && self.slc_weight.is_finite()) {
            return Err(Error::Config(format!(
                "slc_weight must be >= 0, got {}",
                self.slc_weight
            )));
        }
        Ok(())
    }
}

/// Per-batch loss decomposition. Terms a variant does not use are exactly 0.
///
/// `total = ce_term + lambda * pl_term + slc_weight * slc_term`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub ce_term: f64,
    pub pl_term: f64,
    pub slc_term: f64,
}

fn check_labels(labels: &[usize], n: usize, rows: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::usage(format!("{} labels for {rows} samples", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
        return Err(Error::usage(format!("label {bad} outside 0..{n}")));
    }
    Ok(())
}

/// Mean over the batch of `-log softmax(-distances)[label]`.
///
/// Rows are stabilised by their smallest distance, so adding a constant to
/// every distance of a sample leaves its loss unchanged.
pub fn dce_loss<T: Scalar>(g: &mut Graph<T>, distances: Var, labels: &[usize]) -> Result<Var> {
    let s = g.shape(distances);
    if s.len() != 2 {
        return Err(Error::dim(format!("dce_loss: distances {s:?}")));
    }
    check_labels(labels, s[1], s[0])?;
    let logits = g.neg(distances)?;
    let lse = g.logsumexp_rows(logits)?;
    let own = g.pick_rows(distances, labels)?;
    let per_sample = g.add(own, lse)?;
    g.mean(per_sample)
}

/// Mean over the batch of `||feature - prototype[label]||^2`.
pub fn pl_term<T: Scalar>(g: &mut Graph<T>, features: Var, prototypes: Var, labels: &[usize]) -> Result<Var> {
    let sq = g.pairwise_sq_dist(features, prototypes)?;
    pl_from_sq(g, sq, labels)
}

fn pl_from_sq<T: Scalar>(g: &mut Graph<T>, sq: Var, labels: &[usize]) -> Result<Var> {
    let s = g.shape(sq);
    check_labels(labels, s[1], s[0])?;
    let own = g.pick_rows(sq, labels)?;
    g.mean(own)
}

/// `1/(N-1) * sum_i (r_i - mean(r))^2` with `r_i = ||O_i - O_c||` and
/// `O_c` the prototype centroid. The gradient includes the dependence of
/// `O_c` on every prototype.
pub fn slc_term<T: Scalar>(g: &mut Graph<T>, prototypes: Var) -> Result<Var> {
    let s = g.shape(prototypes);
    if s.len() != 2 {
        return Err(Error::dim(format!("slc_term: prototypes {s:?}")));
    }
    let n = s[0];
    if n < 2 {
        return Err(Error::usage(format!("slc_term needs at least 2 prototypes, got {n}")));
    }
    let center = g.mean_rows(prototypes)?;
    let sq = g.pairwise_sq_dist(prototypes, center)?;
    let r = g.sqrt_eps(sq, T::from_f64(RADIUS_EPS))?;
    let dev = g.center(r)?;
    let dev2 = g.square(dev)?;
    let ss = g.sum(dev2)?;
    g.scale(ss, T::one() / T::from_usize(n - 1))
}

/// Builds the configured objective on `g`; returns the scalar loss and its
/// decomposition.
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    config: &LossConfig,
    features: Var,
    prototypes: Var,
    labels: &[usize],
) -> Result<(Var, LossReport)> {
    let sq = g.pairwise_sq_dist(features, prototypes)?;
    let logit_dist = match config.distance_in_logits {
        DistanceMode::Squared => sq,
        DistanceMode::Plain => g.sqrt_eps(sq, T::from_f64(RADIUS_EPS))?,
    };
    let ce = dce_loss(g, logit_dist, labels)?;
    let mut report = LossReport {
        ce_term: g.scalar(ce).as_f64(),
        ..LossReport::default()
    };
    let mut total = ce;
    if matches!(config.variant, Variant::Gcpl | Variant::Slcpl) {
        let pl = pl_from_sq(g, sq, labels)?;
        report.pl_term = g.scalar(pl).as_f64();
        let weighted = g.scale(pl, T::from_f64(config.lambda))?;
        total = g.add(total, weighted)?;
    }
    if config.variant == Variant::Slcpl {
        let slc = slc_term(g, prototypes)?;
        report.slc_term = g.scalar(slc).as_f64();
        let weighted = g.scale(slc, T::from_f64(config.slc_weight))?;
        total = g.add(total, weighted)?;
    }
    report.total = g.scalar(total).as_f64();
    Ok((total, report))
}
