use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::openness;
use crate::rng::{stream_rng, Stream};

use super::ImageDataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitStyle {
    /// Known and unknown classes drawn from one dataset.
    Within,
    /// Known classes from one dataset, unknown classes from another (CIFAR+K).
    Cross,
    /// Fixed known set; unknown sets are nested prefixes of one random order,
    /// so larger sweep points add classes to smaller ones.
    OpennessSweep,
    /// Every class of the dataset is known; unknowns come from a separate
    /// outlier set that counts as a single unknown class.
    Outlier,
}

/// Which original classes are known, which are unknown, and how known
/// classes map onto `0..N`: `known[i]` becomes label `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitProtocol {
    pub style: SplitStyle,
    pub known: Vec<usize>,
    pub unknown: Vec<usize>,
    pub trial_seed: u64,
    pub openness: f64,
}

/// Samples a protocol deterministically from `trial_seed`.
///
/// `source_classes` is the class count of the known-class dataset;
/// `target_classes` that of the unknown-class dataset for `Cross`.
/// `n_unknown` of `None` means "all remaining classes" for `Within` and
/// `OpennessSweep`; it is required for `Cross` and ignored for `Outlier`.
pub fn make_split(
    style: SplitStyle,
    source_classes: usize,
    target_classes: Option<usize>,
    n_known: usize,
    n_unknown: Option<usize>,
    trial_seed: u64,
) -> Result<SplitProtocol> {
    if n_known < 2 {
        return Err(Error::Protocol(format!("need at least 2 known classes, got {n_known}")));
    }
    let mut rng = stream_rng(trial_seed, Stream::Split, 0);
    let mut order: Vec<usize> = (0..source_classes).collect();
    order.shuffle(&mut rng);
    let (known, unknown, n_test) = match style {
        SplitStyle::Outlier => {
            if n_known != source_classes {
                return Err(Error::Protocol(format!(
                    "outlier protocol uses all {source_classes} classes as known, got n_known={n_known}"
                )));
            }
            ((0..source_classes).collect(), Vec::new(), n_known + 1)
        }
        SplitStyle::Within | SplitStyle::OpennessSweep => {
            if n_known >= source_classes {
                return Err(Error::Protocol(format!(
                    "n_known={n_known} leaves no unknown classes among {source_classes}"
                )));
            }
            let rest = source_classes - n_known;
            let nu = n_unknown.unwrap_or(rest);
            if nu == 0 || nu > rest {
                return Err(Error::Protocol(format!("cannot draw {nu} unknown classes from {rest}")));
            }
            let unknown = order[n_known..n_known + nu].to_vec();
            (order[..n_known].to_vec(), unknown, n_known + nu)
        }
        SplitStyle::Cross => {
            if n_known > source_classes {
                return Err(Error::Protocol(format!(
                    "cannot draw {n_known} known classes from {source_classes}"
                )));
            }
            let target =
                target_classes.ok_or_else(|| Error::Protocol("cross-dataset split needs a target dataset".into()))?;
            let nu = n_unknown.ok_or_else(|| Error::Protocol("cross-dataset split needs n_unknown".into()))?;
            if nu == 0 || nu > target {
                return Err(Error::Protocol(format!(
                    "cannot draw {nu} unknown classes from {target}"
                )));
            }
            let mut t: Vec<usize> = (0..target).collect();
            t.shuffle(&mut rng);
            (order[..n_known].to_vec(), t[..nu].to_vec(), n_known + nu)
        }
    };
    let mut known = known;
    known.sort_unstable();
    Ok(SplitProtocol {
        style,
        known,
        unknown,
        trial_seed,
        openness: openness(n_known, n_test, n_known)?,
    })
}

impl SplitProtocol {
    pub fn n_known(&self) -> usize {
        self.known.len()
    }

    /// New label of an original class, if known.
    pub fn relabel(&self, original: usize) -> Option<usize> {
        self.known.iter().position(|&k| k == original)
    }

    /// Known-class images relabelled onto `0..N`, plus each image's index in `ds`.
    pub fn known_subset(&self, ds: &ImageDataset) -> Result<(ImageDataset, Vec<usize>)> {
        let idx = ds.indices_of(&self.known)?;
        let mut sub = ds.select(&idx)?;
        sub.labels = Some(
            sub.labels()?
                .iter()
                .map(|&l| self.relabel(l).expect("filtered"))
                .collect(),
        );
        sub.num_classes = self.n_known();
        Ok((sub, idx))
    }

    /// Unknown-class images from `ds` (original labels kept).
    pub fn unknown_subset(&self, ds: &ImageDataset) -> Result<ImageDataset> {
        let idx = ds.indices_of(&self.unknown)?;
        ds.select(&idx)
    }

    /// Confirms no sample in `batches` comes from an unknown class.
    /// `origin[i]` is the source index of training sample `i` and
    /// `source_labels` are the source dataset's original labels.
    /// Returns the number of samples inspected.
    pub fn audit(&self, source_labels: &[usize], origin: &[usize], batches: &[Vec<usize>]) -> Result<usize> {
        let mut seen = 0;
        for (b, batch) in batches.iter().enumerate() {
            for &i in batch {
                let label = source_labels[origin[i]];
                if self.relabel(label).is_none() {
                    return Err(Error::Protocol(format!(
                        "training batch {b} contains sample {} of non-training class {label}",
                        origin[i]
                    )));
                }
                seen += 1;
            }
        }
        Ok(seen)
    }
}
