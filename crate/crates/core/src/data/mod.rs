//! Image datasets, synthetic outlier sets and known/unknown split protocols.
//!
//! Pixels are stored as `f32` in `[0, 1]`, laid out `M×C×H×W`.

mod formats;
mod split;
mod transform;

pub use formats::{
    encode_idx_images, encode_idx_labels, load_cifar_binary, load_idx, parse_idx_images, parse_idx_labels,
};
pub use split::{make_split, SplitProtocol, SplitStyle};
pub use transform::{adapt_to, bilinear_resize, convert_channels};

use rand::Rng;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct ImageDataset {
    pub name: String,
    pub images: Tensor<f32>,
    /// Class index per image; `None` for pure outlier sets.
    pub labels: Option<Vec<usize>>,
    pub num_classes: usize,
}

impl ImageDataset {
    pub fn new(
        name: impl Into<String>,
        images: Tensor<f32>,
        labels: Option<Vec<usize>>,
        num_classes: usize,
    ) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(Error::dim(format!("images must be M×C×H×W, got {:?}", images.shape())));
        }
        if let Some(l) = &labels {
            if l.len() != images.shape()[0] {
                return Err(Error::dim(format!(
                    "{} labels for {} images",
                    l.len(),
                    images.shape()[0]
                )));
            }
            if let Some(bad) = l.iter().find(|&&c| c >= num_classes) {
                return Err(Error::usage(format!("label {bad} outside 0..{num_classes}")));
            }
        }
        Ok(ImageDataset {
            name: name.into(),
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `[C, H, W]` of a single image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn labels(&self) -> Result<&[usize]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::usage(format!("dataset '{}' has no labels", self.name)))
    }

    /// Images `idx` (in that order) with their labels.
    pub fn select(&self, idx: &[usize]) -> Result<ImageDataset> {
        Ok(ImageDataset {
            name: self.name.clone(),
            images: self.images.gather_rows(idx)?,
            labels: self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
            num_classes: self.num_classes,
        })
    }

    /// Indices of all images whose label is in `classes`, in dataset order.
    pub fn indices_of(&self, classes: &[usize]) -> Result<Vec<usize>> {
        let labels = self.labels()?;
        Ok((0..labels.len()).filter(|&i| classes.contains(&labels[i])).collect())
    }

    /// The first `n` images (all if fewer).
    pub fn take(&self, n: usize) -> Result<ImageDataset> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }

    /// Stacks datasets of one image shape. Labels survive only if every part
    /// has them and all parts share a class count.
    pub fn concat(name: impl Into<String>, parts: &[&ImageDataset]) -> Result<ImageDataset> {
        let first = parts.first().ok_or_else(|| Error::usage("concat of no datasets"))?;
        let shape = first.image_shape();
        if let Some(p) = parts.iter().find(|p| p.image_shape() != shape) {
            return Err(Error::dim(format!(
                "cannot stack {:?} images onto {shape:?}",
                p.image_shape()
            )));
        }
        let m: usize = parts.iter().map(|p| p.len()).sum();
        let mut data = Vec::with_capacity(m * shape.iter().product::<usize>());
        parts.iter().for_each(|p| data.extend_from_slice(p.images.data()));
        let keep = parts
            .iter()
            .all(|p| p.labels.is_some() && p.num_classes == first.num_classes);
        let labels = keep.then(|| {
            parts
                .iter()
                .flat_map(|p| p.labels.clone().unwrap_or_default())
                .collect()
        });
        let num_classes = if keep { first.num_classes } else { 0 };
        ImageDataset::new(
            name,
            Tensor::new([m, shape[0], shape[1], shape[2]], data)?,
            labels,
            num_classes,
        )
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }
}

/// `m` images of i.i.d. uniform `[0, 1]` pixels.
pub fn make_noise(m: usize, shape: [usize; 3], seed: u64) -> Result<ImageDataset> {
    if m == 0 {
        return Err(Error::usage("noise set needs at least one image"));
    }
    let mut rng = stream_rng(seed, Stream::Noise, 0);
    let n = m * shape.iter().product::<usize>();
    let data: Vec<f32> = (0..n).map(|_| rng.random::<f32>()).collect();
    let images = Tensor::new([m, shape[0], shape[1], shape[2]], data)?;
    ImageDataset::new("noise", images, None, 0)
}

/// `clamp(image + u, 0, 1)` with `u ~ U[0, 1]` drawn per pixel.
pub fn make_mnist_noise(test: &ImageDataset, seed: u64) -> Result<ImageDataset> {
    if test.image_shape() != [1, 28, 28] {
        return Err(Error::dim(format!(
            "expected 1×28×28 images, got {:?}",
            test.image_shape()
        )));
    }
    let mut rng = stream_rng(seed, Stream::Noise, 1);
    let data: Vec<f32> = test
        .images
        .data()
        .iter()
        .map(|&v| (v + rng.random::<f32>()).clamp(0.0, 1.0))
        .collect();
    let images = Tensor::new(test.images.shape().to_vec(), data)?;
    ImageDataset::new(format!("{}-noise", test.name), images, None, 0)
}

/// Mini-batch index lists for one epoch: a seeded permutation cut into
/// chunks of `batch_size` (the last may be short).
pub fn epoch_batches(n: usize, batch_size: usize, shuffle_seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    use rand::seq::SliceRandom;
    if batch_size == 0 {
        return Err(Error::usage("batch size must be positive"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(shuffle_seed, Stream::Shuffle, epoch as u64));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}
