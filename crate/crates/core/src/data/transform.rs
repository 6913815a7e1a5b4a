//! Channel conversion and resizing so a dataset can be fed to an encoder
//! trained on a different image format.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

use super::ImageDataset;

/// Grayscale is replicated to three channels; colour becomes its channel mean.
pub fn convert_channels(images: &Tensor<f32>, channels: usize) -> Result<Tensor<f32>> {
    let s = images.shape();
    let (m, c, plane) = (s[0], s[1], s[2] * s[3]);
    if c == channels {
        return Ok(images.clone());
    }
    let src = images.data();
    let data: Vec<f32> = match (c, channels) {
        (1, 3) => (0..m)
            .flat_map(|i| {
                let img = &src[i * plane..(i + 1) * plane];
                img.iter().chain(img).chain(img).copied()
            })
            .collect(),
        (3, 1) => (0..m)
            .flat_map(|i| {
                let img = &src[i * 3 * plane..(i + 1) * 3 * plane];
                (0..plane).map(move |p| (img[p] + img[plane + p] + img[2 * plane + p]) / 3.0)
            })
            .collect(),
        _ => return Err(Error::dim(format!("no conversion from {c} to {channels} channels"))),
    };
    Tensor::new([m, channels, s[2], s[3]], data)
}

/// Bilinear resampling with pixel-centre alignment and edge clamping.
pub fn bilinear_resize(images: &Tensor<f32>, height: usize, width: usize) -> Result<Tensor<f32>> {
    let s = images.shape();
    let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
    if height == 0 || width == 0 || h == 0 || w == 0 {
        return Err(Error::dim("bilinear_resize with an empty plane"));
    }
    if (h, w) == (height, width) {
        return Ok(images.clone());
    }
    // Source coordinate and blend weight for every output row/column.
    let axis = |src: usize, dst: usize| -> Vec<(usize, usize, f32)> {
        let scale = src as f32 / dst as f32;
        (0..dst)
            .map(|o| {
                let x = ((o as f32 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f32);
                let lo = x.floor() as usize;
                let hi = (lo + 1).min(src - 1);
                (lo, hi, x - lo as f32)
            })
            .collect()
    };
    let (ys, xs) = (axis(h, height), axis(w, width));
    let src = images.data();
    let mut out = Vec::with_capacity(planes * height * width);
    for p in 0..planes {
        let img = &src[p * h * w..(p + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = img[y0 * w + x0] * (1.0 - fx) + img[y0 * w + x1] * fx;
                let bottom = img[y1 * w + x0] * (1.0 - fx) + img[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Tensor::new([s[0], s[1], height, width], out)
}

/// Converts channels, then resizes, to match `shape = [C, H, W]`.
pub fn adapt_to(ds: &ImageDataset, shape: [usize; 3]) -> Result<ImageDataset> {
    if ds.image_shape() == shape {
        return Ok(ds.clone());
    }
    let converted = convert_channels(&ds.images, shape[0])?;
    let images = bilinear_resize(&converted, shape[1], shape[2])?;
    ImageDataset::new(ds.name.clone(), images, ds.labels.clone(), ds.num_classes)
}
