//! Native binary readers: IDX (MNIST family) and CIFAR binary batches.

use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

use super::ImageDataset;

const IDX_IMAGES: u32 = 0x0803;
const IDX_LABELS: u32 = 0x0801;
const CIFAR_PIXELS: usize = 3 * 32 * 32;

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(
                self.path,
                self.bytes.len() as u64,
                format!("truncated: {what} needs {n} bytes at offset {}", self.pos),
            )),
        }
    }
}

fn check_magic(c: &mut Cursor, expected: u32) -> Result<()> {
    let magic = c.u32("magic number")?;
    if magic != expected {
        return Err(Error::format(
            c.path,
            0,
            format!("magic 0x{magic:08x}, expected 0x{expected:08x}"),
        ));
    }
    Ok(())
}

/// IDX3 image file bytes to `[M, 1, rows, cols]` pixels in `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    let mut c = Cursor { bytes, pos: 0, path };
    check_magic(&mut c, IDX_IMAGES)?;
    let m = c.u32("image count")? as usize;
    let rows = c.u32("row count")? as usize;
    let cols = c.u32("column count")? as usize;
    let pixels = c.take(m * rows * cols, "pixel data")?;
    if c.pos != bytes.len() {
        return Err(Error::format(path, c.pos as u64, "trailing bytes after pixel data"));
    }
    let data = pixels.iter().map(|&b| f32::from(b) / 255.0).collect();
    Tensor::new([m, 1, rows, cols], data)
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    let mut c = Cursor { bytes, pos: 0, path };
    check_magic(&mut c, IDX_LABELS)?;
    let m = c.u32("label count")? as usize;
    let labels = c.take(m, "label data")?;
    if c.pos != bytes.len() {
        return Err(Error::format(path, c.pos as u64, "trailing bytes after label data"));
    }
    Ok(labels.iter().map(|&b| b as usize).collect())
}

/// Reads an IDX image/label file pair (MNIST layout, 10 classes).
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<ImageDataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let images = parse_idx_images(&read(ip)?, ip)?;
    let labels = parse_idx_labels(&read(lp)?, lp)?;
    if labels.len() != images.shape()[0] {
        return Err(Error::format(
            lp,
            4,
            format!(
                "{} labels for {} images in {}",
                labels.len(),
                images.shape()[0],
                ip.display()
            ),
        ));
    }
    if let Some(pos) = labels.iter().position(|&l| l >= 10) {
        return Err(Error::format(
            lp,
            8 + pos as u64,
            format!("label {} outside 0..10", labels[pos]),
        ));
    }
    let name = ip
        .parent()
        .and_then(|p| p.file_name())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".into());
    ImageDataset::new(name, images, Some(labels), 10)
}

/// Pixels back to IDX3 bytes (rounded to the nearest byte).
pub fn encode_idx_images(images: &Tensor<f32>) -> Result<Vec<u8>> {
    let s = images.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(Error::dim(format!("IDX images must be M×1×H×W, got {s:?}")));
    }
    let mut out = Vec::with_capacity(16 + images.len());
    for v in [IDX_IMAGES, s[0] as u32, s[2] as u32, s[3] as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend(
        images
            .data()
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    Ok(out)
}

pub fn encode_idx_labels(labels: &[usize]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend(labels.iter().map(|&l| l as u8));
    out
}

/// Concatenates CIFAR binary batch files. Each record is `label_bytes`
/// label bytes followed by 3072 channel-major pixels; with two label bytes
/// (CIFAR-100) the second, fine label is used.
pub fn load_cifar_binary<P: AsRef<Path>>(paths: &[P], label_bytes: usize) -> Result<ImageDataset> {
    let num_classes = match label_bytes {
        1 => 10,
        2 => 100,
        n => return Err(Error::usage(format!("CIFAR records have 1 or 2 label bytes, not {n}"))),
    };
    if paths.is_empty() {
        return Err(Error::usage("no CIFAR files given"));
    }
    let record = label_bytes + CIFAR_PIXELS;
    let (mut data, mut labels) = (Vec::new(), Vec::new());
    for p in paths {
        let p = p.as_ref();
        let bytes = read(p)?;
        if bytes.is_empty() || bytes.len() % record != 0 {
            let whole = bytes.len() / record * record;
            return Err(Error::format(
                p,
                whole as u64,
                format!(
                    "file size {} is not a multiple of the {record}-byte record",
                    bytes.len()
                ),
            ));
        }
        for (r, rec) in bytes.chunks_exact(record).enumerate() {
            let label = rec[label_bytes - 1] as usize;
            if label >= num_classes {
                return Err(Error::format(
                    p,
                    (r * record + label_bytes - 1) as u64,
                    format!("label {label} outside 0..{num_classes}"),
                ));
            }
            labels.push(label);
            data.extend(rec[label_bytes..].iter().map(|&b| f32::from(b) / 255.0));
        }
    }
    let m = labels.len();
    let name = if num_classes == 10 { "cifar10" } else { "cifar100" };
    ImageDataset::new(name, Tensor::new([m, 3, 32, 32], data)?, Some(labels), num_classes)
}
