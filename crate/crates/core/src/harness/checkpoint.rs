//! Versioned binary checkpoint.
//!
//! Layout (little-endian):
//!
//! ```text
//! b"SLCPLCKP"  u32 version  u64 header_len  header (JSON)
//! f32 data of every tensor listed in the header, in order
//! f32 momentum buffers, same order and shapes
//! u64 n  then n f64 per-batch total losses
//! ```
//!
//! The header carries the run config, the split, the epoch logs and the
//! tensor names and shapes. Every field is written deterministically, so
//! save -> load -> save reproduces the file byte for byte.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::SplitProtocol;
use crate::error::{Error, Result};
use crate::loss::LossReport;
use crate::model::{Encoder, Model, PrototypeSet};

use super::RunConfig;

const MAGIC: &[u8; 8] = b"SLCPLCKP";
pub const FORMAT_VERSION: u32 = 1;

/// Per-epoch training summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Batch means of each loss term.
    pub loss: LossReport,
    /// Closed-set accuracy on the known-class test images.
    pub val_accuracy: Option<f64>,
    /// slc of the prototypes at the end of the epoch.
    pub prototype_slc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub protocol: SplitProtocol,
    /// Number of completed epochs.
    pub epoch: usize,
    pub model: Model<f32>,
    pub velocity: Vec<Vec<f32>>,
    /// Total loss of every training batch, in order.
    pub trajectory: Vec<f64>,
    pub epochs: Vec<EpochLog>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: RunConfig,
    protocol: SplitProtocol,
    epoch: usize,
    tensors: Vec<(String, Vec<usize>)>,
    epochs: Vec<EpochLog>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| {
            Error::format(
                self.path,
                self.pos as u64,
                format!("truncated checkpoint while reading {what}"),
            )
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let b = self.take(n.checked_mul(4).unwrap_or(usize::MAX), what)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

impl Checkpoint {
    fn tensor_names(&self) -> Vec<String> {
        let mut names = self.model.encoder.param_names();
        names.push("prototypes".into());
        names
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let params = self.model.params();
        let header = Header {
            config: self.config.clone(),
            protocol: self.protocol.clone(),
            epoch: self.epoch,
            tensors: self
                .tensor_names()
                .into_iter()
                .zip(&params)
                .map(|(n, t)| (n, t.shape().to_vec()))
                .collect(),
            epochs: self.epochs.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header is serialisable");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in &params {
            t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        }
        for v in &self.velocity {
            v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        }
        out.extend_from_slice(&(self.trajectory.len() as u64).to_le_bytes());
        self.trajectory
            .iter()
            .for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(8, "magic")? != MAGIC {
            return Err(Error::format(path, 0, "not a checkpoint file"));
        }
        let version = u32::from_le_bytes(r.take(4, "version")?.try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Protocol(format!(
                "checkpoint format version {version}, this build reads {FORMAT_VERSION}"
            )));
        }
        let len = r.u64("header length")? as usize;
        let at = r.pos as u64;
        let header: Header = serde_json::from_slice(r.take(len, "header")?)
            .map_err(|e| Error::format(path, at, format!("bad header: {e}")))?;
        header.config.validate()?;

        let mut encoder = Encoder::<f32>::new(header.config.encoder.clone(), 0)?;
        let expected = encoder.params().len() + 1;
        if header.tensors.len() != expected {
            return Err(Error::Protocol(format!(
                "checkpoint holds {} tensors, the configured model has {expected}",
                header.tensors.len()
            )));
        }
        let mut tensors = Vec::with_capacity(expected);
        for (name, shape) in &header.tensors {
            let n = shape.iter().product();
            tensors.push(Tensor::new(shape.clone(), r.f32s(n, name)?)?.with_grad());
        }
        let points = tensors.pop().expect("prototypes present");
        encoder.load_params(tensors)?;
        let prototypes = PrototypeSet::from_points(points)?;
        if prototypes.num_classes() != header.protocol.n_known() {
            return Err(Error::Protocol(format!(
                "{} prototypes for {} known classes",
                prototypes.num_classes(),
                header.protocol.n_known()
            )));
        }
        let model = Model { encoder, prototypes };
        let velocity = model
            .params()
            .iter()
            .map(|p| r.f32s(p.len(), "momentum buffer"))
            .collect::<Result<Vec<_>>>()?;
        let n = r.u64("trajectory length")? as usize;
        let traj = r.take(n.checked_mul(8).unwrap_or(usize::MAX), "trajectory")?;
        let trajectory = traj
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if r.pos != bytes.len() {
            return Err(Error::format(path, r.pos as u64, "trailing bytes after checkpoint"));
        }
        Ok(Checkpoint {
            config: header.config,
            protocol: header.protocol,
            epoch: header.epoch,
            model,
            velocity,
            trajectory,
            epochs: header.epochs,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
