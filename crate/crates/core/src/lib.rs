//! Prototype-based open-set recognition.
//!
//! Small convolutional encoders map images to embeddings; each known class
//! owns one learnable prototype, samples are classified by their nearest
//! prototype, and anything too far from every prototype is rejected as
//! unknown. Three nested training losses are provided:
//!
//! * **PL**: cross-entropy over negative embedding-to-prototype distances,
//! * **GCPL**: PL plus `lambda` times the squared distance to the own prototype,
//! * **SLCPL**: GCPL plus the variance of the prototypes' distances to their
//!   centroid, which pushes the prototypes onto a common sphere and leaves the
//!   centre of the feature space (where unfamiliar inputs land) empty.
//!
//! The crate contains its own gradient engine ([`autodiff`]), the model and
//! losses, SGD with momentum, evaluation metrics, dataset readers and the
//! experiment harness behind the `slcpl` command-line tool.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod harness;
pub mod loss;
pub mod model;
pub mod optim;
pub mod rng;

pub use error::{Error, Result};
