//! Two-stage vector-quantized translation of 3D OCT volumes into OCTA
//! volumes.
//!
//! Stage 1 pretrains one reconstruction VQVAE per modality. Stage 2 trains a
//! translation VQVAE whose features are pulled toward the frozen stage-1
//! models by patchwise contrastive losses, plus a loss matching the patch
//! similarity structure of en-face projection maps.
//!
//! All compute is `f64` on the CPU. With the `parallel` feature (default)
//! independent outputs are computed on the rayon pool; results are
//! bit-identical either way.

pub mod alignment;
pub mod error;
pub mod grid;
pub mod metrics;
pub mod nets;
pub mod ops;
pub mod par;
pub mod trainer;
pub mod volume;
pub mod vq;

pub use error::{Error, Result};

/// Crate version, recorded in run snapshots.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
