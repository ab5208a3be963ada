//! Unsupervised degradation-adaptation network (UDEAN) for 3D MRI
//! super-resolution, together with the data simulation, training,
//! inference, and evaluation pipeline needed to exercise it end to end
//! on synthetic phantom volumes.
//!
//! The crate is organised around the stages of the pipeline:
//!
//! - [`volume`] / [`manifest`]: volume ingestion, normalization,
//!   persistence (NIfTI-1 and raw-f32), dataset splits.
//! - [`kspace`], [`deform`], [`phantom`], [`patch`], [`resample`]:
//!   synthetic LR generation by K-space truncation, inter-scan
//!   misalignment simulation, phantom generation and patch sampling.
//! - [`tape`] / [`conv`]: a small reverse-mode autodiff engine over 5D
//!   arrays (batch, channel, x, y, z), generic over `f32`/`f64`.
//! - [`network`]: the six learnable components (downsampling extractor,
//!   LR encoder, LR/SR decoders, two discriminators).
//! - [`loss`]: the L1 / SSIM / least-squares adversarial losses and
//!   their weighted combinations.
//! - [`trainer`]: alternating adversarial training with ADAM and a
//!   cosine-decayed learning rate.
//! - [`stitch`], [`metrics`], [`features`]: patch-stitched volume
//!   reconstruction, PSNR/SSIM evaluation, feature dumps.
//! - [`config`] / [`experiment`]: declarative experiment configuration
//!   and the command implementations behind the CLI.

pub mod adam;
pub mod checkpoint;
pub mod config;
pub mod conv;
pub mod deform;
pub mod experiment;
pub mod features;
pub mod kspace;
pub mod loss;
pub mod manifest;
pub mod metrics;
pub mod network;
pub mod patch;
pub mod phantom;
pub mod report;
pub mod resample;
pub mod ssim;
pub mod stitch;
pub mod tape;
pub mod tensor;
pub mod trainer;
pub mod volume;

use std::path::PathBuf;

/// Errors surfaced by any stage of the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value at voxel ({0}, {1}, {2})")]
    NonFiniteVoxel(usize, usize, usize),
    #[error("non-finite loss component: {0}")]
    NonFiniteLoss(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("numeric error: {0}")]
    Numeric(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format { path: path.into(), reason: reason.into() }
    }

    /// Exit code the CLI maps this error to (2 config, 3 numeric, 1 other).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Manifest(_) | Error::Format { .. } => 2,
            Error::NonFiniteLoss(_) | Error::Numeric(_) | Error::NonFiniteVoxel(..) => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
