//! Uncertainty-gated deformable hybrid CNN-Transformer segmentation.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`], [`params`], [`tape`], [`ops`]: flat-buffer `f64` tensors and a
//!   Wengert-tape reverse-mode autodiff engine with hand-derived backward
//!   kernels for every operation the network needs.
//! - [`gradcheck`]: central finite-difference validation of analytic gradients.
//! - [`deform`]: bilinear sampling, deformable convolution, local
//!   (neighborhood) attention and deformable attention.
//! - [`ugem`]: entropy-gated bidirectional feature enhancement between the
//!   CNN and Transformer branches.
//! - [`blocks`], [`network`], [`checkpoint`]: the encoder-decoder assembly and
//!   its serialized form.
//! - [`losses`], [`metrics`]: boundary-aware training objectives and the
//!   evaluation suite (DSC, HD, ASD, ASSD, sensitivity, precision).
//! - [`data`], [`trainer`]: PNG dataset ingestion, deterministic splitting,
//!   synthetic blob generation, and the SGD training loop.

pub mod blocks;
pub mod checkpoint;
pub mod data;
pub mod deform;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod ops;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod trainer;
pub mod ugem;

use thiserror::Error;

/// Crate-wide error type. Variants mirror the failure classes surfaced to
/// callers: bad configuration, bad runtime input, bad call ordering, and I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// Structural problem in a configuration or shape contract.
    #[error("configuration error: {0}")]
    Config(String),
    /// Invalid runtime data (non-finite values, mismatched operands).
    #[error("input error: {0}")]
    Input(String),
    /// API misuse such as backward before forward.
    #[error("state error: {0}")]
    State(String),
    /// Checkpoint could not be read or does not match the network.
    #[error("load error: {0}")]
    Load(String),
    /// Dataset files missing, unpaired, or in an unsupported format.
    #[error("data error: {0}")]
    Data(String),
    /// Non-finite loss or gradient during training.
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }
}
