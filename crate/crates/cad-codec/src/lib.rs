//! Learned image compression for the CAD pipeline.
//!
//! A scale-hyperprior codec: a 4-stage stride-2 analysis transform produces
//! the main latent `y`, a 2-stage hyper transform produces `z`, and the
//! synthesis transform returns both the reconstruction and a feature tap
//! from its penultimate layer. Latents round-trip through a real
//! range-coded bitstream whose layout is fixed (see [`bitstream`]).

pub mod bitstream;
pub mod codec;
pub mod entropy;
pub mod net;
pub mod rangecoder;
pub mod types;

pub use codec::{compression_loss, Codec, CodecConfig, TrainForward};
pub use entropy::FrozenTables;
pub use types::{Bitstream, FeatureMap, LatentPair, QuantizeMode, RasterImage};

use thiserror::Error;

#[derive(Error, Debug)]
pub enum CodecError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("entropy model not initialized: {0}")]
    ModelNotInitialized(String),
    #[error("latent symbol out of range: {0}")]
    SymbolOutOfRange(String),
    #[error("corrupt bitstream: {0}")]
    CorruptStream(String),
    #[error("model mismatch: bitstream carries model {stored:#06x}, loaded model is {loaded:#06x}")]
    ModelMismatch { stored: u16, loaded: u16 },
}

pub type Result<T> = std::result::Result<T, CodecError>;
