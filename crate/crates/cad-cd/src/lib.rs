//! Order-invariant change detection.
//!
//! The detector never concatenates the two acquisitions along channels.
//! Per-stream work shares weights through batch stacking, cross-time mixing
//! happens only through a permutation-equivariant attention over the
//! length-2 sequence, and a symmetric gate fuses the streams at the end, so
//! the change map provably cannot depend on the input order.

pub mod baseline;
pub mod blocks;
pub mod detector;

pub use baseline::ConcatBaseline;
pub use blocks::{
    GlobalSelfAttention, MultiScaleAttention, MultiheadBlock, PairDownBlock, PairUpBlock,
    RefineBlock, SymmetricFusionGate, TemporalPairAttention,
};
pub use detector::{
    cd_loss, cd_loss_value, ChangeDetector, ChangeMap, DetectorConfig, InputSpace, SizeVariant,
};

use thiserror::Error;

#[derive(Error, Debug)]
pub enum CdError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid detector config: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, CdError>;
