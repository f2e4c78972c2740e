//! Synthetic data: seeded projective distortions with exact ground truth
//! and a toy shape-scene dataset for desk-scale training and evaluation.

pub mod distort;
pub mod toy;

pub use distort::{apply_distortion, sample_transform, DistortionSpec};
pub use toy::{render_reference, splitmix64, ToyDataset, ToyDatasetSpec, ToyPair};

use thiserror::Error;

#[derive(Error, Debug)]
pub enum DataError {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("format error: {0}")]
    Format(String),
    #[error("warp error: {0}")]
    Warp(#[from] cad_reg::RegError),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;
