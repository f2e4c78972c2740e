//! Lightweight coarse-to-fine homography registration.

pub mod cascade;
pub mod homography;
pub mod regressor;
pub mod warp;

pub use cascade::{pixel_tap, registration_loss, CascadeOutput, CascadeRegistrar, PyramidLevel};
pub use homography::Homography;
pub use regressor::{HomographyRegressor, LevelConfig, LevelScale, RegressorConfig};
pub use warp::{masked_mse, rescale_node, warp_array, warp_const, warp_node};

use thiserror::Error;

#[derive(Error, Debug)]
pub enum RegError {
    #[error("singular homography: {0}")]
    SingularHomography(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid regressor config: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, RegError>;
