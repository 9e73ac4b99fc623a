//! Semi-supervised sound event detection with local and global consistency
//! regularization.

pub mod anchors;
pub mod cutmix;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod frontend;
pub mod kmeans;
pub mod losses;
pub mod matrix;
pub mod nn;
pub mod prototypes;
pub mod train;

pub use error::{Error, Result};
pub use matrix::Matrix;
