//! Point-supervised image segmentation.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod grid;
pub mod invariance;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
pub use grid::{Grid, Image, LogitField, SoftPrediction};
