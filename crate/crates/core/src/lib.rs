//! Unified full-reference / no-reference image quality model on a small
//! autodiff core: synthetic data, encoder, hierarchical and cross-stage
//! attention, training and evaluation.

pub mod attention;
pub mod datagen;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod image;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod train;
pub mod weights;

pub use error::{Error, Result};
pub use model::{Mode, ModePair, Model, ModelConfig};
pub use weights::WeightStore;
