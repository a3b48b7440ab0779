//! Multi-teacher contrastive knowledge distillation on synthetic paired data.

pub mod contrastive;
pub mod data;
pub mod distill;
pub mod encoder;
pub mod error;
pub mod numerics;
pub mod trainer;
pub mod weighting;

pub use error::{Error, Result};
