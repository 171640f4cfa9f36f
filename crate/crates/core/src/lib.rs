//! Dual-teacher self-training for multi-phase volumetric segmentation.

pub mod error;
pub mod fusion;
pub mod metrics;
pub mod model;
pub mod phantom;
pub mod pipeline;
pub mod refine;
pub mod volume;

pub use error::{Error, Result};
