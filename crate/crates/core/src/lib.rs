//! Two-stage multiscale hybrid vision transformer for five-class slide diagnosis.

pub mod config;
pub mod error;
pub mod geometry;
pub mod ingest;
pub mod params;
pub mod pipeline;
pub mod render;
pub mod roi;
pub mod slide;
pub mod synth;
pub mod tileset;
pub mod train;

pub use error::{CoreError, Result};
pub use mshvit_metrics::{CLASS_NAMES, NUM_CLASSES};
