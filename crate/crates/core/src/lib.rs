//! Learnable, context-aware pseudo-label selection for semi-supervised 3D
//! object detection, driven end to end by a synthetic teacher detector.

pub mod config;
pub mod error;
pub mod evalkit;
pub mod geom3d;
pub mod pipeline;
pub mod psm;
pub mod report;
pub mod rng;
pub mod simworld;
pub mod ssl;
pub mod tinynn;

pub use error::{Error, Result};
