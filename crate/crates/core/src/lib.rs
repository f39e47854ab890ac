//! LiDAR-guided knowledge distillation for camera-only BEV 3D detection,
//! at a scale that trains on one CPU.

// `!(x > 0.0)` style checks are meant to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bev_masks;
pub mod distill;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod models;
pub mod pipeline;
pub mod synthworld;
pub mod tensor;

pub use error::{Error, Result};
