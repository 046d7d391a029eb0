//! Surgical instrument tip detection from part-level segmentation masks.

pub mod baseline;
pub mod dataset;
pub mod eval;
pub mod model;
pub mod overlay;
pub mod synth;
pub mod tensor;
pub mod train;
