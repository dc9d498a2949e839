//! Class-agnostic region-of-interest matching for document images.

pub mod geometry;
pub mod labelgen;
pub mod nn;
pub mod model;
pub mod loss;
pub mod data;
pub mod metrics;
pub mod postprocess;
pub mod trainer;
pub mod config;
pub mod cli;
pub mod inference;
