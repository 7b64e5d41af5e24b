//! Desk-scale contrastive learning for out-of-distribution intent detection.
//!
//! Everything runs on an in-crate f64 autodiff tape; there are no external
//! ML dependencies, so results are bit-reproducible given a seed.

pub mod augment;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod encoder;
pub mod head;
pub mod manifest;
pub mod metrics;
pub mod numcore;
pub mod scoring;
pub mod seeds;
pub mod trainer;
