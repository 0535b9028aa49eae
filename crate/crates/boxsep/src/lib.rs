//! Unsupervised audio-visual sound source separation.
//!
//! The crate implements a mix-and-separate training pipeline in which a
//! separation network is conditioned on visual features pooled from a
//! bounding box that the model itself learns to select from a pool of
//! category-agnostic region proposals.

pub mod audio;
pub mod dataset;
pub mod img;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod proposals;
pub mod rng;
pub mod selector;
pub mod separator;
pub mod tensor;
