//! Online handwritten signature verification engine.
//!
//! The pipeline: raw pen captures are normalized and expanded into dynamic
//! writing features; two adjacency graphs (within-stroke steps, spatial
//! nearest neighbors) structure an attention network whose blocks fuse
//! graph-attended spatial features with recurrent temporal features;
//! alignment distance between embedded sequences drives a dual-constraint
//! triplet objective for training and a threshold decision for verification.
//! Evaluation sweeps the standard protocol matrix (1vs1/4vs1, skilled/random
//! forgeries, global/local thresholds) and reports equal error rates.
//!
//! Everything is deterministic given the seed: data generation, parameter
//! initialization, triplet sampling, training, and evaluation.

pub mod alignment;
pub mod config;
pub mod autodiff;
pub mod datagen;
pub mod error;
pub mod evaluator;
pub mod graph;
pub mod model;
pub mod objective;
pub mod pipeline;
pub mod reference;
pub mod rng;
pub mod signal;
pub mod trainer;

pub use error::{Error, Result};
