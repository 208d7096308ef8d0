//! Patch-embedding density estimation for unsupervised image anomaly
//! localization.
//!
//! A small convolutional encoder maps 64x64 image patches to compact
//! embeddings. During training a density-estimation head fits a Gaussian
//! mixture over those embeddings while a location-prediction head classifies
//! the relative position of neighboring patches, which keeps the embedding
//! space spatially informative. At test time a patch is scored by its
//! distance to the nearest training embedding, scores are aggregated into a
//! pixel-level anomaly map, and the map maximum scores the whole image.

pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod density;
pub mod error;
pub mod eval;
pub mod lp;
pub mod nn;
pub mod numerics;
pub mod pe;
pub mod scoring;
pub mod train;

pub use error::{Error, Result};
