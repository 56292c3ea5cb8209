//! Compositional vector quantization with a low-dimensional shared codebook.
//!
//! A feature vector of dimension `d` is cut into `m` contiguous segments of
//! dimension `d* = d / m`, and every segment is quantized against the same
//! `K`-entry codebook. With `m = 1` this is ordinary vector quantization;
//! giving each segment its own codebook instead yields product quantization.
//! The [`enhancement`] module adds the interpolate → quantize → pool
//! pipeline, [`trainer`] a small straight-through autoencoder, and [`cost`]
//! the storage accounting plus the on-disk codecs.

pub mod cli;
pub mod codebook;
pub mod cost;
pub mod data;
pub mod enhancement;
pub mod error;
pub mod metrics;
pub mod quantizers;
pub mod trainer;
pub mod types;

pub use codebook::{AnchorMode, Codebook, FitConfig, FitReport, ReactivationPolicy};
pub use error::{LoocError, Result};
pub use types::{split_vector, CodeGrid, FeatureMap, Metric, QuantConfig};
