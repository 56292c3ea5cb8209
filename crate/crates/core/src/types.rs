//! Shared numeric containers.
//!
//! All containers store 32-bit floats in row-major `(row, col, channel)`
//! order. The same layout is used on the wire.

use serde::{Deserialize, Serialize};

use crate::error::{LoocError, Result};

/// Dense `h × w × d` latent grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    h: usize,
    w: usize,
    d: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(h: usize, w: usize, d: usize, data: &[f32]) -> Result<Self> {
        Self::from_vec(h, w, d, data.to_vec())
    }

    /// Takes ownership of `data` instead of copying it.
    pub fn from_vec(h: usize, w: usize, d: usize, data: Vec<f32>) -> Result<Self> {
        if h == 0 || w == 0 || d == 0 {
            return Err(LoocError::InvalidConfig(format!(
                "feature map dimensions must be positive, got {h}x{w}x{d}"
            )));
        }
        let expected = h * w * d;
        if data.len() != expected {
            return Err(LoocError::LengthMismatch {
                expected,
                actual: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(LoocError::NonFiniteInput);
        }
        Ok(Self { h, w, d, data })
    }

    pub fn zeros(h: usize, w: usize, d: usize) -> Self {
        assert!(
            h > 0 && w > 0 && d > 0,
            "feature map dimensions must be positive"
        );
        Self {
            h,
            w,
            d,
            data: vec![0.0; h * w * d],
        }
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.d)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    /// Flat offset of `(row, col, channel)`.
    #[inline]
    pub fn offset(&self, row: usize, col: usize, channel: usize) -> usize {
        debug_assert!(row < self.h && col < self.w && channel < self.d);
        (row * self.w + col) * self.d + channel
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, channel: usize) -> f32 {
        self.data[self.offset(row, col, channel)]
    }

    /// The `d`-dimensional feature vector at `(row, col)`.
    #[inline]
    pub fn location(&self, row: usize, col: usize) -> &[f32] {
        let start = (row * self.w + col) * self.d;
        &self.data[start..start + self.d]
    }

    /// Iterator over all feature vectors in row-major order.
    pub fn vectors(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.d)
    }
}

/// Similarity used for nearest-codevector search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Metric {
    #[default]
    L2,
    Cosine,
}

impl Metric {
    pub fn code(self) -> u8 {
        match self {
            Metric::L2 => 0,
            Metric::Cosine => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Metric::L2),
            1 => Some(Metric::Cosine),
            _ => None,
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = LoocError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l2" => Ok(Metric::L2),
            "cosine" | "cos" => Ok(Metric::Cosine),
            other => Err(LoocError::InvalidConfig(format!(
                "unknown metric {other:?}"
            ))),
        }
    }
}

pub const MAX_BETA: usize = 8;

/// Quantizer configuration shared by the LooC pipeline and the trainer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantConfig {
    /// Segments per feature vector.
    pub m: usize,
    /// Integer interpolation scale factor.
    pub beta: usize,
    pub metric: Metric,
    /// Commitment weight.
    pub mu: f64,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            m: 1,
            beta: 1,
            metric: Metric::L2,
            mu: 0.25,
        }
    }
}

impl QuantConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(LoocError::InvalidConfig("m must be positive".into()));
        }
        if !(1..=MAX_BETA).contains(&self.beta) {
            return Err(LoocError::InvalidConfig(format!(
                "beta must lie in [1, {MAX_BETA}], got {}",
                self.beta
            )));
        }
        if self.beta > 4 {
            log::warn!("beta={} is above the evaluated range 1..=4", self.beta);
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(LoocError::InvalidConfig(format!(
                "mu must be finite and >= 0, got {}",
                self.mu
            )));
        }
        Ok(())
    }

    /// Codevector dimension for features of dimension `d`.
    pub fn segment_dim(&self, d: usize) -> Result<usize> {
        segment_dim(d, self.m)
    }
}

pub(crate) fn segment_dim(d: usize, m: usize) -> Result<usize> {
    if m == 0 || !d.is_multiple_of(m) {
        return Err(LoocError::IndivisibleDimension { dim: d, m });
    }
    Ok(d / m)
}

/// `h × w × m` grid of codebook indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeGrid {
    h: usize,
    w: usize,
    m: usize,
    k: usize,
    indices: Vec<u32>,
}

impl CodeGrid {
    pub fn new(h: usize, w: usize, m: usize, k: usize, indices: Vec<u32>) -> Result<Self> {
        if h == 0 || w == 0 || m == 0 || k == 0 {
            return Err(LoocError::InvalidConfig(format!(
                "code grid dimensions must be positive, got {h}x{w}x{m} with K={k}"
            )));
        }
        let expected = h * w * m;
        if indices.len() != expected {
            return Err(LoocError::LengthMismatch {
                expected,
                actual: indices.len(),
            });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i as usize >= k) {
            return Err(LoocError::IndexOutOfRange {
                index: bad as usize,
                k,
            });
        }
        Ok(Self {
            h,
            w,
            m,
            k,
            indices,
        })
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Size of the codebook the indices refer to.
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    /// The `m` indices at `(row, col)`.
    pub fn location(&self, row: usize, col: usize) -> &[u32] {
        let start = (row * self.w + col) * self.m;
        &self.indices[start..start + self.m]
    }
}

/// Splits `v` into `m` contiguous segments of length `len / m`.
pub fn split_vector(v: &[f32], m: usize) -> Result<Vec<&[f32]>> {
    let seg = segment_dim(v.len(), m)?;
    if seg == 0 {
        return Err(LoocError::IndivisibleDimension { dim: v.len(), m });
    }
    Ok(v.chunks_exact(seg).collect())
}
