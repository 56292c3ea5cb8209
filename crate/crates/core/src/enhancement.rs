//! Extrapolation-by-interpolation: bilinear upsample by `β`, quantize the
//! enlarged map with the shared codebook, then average-pool back.
//!
//! Bilinear sampling uses half-pixel centres (`align_corners = false`):
//! destination index `t` reads source coordinate `(t + 0.5) / β − 0.5`,
//! clamped to `[0, size − 1]`. Pooling uses non-overlapping `β × β`
//! windows, which exactly partition the upsampled grid.

use rayon::prelude::*;

use crate::codebook::Codebook;
use crate::error::{LoocError, Result};
use crate::quantizers::{looc_dequantize, looc_quantize};
use crate::types::{CodeGrid, FeatureMap, QuantConfig};

/// Source sample positions `(lo, hi, frac)` along one axis.
fn axis_taps(size: usize, beta: usize) -> Vec<(usize, usize, f64)> {
    (0..size * beta)
        .map(|t| {
            let src = ((t as f64 + 0.5) / beta as f64 - 0.5).clamp(0.0, (size - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(size - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

pub fn bilinear_upsample(z: &FeatureMap, beta: usize) -> Result<FeatureMap> {
    if beta == 0 {
        return Err(LoocError::InvalidConfig("beta must be >= 1".into()));
    }
    if beta == 1 {
        return Ok(z.clone());
    }
    let (h, w, d) = z.shape();
    let rows = axis_taps(h, beta);
    let cols = axis_taps(w, beta);
    let out_w = w * beta;
    let mut data = vec![0.0f32; h * beta * out_w * d];
    data.par_chunks_mut(out_w * d)
        .zip(rows.par_iter())
        .for_each(|(out_row, &(r0, r1, ty))| {
            for (j, &(c0, c1, tx)) in cols.iter().enumerate() {
                let (p00, p01) = (z.location(r0, c0), z.location(r0, c1));
                let (p10, p11) = (z.location(r1, c0), z.location(r1, c1));
                let dst = &mut out_row[j * d..(j + 1) * d];
                for c in 0..d {
                    let top = p00[c] as f64 * (1.0 - tx) + p01[c] as f64 * tx;
                    let bottom = p10[c] as f64 * (1.0 - tx) + p11[c] as f64 * tx;
                    dst[c] = (top * (1.0 - ty) + bottom * ty) as f32;
                }
            }
        });
    FeatureMap::from_vec(h * beta, out_w, d, data)
}

/// Mean over non-overlapping `β × β` windows.
pub fn avg_pool(z: &FeatureMap, beta: usize) -> Result<FeatureMap> {
    if beta == 0 {
        return Err(LoocError::InvalidConfig("beta must be >= 1".into()));
    }
    let (h, w, d) = z.shape();
    if h % beta != 0 || w % beta != 0 {
        return Err(LoocError::IndivisibleShape { h, w, beta });
    }
    if beta == 1 {
        return Ok(z.clone());
    }
    let (oh, ow) = (h / beta, w / beta);
    let scale = 1.0 / (beta * beta) as f64;
    let mut data = vec![0.0f32; oh * ow * d];
    data.par_chunks_mut(ow * d)
        .enumerate()
        .for_each(|(i, out_row)| {
            let mut acc = vec![0.0f64; d];
            for j in 0..ow {
                acc.iter_mut().for_each(|a| *a = 0.0);
                for di in 0..beta {
                    for dj in 0..beta {
                        for (a, &v) in acc.iter_mut().zip(z.location(i * beta + di, j * beta + dj))
                        {
                            *a += v as f64;
                        }
                    }
                }
                for (dst, a) in out_row[j * d..(j + 1) * d].iter_mut().zip(&acc) {
                    *dst = (a * scale) as f32;
                }
            }
        });
    FeatureMap::from_vec(oh, ow, d, data)
}

/// Output of [`enhanced_quantize`].
#[derive(Debug, Clone, PartialEq)]
pub struct Enhanced {
    /// Reconstruction at the input's shape.
    pub smoothed: FeatureMap,
    /// Code assignment of the `β`-scaled map.
    pub grid: CodeGrid,
}

/// `avg_pool(dequantize(quantize(upsample(z, β))), β)`.
pub fn enhanced_quantize(z: &FeatureMap, cb: &Codebook, cfg: &QuantConfig) -> Result<Enhanced> {
    cfg.validate()?;
    let up = bilinear_upsample(z, cfg.beta)?;
    let grid = looc_quantize(&up, cb, cfg.m, cfg.metric)?;
    let extrapolated = looc_dequantize(&grid, cb)?;
    let smoothed = avg_pool(&extrapolated, cfg.beta)?;
    Ok(Enhanced { smoothed, grid })
}

/// Reconstruction from a stored `β`-scaled grid: dequantize then pool.
pub fn enhanced_dequantize(grid: &CodeGrid, cb: &Codebook, beta: usize) -> Result<FeatureMap> {
    avg_pool(&looc_dequantize(grid, cb)?, beta)
}
