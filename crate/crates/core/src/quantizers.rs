//! Vanilla VQ, product quantization and LooC compositional quantization.
//!
//! All three map a [`FeatureMap`] to a [`CodeGrid`] of the same layout.
//! They differ only in which codebook serves each segment: VQ has one
//! segment, PQ uses a distinct sub-codebook per segment, LooC uses one
//! shared codebook for every segment.

use num_bigint::BigUint;
use rayon::prelude::*;

use crate::codebook::Codebook;
use crate::error::{LoocError, Result};
use crate::types::{segment_dim, CodeGrid, FeatureMap, Metric};

/// `m` independent sub-codebooks of a common dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct PqCodebookSet {
    sub: Vec<Codebook>,
}

impl PqCodebookSet {
    pub fn new(sub: Vec<Codebook>) -> Result<Self> {
        let first = sub
            .first()
            .ok_or_else(|| LoocError::InvalidConfig("PQ needs at least one sub-codebook".into()))?;
        let dim = first.dim();
        for cb in &sub {
            if cb.dim() != dim {
                return Err(LoocError::DimensionMismatch {
                    expected: dim,
                    actual: cb.dim(),
                });
            }
        }
        Ok(Self { sub })
    }

    pub fn m(&self) -> usize {
        self.sub.len()
    }

    pub fn dim(&self) -> usize {
        self.sub[0].dim()
    }

    pub fn sub_codebooks(&self) -> &[Codebook] {
        &self.sub
    }

    /// Largest sub-codebook size; the grid's `K`.
    pub fn max_k(&self) -> usize {
        self.sub.iter().map(Codebook::k).max().unwrap_or(0)
    }
}

/// Quantizes every segment with `pick(q)`'s codebook. Rows run in
/// parallel; the result does not depend on scheduling.
fn quantize_segments<'a>(
    z: &FeatureMap,
    m: usize,
    k: usize,
    metric: Metric,
    pick: impl Fn(usize) -> &'a Codebook + Sync,
    mults: Option<&mut u64>,
) -> Result<CodeGrid> {
    let seg = segment_dim(z.d(), m)?;
    let row_len = z.w() * m;
    let rows: Vec<Result<(Vec<u32>, u64)>> = (0..z.h())
        .into_par_iter()
        .map(|i| {
            let mut out = Vec::with_capacity(row_len);
            let mut count = 0u64;
            for j in 0..z.w() {
                for (q, part) in z.location(i, j).chunks_exact(seg).enumerate() {
                    let (idx, _) = pick(q).nearest_counted(part, metric, &mut count)?;
                    out.push(idx as u32);
                }
            }
            Ok((out, count))
        })
        .collect();
    let mut indices = Vec::with_capacity(z.h() * row_len);
    let mut total = 0u64;
    for r in rows {
        let (row, count) = r?;
        indices.extend(row);
        total += count;
    }
    if let Some(m) = mults {
        *m += total;
    }
    CodeGrid::new(z.h(), z.w(), m, k, indices)
}

/// Replaces each feature vector by its nearest codevector index.
pub fn vq_quantize(z: &FeatureMap, cb: &Codebook, metric: Metric) -> Result<CodeGrid> {
    if cb.dim() != z.d() {
        return Err(LoocError::DimensionMismatch {
            expected: z.d(),
            actual: cb.dim(),
        });
    }
    quantize_segments(z, 1, cb.k(), metric, |_| cb, None)
}

/// Splits each feature vector into `m` contiguous segments and quantizes all
/// of them against the same shared codebook.
pub fn looc_quantize(z: &FeatureMap, cb: &Codebook, m: usize, metric: Metric) -> Result<CodeGrid> {
    looc_quantize_counted(z, cb, m, metric, &mut 0)
}

/// [`looc_quantize`] that adds the number of similarity multiplications
/// performed to `mults`.
pub fn looc_quantize_counted(
    z: &FeatureMap,
    cb: &Codebook,
    m: usize,
    metric: Metric,
    mults: &mut u64,
) -> Result<CodeGrid> {
    let seg = segment_dim(z.d(), m)?;
    if cb.dim() != seg {
        return Err(LoocError::DimensionMismatch {
            expected: seg,
            actual: cb.dim(),
        });
    }
    quantize_segments(z, m, cb.k(), metric, |_| cb, Some(mults))
}

/// Concatenates the `m` selected codevectors at every location.
pub fn looc_dequantize(grid: &CodeGrid, cb: &Codebook) -> Result<FeatureMap> {
    dequantize_segments(grid, cb.dim(), |_| cb)
}

fn dequantize_segments<'a>(
    grid: &CodeGrid,
    seg: usize,
    pick: impl Fn(usize) -> &'a Codebook,
) -> Result<FeatureMap> {
    let m = grid.m();
    let mut data = Vec::with_capacity(grid.h() * grid.w() * m * seg);
    for loc in grid.indices().chunks_exact(m) {
        for (q, &idx) in loc.iter().enumerate() {
            let cb = pick(q);
            let idx = idx as usize;
            if idx >= cb.k() {
                return Err(LoocError::IndexOutOfRange {
                    index: idx,
                    k: cb.k(),
                });
            }
            data.extend_from_slice(cb.vector(idx));
        }
    }
    FeatureMap::from_vec(grid.h(), grid.w(), m * seg, data)
}

/// Quantizes segment `q` against sub-codebook `q` only.
pub fn pq_quantize(z: &FeatureMap, cbs: &PqCodebookSet, metric: Metric) -> Result<CodeGrid> {
    pq_quantize_counted(z, cbs, metric, &mut 0)
}

pub fn pq_quantize_counted(
    z: &FeatureMap,
    cbs: &PqCodebookSet,
    metric: Metric,
    mults: &mut u64,
) -> Result<CodeGrid> {
    let m = cbs.m();
    let seg = segment_dim(z.d(), m)?;
    if cbs.dim() != seg {
        return Err(LoocError::DimensionMismatch {
            expected: seg,
            actual: cbs.dim(),
        });
    }
    quantize_segments(z, m, cbs.max_k(), metric, |q| &cbs.sub[q], Some(mults))
}

pub fn pq_dequantize(grid: &CodeGrid, cbs: &PqCodebookSet) -> Result<FeatureMap> {
    if grid.m() != cbs.m() {
        return Err(LoocError::DimensionMismatch {
            expected: cbs.m(),
            actual: grid.m(),
        });
    }
    dequantize_segments(grid, cbs.dim(), |q| &cbs.sub[q])
}

/// Number of distinct vectors `m` slots over a `K`-entry shared codebook
/// can represent: `K^m`.
pub fn effective_capacity(k: u64, m: u32) -> BigUint {
    BigUint::from(k).pow(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(h: usize, w: usize, d: usize, data: &[f32]) -> FeatureMap {
        FeatureMap::new(h, w, d, data).unwrap()
    }

    #[test]
    fn vq_examples() {
        let cb = Codebook::from_rows(&[[0.0f32, 0.0], [1.0, 0.0], [0.0, 1.0], [5.0, 5.0]]).unwrap();
        let g = vq_quantize(&map(1, 1, 2, &[5.0, 5.0]), &cb, Metric::L2).unwrap();
        assert_eq!(g.indices(), &[3]);
        assert_eq!(g.m(), 1);

        let cb = Codebook::from_rows(&[[0.0f32], [1.0]]).unwrap();
        let z = map(2, 2, 1, &[0.1, 0.9, 0.4, 0.6]);
        assert_eq!(
            vq_quantize(&z, &cb, Metric::L2).unwrap().indices(),
            &[0, 1, 0, 1]
        );

        assert!(matches!(
            vq_quantize(&map(1, 1, 2, &[0.0, 0.0]), &cb, Metric::L2),
            Err(LoocError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn looc_examples() {
        let cb = Codebook::from_rows(&[[0.0f32, 0.0], [1.0, 1.0]]).unwrap();
        let z = map(1, 1, 4, &[0.1, 0.1, 0.9, 0.9]);
        assert_eq!(
            looc_quantize(&z, &cb, 2, Metric::L2).unwrap().indices(),
            &[0, 1]
        );

        let cb = Codebook::from_rows(&[[0.0f32], [5.0]]).unwrap();
        let z = map(1, 1, 2, &[4.9, 0.2]);
        assert_eq!(
            looc_quantize(&z, &cb, 2, Metric::L2).unwrap().indices(),
            &[1, 0]
        );

        assert!(matches!(
            looc_quantize(&map(1, 1, 3, &[0.0; 3]), &cb, 2, Metric::L2),
            Err(LoocError::IndivisibleDimension { dim: 3, m: 2 })
        ));
        assert!(matches!(
            looc_quantize(&map(1, 1, 4, &[0.0; 4]), &cb, 2, Metric::L2),
            Err(LoocError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn looc_dequantize_concatenates() {
        let cb = Codebook::from_rows(&[[0.0f32, 0.0], [1.0, 1.0]]).unwrap();
        let grid = CodeGrid::new(1, 1, 2, 2, vec![0, 1]).unwrap();
        assert_eq!(
            looc_dequantize(&grid, &cb).unwrap().data(),
            &[0.0, 0.0, 1.0, 1.0]
        );

        let small = Codebook::from_rows(&[[0.0f32, 0.0]]).unwrap();
        assert!(matches!(
            looc_dequantize(&grid, &small),
            Err(LoocError::IndexOutOfRange { index: 1, k: 1 })
        ));
    }

    #[test]
    fn representable_input_is_lossless() {
        let cb = Codebook::from_rows(&[[0.5f32, -1.0], [2.0, 3.0], [7.0, 7.0]]).unwrap();
        let z = map(2, 1, 4, &[2.0, 3.0, 0.5, -1.0, 7.0, 7.0, 7.0, 7.0]);
        let g = looc_quantize(&z, &cb, 2, Metric::L2).unwrap();
        let back = looc_dequantize(&g, &cb).unwrap();
        assert_eq!(back, z);
    }

    #[test]
    fn pq_examples() {
        let cbs = PqCodebookSet::new(vec![
            Codebook::from_rows(&[[0.0f32]]).unwrap(),
            Codebook::from_rows(&[[9.0f32]]).unwrap(),
        ])
        .unwrap();
        let g = pq_quantize(&map(1, 1, 2, &[3.0, 3.0]), &cbs, Metric::L2).unwrap();
        assert_eq!(g.indices(), &[0, 0]);
        assert_eq!(pq_dequantize(&g, &cbs).unwrap().data(), &[0.0, 9.0]);

        let z = map(2, 2, 2, &[1.0, -4.0, 2.0, 0.0, 5.0, 5.0, -1.0, 3.0]);
        let g = pq_quantize(&z, &cbs, Metric::L2).unwrap();
        let back = pq_dequantize(&g, &cbs).unwrap();
        assert_eq!(back.shape(), z.shape());
        for v in back.vectors() {
            assert_eq!(v, &[0.0, 9.0]);
        }
    }

    #[test]
    fn pq_rejects_mismatched_sub_dims() {
        let res = PqCodebookSet::new(vec![
            Codebook::from_rows(&[[0.0f32]]).unwrap(),
            Codebook::from_rows(&[[0.0f32, 1.0]]).unwrap(),
        ]);
        assert!(matches!(res, Err(LoocError::DimensionMismatch { .. })));
    }

    #[test]
    fn capacity() {
        assert_eq!(effective_capacity(37, 1), BigUint::from(37u32));
        assert_eq!(effective_capacity(1, 9), BigUint::from(1u32));
        assert_eq!(effective_capacity(32, 4), BigUint::from(1_048_576u32));
        assert_eq!(effective_capacity(256, 32), BigUint::from(2u32).pow(256));
    }

    #[test]
    fn counted_multiplications() {
        let cb = Codebook::from_rows(&[[0.0f32, 0.0], [1.0, 1.0], [2.0, 2.0]]).unwrap();
        let z = FeatureMap::zeros(4, 5, 8);
        let mut mults = 0;
        looc_quantize_counted(&z, &cb, 4, Metric::L2, &mut mults).unwrap();
        // h·w·m·K·d*
        assert_eq!(mults, 4 * 5 * 4 * 3 * 2);
    }
}
