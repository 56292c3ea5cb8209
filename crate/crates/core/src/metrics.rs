//! Reconstruction quality and codebook usage statistics.

use serde::Serialize;

use crate::error::{LoocError, Result};
use crate::types::{CodeGrid, FeatureMap};

fn same_shape(a: &FeatureMap, b: &FeatureMap) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(LoocError::ShapeMismatch(format!(
            "{:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Mean squared elementwise difference.
pub fn mse(a: &FeatureMap, b: &FeatureMap) -> Result<f64> {
    same_shape(a, b)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum();
    Ok(sum / a.data().len() as f64)
}

/// Mean absolute elementwise difference.
pub fn l1(a: &FeatureMap, b: &FeatureMap) -> Result<f64> {
    same_shape(a, b)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).abs())
        .sum();
    Ok(sum / a.data().len() as f64)
}

/// `10 · log10(peak² / mse)` in dB; `f64::INFINITY` when the maps are equal.
pub fn psnr(a: &FeatureMap, b: &FeatureMap, peak: f64) -> Result<f64> {
    if peak.is_nan() || peak <= 0.0 {
        return Err(LoocError::InvalidConfig(format!(
            "peak must be positive, got {peak}"
        )));
    }
    Ok(psnr_from_mse(mse(a, b)?, peak))
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

pub const DEFAULT_SSIM_WINDOW: usize = 7;

/// Mean SSIM over every fully contained `window × window` box, with
/// uniform weights and the usual stabilisers `C1 = (0.01·peak)²`,
/// `C2 = (0.03·peak)²`. Both maps must be single-channel.
///
/// Local moments come from summed-area tables, so the cost is linear in
/// the pixel count regardless of window size.
pub fn ssim(a: &FeatureMap, b: &FeatureMap, window: usize, peak: f64) -> Result<f64> {
    same_shape(a, b)?;
    if a.d() != 1 {
        return Err(LoocError::ShapeMismatch(format!(
            "ssim expects a single-channel image, got d={}",
            a.d()
        )));
    }
    if window < 3 || window.is_multiple_of(2) {
        return Err(LoocError::InvalidConfig(format!(
            "ssim window must be odd and >= 3, got {window}"
        )));
    }
    let (h, w) = (a.h(), a.w());
    if window > h || window > w {
        return Err(LoocError::WindowTooLarge { window, h, w });
    }
    ssim_plane(a.data(), b.data(), h, w, window, peak)
}

/// Mean of per-channel SSIM for multi-channel maps.
pub fn ssim_channels(a: &FeatureMap, b: &FeatureMap, window: usize, peak: f64) -> Result<f64> {
    same_shape(a, b)?;
    let (h, w, d) = a.shape();
    let mut total = 0.0;
    for c in 0..d {
        let pa: Vec<f32> = a.data().iter().skip(c).step_by(d).copied().collect();
        let pb: Vec<f32> = b.data().iter().skip(c).step_by(d).copied().collect();
        let fa = FeatureMap::from_vec(h, w, 1, pa)?;
        let fb = FeatureMap::from_vec(h, w, 1, pb)?;
        total += ssim(&fa, &fb, window, peak)?;
    }
    Ok(total / d as f64)
}

struct Integral {
    w: usize,
    table: Vec<f64>,
}

impl Integral {
    fn new(h: usize, w: usize, value: impl Fn(usize) -> f64) -> Self {
        let stride = w + 1;
        let mut table = vec![0.0; (h + 1) * stride];
        for i in 0..h {
            let mut row = 0.0;
            for j in 0..w {
                row += value(i * w + j);
                table[(i + 1) * stride + j + 1] = table[i * stride + j + 1] + row;
            }
        }
        Self { w, table }
    }

    fn sum(&self, top: usize, left: usize, size: usize) -> f64 {
        let s = self.w + 1;
        let (b, r) = (top + size, left + size);
        self.table[b * s + r] - self.table[top * s + r] - self.table[b * s + left]
            + self.table[top * s + left]
    }
}

fn ssim_plane(a: &[f32], b: &[f32], h: usize, w: usize, window: usize, peak: f64) -> Result<f64> {
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let sa = Integral::new(h, w, |i| a[i] as f64);
    let sb = Integral::new(h, w, |i| b[i] as f64);
    let saa = Integral::new(h, w, |i| (a[i] as f64).powi(2));
    let sbb = Integral::new(h, w, |i| (b[i] as f64).powi(2));
    let sab = Integral::new(h, w, |i| a[i] as f64 * b[i] as f64);
    let n = (window * window) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for top in 0..=h - window {
        for left in 0..=w - window {
            let mu_a = sa.sum(top, left, window) / n;
            let mu_b = sb.sum(top, left, window) / n;
            let var_a = (saa.sum(top, left, window) / n - mu_a * mu_a).max(0.0);
            let var_b = (sbb.sum(top, left, window) / n - mu_b * mu_b).max(0.0);
            let cov = sab.sum(top, left, window) / n - mu_a * mu_b;
            let num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2);
            let den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

fn check_grids(grids: &[CodeGrid], k: usize) -> Result<usize> {
    let m = grids
        .first()
        .map(CodeGrid::m)
        .ok_or(LoocError::InconsistentGrids)?;
    if grids.iter().any(|g| g.m() != m || g.k() != k) {
        return Err(LoocError::InconsistentGrids);
    }
    Ok(m)
}

/// `used[q][k]`: whether codevector `k` appears in slot `q` of any grid.
fn slot_presence(grids: &[CodeGrid], k: usize, m: usize) -> Vec<Vec<bool>> {
    let mut used = vec![vec![false; k]; m];
    for g in grids {
        for loc in g.indices().chunks_exact(m) {
            for (q, &i) in loc.iter().enumerate() {
                used[q][i as usize] = true;
            }
        }
    }
    used
}

/// For each segment slot, the fraction of the `K` codevectors that appear
/// in that slot at least once.
pub fn segment_usage(grids: &[CodeGrid], k: usize) -> Result<Vec<f64>> {
    let m = check_grids(grids, k)?;
    Ok(slot_presence(grids, k, m)
        .iter()
        .map(|slot| slot.iter().filter(|&&u| u).count() as f64 / k as f64)
        .collect())
}

/// Entry `n` is the fraction of codevectors used by at least `n` distinct
/// segment slots; entry 0 is 1 by convention.
pub fn sharing_histogram(grids: &[CodeGrid], k: usize) -> Result<Vec<f64>> {
    let m = check_grids(grids, k)?;
    let used = slot_presence(grids, k, m);
    let mut at_least = vec![0usize; m + 1];
    for code in 0..k {
        let slots = used.iter().filter(|slot| slot[code]).count();
        for count in at_least.iter_mut().take(slots + 1) {
            *count += 1;
        }
    }
    Ok(at_least.into_iter().map(|c| c as f64 / k as f64).collect())
}

/// Fraction of codevectors appearing anywhere in the grids.
pub fn overall_usage(grids: &[CodeGrid], k: usize) -> Result<f64> {
    Ok(sharing_histogram(grids, k)?.get(1).copied().unwrap_or(0.0))
}

/// Flat stats report written by the CLI. `psnr_db` is `null` when the
/// reconstruction is exact.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatsReport {
    pub mse: f64,
    pub l1: f64,
    pub psnr_db: Option<f64>,
    pub ssim: Option<f64>,
    pub usage: f64,
    pub per_segment_usage: Vec<f64>,
    pub sharing: Vec<f64>,
    #[serde(rename = "codebookBits")]
    pub codebook_bits: u64,
    #[serde(rename = "indexBits")]
    pub index_bits: u64,
    #[serde(rename = "totalBits")]
    pub total_bits: u64,
    pub multiplications: u64,
}

impl StatsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("stats report serializes")
    }

    /// One `key=value` line per field.
    pub fn to_key_values(&self) -> String {
        let join = |v: &[f64]| {
            v.iter()
                .map(|x| format!("{x:.6}"))
                .collect::<Vec<_>>()
                .join(",")
        };
        let opt = |v: Option<f64>| v.map_or_else(|| "inf".to_string(), |x| format!("{x:.6}"));
        format!(
            "mse={:.8}\nl1={:.8}\npsnr_db={}\nssim={}\nusage={:.6}\nper_segment_usage={}\nsharing={}\ncodebookBits={}\nindexBits={}\ntotalBits={}\nmultiplications={}\n",
            self.mse,
            self.l1,
            opt(self.psnr_db),
            self.ssim.map_or_else(|| "n/a".to_string(), |x| format!("{x:.6}")),
            self.usage,
            join(&self.per_segment_usage),
            join(&self.sharing),
            self.codebook_bits,
            self.index_bits,
            self.total_bits,
            self.multiplications,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn map(h: usize, w: usize, d: usize, data: Vec<f32>) -> FeatureMap {
        FeatureMap::from_vec(h, w, d, data).unwrap()
    }

    fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize, d: usize) -> FeatureMap {
        map(
            h,
            w,
            d,
            (0..h * w * d).map(|_| rng.random_range(0.0..1.0)).collect(),
        )
    }

    #[test]
    fn error_examples() {
        let a = map(1, 1, 1, vec![0.0]);
        let b = map(1, 1, 1, vec![2.0]);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert_eq!(mse(&a, &b).unwrap(), 4.0);
        assert_eq!(l1(&a, &b).unwrap(), 2.0);
        assert!(matches!(
            mse(&a, &map(1, 2, 1, vec![0.0, 0.0])),
            Err(LoocError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn error_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_map(&mut rng, 5, 7, 3);
        let b = random_map(&mut rng, 5, 7, 3);
        let (mut sq, mut abs) = (0.0f64, 0.0f64);
        for i in 0..5 {
            for j in 0..7 {
                for c in 0..3 {
                    let diff = a.get(i, j, c) as f64 - b.get(i, j, c) as f64;
                    sq += diff * diff;
                    abs += diff.abs();
                }
            }
        }
        assert!((mse(&a, &b).unwrap() - sq / 105.0).abs() < 1e-12);
        assert!((l1(&a, &b).unwrap() - abs / 105.0).abs() < 1e-12);
    }

    #[test]
    fn psnr_examples() {
        let a = map(1, 1, 1, vec![0.3]);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        let b = map(1, 1, 1, vec![1.3]);
        assert!(psnr(&a, &b, 1.0).unwrap().abs() < 1e-6);
        assert!((psnr_from_mse(0.01, 1.0) - 20.0).abs() < 1e-12);
        let mut prev = f64::NEG_INFINITY;
        for mse in [1.0, 0.5, 0.1, 0.01, 1e-6] {
            let p = psnr_from_mse(mse, 2.0);
            assert!(p > prev);
            prev = p;
        }
    }

    #[test]
    fn ssim_identity_and_negation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_map(&mut rng, 12, 10, 1);
        assert!((ssim(&a, &a, 7, 1.0).unwrap() - 1.0).abs() < 1e-12);

        // One window spanning a zero-mean patch.
        let raw: Vec<f32> = (0..49).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mean = raw.iter().sum::<f32>() / 49.0;
        let centred: Vec<f32> = raw.iter().map(|v| v - mean).collect();
        let neg: Vec<f32> = centred.iter().map(|v| -v).collect();
        let a = map(7, 7, 1, centred);
        let b = map(7, 7, 1, neg);
        assert!(ssim(&a, &b, 7, 2.0).unwrap() <= 0.0);
    }

    #[test]
    fn ssim_errors() {
        let a = map(5, 5, 1, vec![0.0; 25]);
        assert!(matches!(
            ssim(&a, &a, 7, 1.0),
            Err(LoocError::WindowTooLarge { .. })
        ));
        assert!(ssim(&a, &a, 4, 1.0).is_err());
        let c = map(5, 5, 2, vec![0.0; 50]);
        assert!(ssim(&c, &c, 3, 1.0).is_err());
    }

    fn ssim_literal(a: &FeatureMap, b: &FeatureMap, win: usize, peak: f64) -> f64 {
        let c1 = (0.01 * peak) * (0.01 * peak);
        let c2 = (0.03 * peak) * (0.03 * peak);
        let mut scores = Vec::new();
        for top in 0..=a.h() - win {
            for left in 0..=a.w() - win {
                let mut xs = Vec::new();
                let mut ys = Vec::new();
                for i in top..top + win {
                    for j in left..left + win {
                        xs.push(a.get(i, j, 0) as f64);
                        ys.push(b.get(i, j, 0) as f64);
                    }
                }
                let n = xs.len() as f64;
                let mx = xs.iter().sum::<f64>() / n;
                let my = ys.iter().sum::<f64>() / n;
                let vx = xs.iter().map(|x| (x - mx) * (x - mx)).sum::<f64>() / n;
                let vy = ys.iter().map(|y| (y - my) * (y - my)).sum::<f64>() / n;
                let cxy = xs
                    .iter()
                    .zip(&ys)
                    .map(|(x, y)| (x - mx) * (y - my))
                    .sum::<f64>()
                    / n;
                scores.push(
                    ((2.0 * mx * my + c1) * (2.0 * cxy + c2))
                        / ((mx * mx + my * my + c1) * (vx + vy + c2)),
                );
            }
        }
        scores.iter().sum::<f64>() / scores.len() as f64
    }

    #[test]
    fn ssim_matches_literal_windows() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (h, w, win) in [(9, 11, 3), (16, 16, 7), (8, 20, 5)] {
            let a = random_map(&mut rng, h, w, 1);
            let b = random_map(&mut rng, h, w, 1);
            let got = ssim(&a, &b, win, 1.0).unwrap();
            let want = ssim_literal(&a, &b, win, 1.0);
            assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        }
    }

    #[test]
    fn usage_examples() {
        let g = CodeGrid::new(1, 3, 2, 4, vec![0, 1, 0, 2, 0, 3]).unwrap();
        let usage = segment_usage(std::slice::from_ref(&g), 4).unwrap();
        assert_eq!(usage, vec![0.25, 0.75]);

        let g = CodeGrid::new(2, 2, 2, 4, vec![0, 1, 1, 0, 2, 3, 3, 2]).unwrap();
        assert_eq!(
            segment_usage(std::slice::from_ref(&g), 4).unwrap(),
            vec![1.0, 1.0]
        );
        assert_eq!(
            sharing_histogram(std::slice::from_ref(&g), 4).unwrap(),
            vec![1.0, 1.0, 1.0]
        );

        // Codevector 3 unused: only counted in entry 0.
        let g = CodeGrid::new(1, 2, 2, 4, vec![0, 1, 2, 0]).unwrap();
        assert_eq!(
            sharing_histogram(std::slice::from_ref(&g), 4).unwrap(),
            vec![1.0, 0.75, 0.25]
        );

        let other = CodeGrid::new(1, 1, 3, 4, vec![0, 0, 0]).unwrap();
        assert!(matches!(
            segment_usage(&[g, other], 4),
            Err(LoocError::InconsistentGrids)
        ));
        assert!(matches!(
            segment_usage(&[], 4),
            Err(LoocError::InconsistentGrids)
        ));
    }

    fn random_grids(rng: &mut ChaCha8Rng, m: usize, k: usize) -> Vec<CodeGrid> {
        (0..3)
            .map(|_| {
                let (h, w) = (rng.random_range(1..4), rng.random_range(1..4));
                let idx = (0..h * w * m)
                    .map(|_| rng.random_range(0..k as u32))
                    .collect();
                CodeGrid::new(h, w, m, k, idx).unwrap()
            })
            .collect()
    }

    #[test]
    fn statistics_match_set_oracle() {
        use std::collections::BTreeSet;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let m = rng.random_range(1..5);
            let k = rng.random_range(1..12);
            let grids = random_grids(&mut rng, m, k);
            let mut per_slot: Vec<BTreeSet<u32>> = vec![BTreeSet::new(); m];
            let mut per_code: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); k];
            for g in &grids {
                for (n, &i) in g.indices().iter().enumerate() {
                    per_slot[n % m].insert(i);
                    per_code[i as usize].insert(n % m);
                }
            }
            let usage = segment_usage(&grids, k).unwrap();
            for q in 0..m {
                assert_eq!(usage[q], per_slot[q].len() as f64 / k as f64);
            }
            let hist = sharing_histogram(&grids, k).unwrap();
            assert_eq!(hist[0], 1.0);
            for n in 0..=m {
                let want = per_code.iter().filter(|s| s.len() >= n).count() as f64 / k as f64;
                assert_eq!(hist[n], want);
                if n > 0 {
                    assert!(hist[n] <= hist[n - 1]);
                }
            }
        }
    }
}
