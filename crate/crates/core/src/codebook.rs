//! Codebook storage, nearest-codevector search, EMA learning and
//! anchored reactivation of dead codevectors.
//!
//! The search is an exhaustive scan: codebooks here hold at most a few
//! thousand entries, so exact search is both simple and fast enough.
//! Ties are always broken toward the lowest index, which makes every
//! quantizer built on top of [`Codebook::nearest`] a pure function.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{LoocError, Result};
use crate::types::Metric;

/// `K` codevectors of dimension `d*` plus usage statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    k: usize,
    dim: usize,
    vectors: Vec<f32>,
    usage_count: Vec<u64>,
    usage_ema: Vec<f32>,
}

/// How a dead codevector picks its replacement anchor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AnchorMode {
    #[default]
    RandomFeature,
    FarthestFeature,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReactivationPolicy {
    /// EMA decay for the usage statistic, in (0, 1).
    pub decay: f64,
    /// Codevectors whose usage EMA falls below this are considered dead.
    pub dead_threshold: f64,
    pub anchor_mode: AnchorMode,
}

impl Default for ReactivationPolicy {
    fn default() -> Self {
        Self {
            decay: 0.99,
            dead_threshold: 0.1,
            anchor_mode: AnchorMode::RandomFeature,
        }
    }
}

impl ReactivationPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return Err(LoocError::InvalidConfig(format!(
                "reactivation decay must lie in (0, 1), got {}",
                self.decay
            )));
        }
        if !(self.dead_threshold > 0.0 && self.dead_threshold.is_finite()) {
            return Err(LoocError::InvalidConfig(format!(
                "dead threshold must be positive, got {}",
                self.dead_threshold
            )));
        }
        Ok(())
    }
}

#[inline]
fn squared_l2(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let diff = x as f64 - y as f64;
            diff * diff
        })
        .sum()
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

fn check_dim(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(LoocError::DimensionMismatch { expected, actual });
    }
    Ok(())
}

impl Codebook {
    /// Wraps explicit codevectors with zeroed usage statistics.
    pub fn from_vectors(k: usize, dim: usize, vectors: Vec<f32>) -> Result<Self> {
        if k == 0 || dim == 0 {
            return Err(LoocError::InvalidConfig(format!(
                "codebook needs K >= 1 and d* >= 1, got K={k}, d*={dim}"
            )));
        }
        if vectors.len() != k * dim {
            return Err(LoocError::LengthMismatch {
                expected: k * dim,
                actual: vectors.len(),
            });
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(LoocError::NonFiniteInput);
        }
        Ok(Self {
            k,
            dim,
            vectors,
            usage_count: vec![0; k],
            usage_ema: vec![0.0; k],
        })
    }

    /// Convenience constructor from one row per codevector.
    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let dim = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut flat = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            check_dim(dim, row.as_ref().len())?;
            flat.extend_from_slice(row.as_ref());
        }
        Self::from_vectors(rows.len(), dim, flat)
    }

    /// k-means++ seeding: the first codevector is a uniformly drawn sample,
    /// each further one is drawn with probability proportional to its
    /// squared distance from the nearest codevector chosen so far.
    ///
    /// When every remaining sample coincides with a chosen codevector the
    /// draw falls back to a uniform pick, so `K` larger than the number of
    /// distinct samples yields duplicated codevectors.
    pub fn init<S: AsRef<[f32]> + Sync>(
        k: usize,
        dim: usize,
        samples: &[S],
        seed: u64,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(LoocError::EmptySampleSet);
        }
        for s in samples {
            check_dim(dim, s.as_ref().len())?;
        }
        if k == 0 || dim == 0 {
            return Err(LoocError::InvalidConfig(format!(
                "codebook needs K >= 1 and d* >= 1, got K={k}, d*={dim}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = samples.len();
        let mut chosen = Vec::with_capacity(k);
        let first = rng.random_range(0..n);
        chosen.push(first);
        let mut nearest_d2: Vec<f64> = samples
            .par_iter()
            .map(|s| squared_l2(s.as_ref(), samples[first].as_ref()))
            .collect();

        while chosen.len() < k {
            let total: f64 = nearest_d2.iter().sum();
            let pick = if total > 0.0 {
                let target = rng.random::<f64>() * total;
                let mut acc = 0.0;
                let mut pick = None;
                let mut last_positive = 0;
                for (i, &w) in nearest_d2.iter().enumerate() {
                    if w <= 0.0 {
                        continue;
                    }
                    last_positive = i;
                    acc += w;
                    if acc > target {
                        pick = Some(i);
                        break;
                    }
                }
                pick.unwrap_or(last_positive)
            } else {
                rng.random_range(0..n)
            };
            chosen.push(pick);
            let centre = samples[pick].as_ref();
            nearest_d2
                .par_iter_mut()
                .zip(samples.par_iter())
                .for_each(|(d2, s)| {
                    let d = squared_l2(s.as_ref(), centre);
                    if d < *d2 {
                        *d2 = d;
                    }
                });
        }

        let mut vectors = Vec::with_capacity(k * dim);
        for &i in &chosen {
            vectors.extend_from_slice(samples[i].as_ref());
        }
        Self::from_vectors(k, dim, vectors)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Codevector dimension `d*`.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vectors(&self) -> &[f32] {
        &self.vectors
    }

    pub fn vector(&self, index: usize) -> &[f32] {
        &self.vectors[index * self.dim..(index + 1) * self.dim]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f32> {
        self.vectors.chunks_exact(self.dim)
    }

    pub fn usage_count(&self) -> &[u64] {
        &self.usage_count
    }

    pub fn usage_ema(&self) -> &[f32] {
        &self.usage_ema
    }

    pub(crate) fn vectors_mut(&mut self) -> &mut [f32] {
        &mut self.vectors
    }

    /// Overwrites one codevector, keeping its usage statistics.
    pub fn set_vector(&mut self, index: usize, value: &[f32]) -> Result<()> {
        check_dim(self.dim, value.len())?;
        if index >= self.k {
            return Err(LoocError::IndexOutOfRange { index, k: self.k });
        }
        if value.iter().any(|v| !v.is_finite()) {
            return Err(LoocError::NonFiniteInput);
        }
        self.vectors[index * self.dim..(index + 1) * self.dim].copy_from_slice(value);
        Ok(())
    }

    /// Index and distance of the closest codevector.
    ///
    /// The distance is unsquared L2 for [`Metric::L2`] and `1 - cos` for
    /// [`Metric::Cosine`].
    pub fn nearest(&self, v: &[f32], metric: Metric) -> Result<(usize, f32)> {
        let mut mults = 0;
        self.nearest_counted(v, metric, &mut mults)
    }

    /// [`Codebook::nearest`] that also adds the number of multiplications in
    /// the similarity scan (`K · d*`, additions and norms excluded) to
    /// `mults`.
    pub fn nearest_counted(
        &self,
        v: &[f32],
        metric: Metric,
        mults: &mut u64,
    ) -> Result<(usize, f32)> {
        check_dim(self.dim, v.len())?;
        let (index, score) = match metric {
            Metric::L2 => {
                let mut best = (0, f64::INFINITY);
                for (k, c) in self.rows().enumerate() {
                    let d2 = squared_l2(v, c);
                    if d2 < best.1 {
                        best = (k, d2);
                    }
                }
                (best.0, best.1.sqrt())
            }
            Metric::Cosine => {
                let v_norm = dot(v, v).sqrt();
                if v_norm == 0.0 {
                    return Err(LoocError::ZeroVectorCosine);
                }
                let mut best = (0, f64::NEG_INFINITY);
                for (k, c) in self.rows().enumerate() {
                    let c_norm = dot(c, c).sqrt();
                    if c_norm == 0.0 {
                        return Err(LoocError::ZeroVectorCosine);
                    }
                    let sim = dot(v, c) / (v_norm * c_norm);
                    if sim > best.1 {
                        best = (k, sim);
                    }
                }
                (best.0, 1.0 - best.1)
            }
        };
        *mults += (self.k * self.dim) as u64;
        Ok((index, score as f32))
    }

    /// Increments the lifetime hit counter of each listed codevector.
    pub fn record_hits(&mut self, indices: impl IntoIterator<Item = usize>) {
        for i in indices {
            self.usage_count[i] += 1;
        }
    }

    /// Moves every assigned codevector toward the mean of its assigned
    /// vectors: `c ← decay · c + (1 − decay) · mean`. The usage EMA of a hit
    /// codevector becomes `decay · ema + (1 − decay) · hits`. Codevectors
    /// with no assignment are left untouched.
    pub fn ema_update<V: AsRef<[f32]>>(
        &mut self,
        assignments: &[(usize, V)],
        decay: f64,
    ) -> Result<()> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(LoocError::InvalidConfig(format!(
                "decay must lie in [0, 1], got {decay}"
            )));
        }
        let mut sums = vec![0.0f64; self.k * self.dim];
        let mut hits = vec![0u64; self.k];
        for (index, v) in assignments {
            let v = v.as_ref();
            check_dim(self.dim, v.len())?;
            if *index >= self.k {
                return Err(LoocError::IndexOutOfRange {
                    index: *index,
                    k: self.k,
                });
            }
            hits[*index] += 1;
            for (s, &x) in sums[index * self.dim..(index + 1) * self.dim]
                .iter_mut()
                .zip(v)
            {
                *s += x as f64;
            }
        }
        for k in 0..self.k {
            if hits[k] == 0 {
                continue;
            }
            let n = hits[k] as f64;
            let row = &mut self.vectors[k * self.dim..(k + 1) * self.dim];
            for (c, &s) in row.iter_mut().zip(&sums[k * self.dim..(k + 1) * self.dim]) {
                *c = (decay * *c as f64 + (1.0 - decay) * (s / n)) as f32;
            }
            self.usage_ema[k] = (decay * self.usage_ema[k] as f64 + (1.0 - decay) * n) as f32;
            self.usage_count[k] += hits[k];
        }
        Ok(())
    }

    /// Applies one EMA step to the usage statistic of every codevector,
    /// counting `hits[k]` for codevector `k` (zero for idle ones).
    pub fn decay_usage(&mut self, hits: &[u64], decay: f64) {
        debug_assert_eq!(hits.len(), self.k);
        for (ema, &h) in self.usage_ema.iter_mut().zip(hits) {
            *ema = (decay * *ema as f64 + (1.0 - decay) * h as f64) as f32;
        }
    }

    /// Decays the usage EMA of codevectors with no hits this round, matching
    /// the EMA step [`Codebook::ema_update`] applies to hit ones.
    pub fn decay_idle_usage(&mut self, hits: &[u64], decay: f64) {
        for (ema, _) in self.usage_ema.iter_mut().zip(hits).filter(|(_, &h)| h == 0) {
            *ema = (decay * *ema as f64) as f32;
        }
    }

    /// Replaces every codevector whose usage EMA is below the policy's
    /// threshold with an anchor feature and returns how many were replaced.
    ///
    /// `RandomFeature` hands out distinct anchors in seeded random order
    /// (cycling only when there are more dead codevectors than anchors).
    /// `FarthestFeature` greedily gives each dead codevector, in index
    /// order, the anchor farthest from its nearest live codevector; the
    /// chosen anchor then counts as live for the next pick.
    pub fn reactivate_dead<A: AsRef<[f32]> + Sync>(
        &mut self,
        anchors: &[A],
        policy: &ReactivationPolicy,
        seed: u64,
    ) -> Result<usize> {
        policy.validate()?;
        if anchors.is_empty() {
            return Err(LoocError::EmptyAnchorSet);
        }
        for a in anchors {
            check_dim(self.dim, a.as_ref().len())?;
        }
        let threshold = policy.dead_threshold;
        let dead: Vec<usize> = (0..self.k)
            .filter(|&k| (self.usage_ema[k] as f64) < threshold)
            .collect();
        if dead.is_empty() {
            return Ok(0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        match policy.anchor_mode {
            AnchorMode::RandomFeature => {
                let mut order: Vec<usize> = (0..anchors.len()).collect();
                order.shuffle(&mut rng);
                for (slot, &k) in dead.iter().enumerate() {
                    let anchor = anchors[order[slot % order.len()]].as_ref();
                    self.vectors[k * self.dim..(k + 1) * self.dim].copy_from_slice(anchor);
                }
            }
            AnchorMode::FarthestFeature => {
                let is_dead = {
                    let mut mask = vec![false; self.k];
                    for &k in &dead {
                        mask[k] = true;
                    }
                    mask
                };
                let live: Vec<&[f32]> = (0..self.k)
                    .filter(|&k| !is_dead[k])
                    .map(|k| self.vector(k))
                    .collect();
                let mut gap: Vec<f64> = anchors
                    .par_iter()
                    .map(|a| {
                        live.iter()
                            .map(|c| squared_l2(a.as_ref(), c))
                            .fold(f64::INFINITY, f64::min)
                    })
                    .collect();
                for &k in &dead {
                    let pick = if gap.iter().all(|g| g.is_infinite()) {
                        rng.random_range(0..anchors.len())
                    } else {
                        let mut best = 0;
                        for (i, &g) in gap.iter().enumerate() {
                            if g > gap[best] {
                                best = i;
                            }
                        }
                        best
                    };
                    let anchor = anchors[pick].as_ref().to_vec();
                    self.vectors[k * self.dim..(k + 1) * self.dim].copy_from_slice(&anchor);
                    gap.par_iter_mut()
                        .zip(anchors.par_iter())
                        .for_each(|(g, a)| {
                            let d = squared_l2(a.as_ref(), &anchor);
                            if d < *g {
                                *g = d;
                            }
                        });
                }
            }
        }
        for &k in &dead {
            self.usage_ema[k] = threshold as f32;
        }
        Ok(dead.len())
    }

    /// Fraction of codevectors hit at least once over the codebook's life.
    pub fn usage_fraction(&self) -> f64 {
        let used = self.usage_count.iter().filter(|&&c| c > 0).count();
        used as f64 / self.k as f64
    }

    /// Nearest index for every sample, computed in parallel.
    pub fn assign_all<S: AsRef<[f32]> + Sync>(
        &self,
        samples: &[S],
        metric: Metric,
    ) -> Result<Vec<(usize, f32)>> {
        samples
            .par_iter()
            .map(|s| self.nearest(s.as_ref(), metric))
            .collect()
    }
}

/// Settings for the offline assign → EMA → reactivate loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitConfig {
    pub rounds: usize,
    pub metric: Metric,
    /// EMA decay for codevectors and for the per-round usage statistic.
    pub decay: f64,
    /// `None` disables reactivation.
    pub reactivation: Option<ReactivationPolicy>,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            rounds: 50,
            metric: Metric::L2,
            decay: 0.5,
            reactivation: Some(ReactivationPolicy::default()),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub rounds: usize,
    /// Mean squared L2 distance from each sample to its codevector after the
    /// final assignment pass.
    pub distortion: f64,
    pub reactivated: usize,
    /// Lifetime usage fraction after fitting.
    pub usage: f64,
    /// Fraction of codevectors hit in the final assignment pass alone.
    pub final_pass_usage: f64,
}

/// Fits a `K`-entry codebook to `samples` with k-means++ seeding followed by
/// `rounds` of assign → [`Codebook::ema_update`] → optional
/// [`Codebook::reactivate_dead`], then one last assignment pass.
///
/// Within the loop the usage EMA of idle codevectors decays with the same
/// rate as hit ones, so a codevector that stops being selected eventually
/// drops below the dead threshold.
pub fn fit_codebook<S: AsRef<[f32]> + Sync>(
    samples: &[S],
    k: usize,
    dim: usize,
    cfg: &FitConfig,
) -> Result<(Codebook, FitReport)> {
    if !(cfg.decay > 0.0 && cfg.decay < 1.0) {
        return Err(LoocError::InvalidConfig(format!(
            "fit decay must lie in (0, 1), got {}",
            cfg.decay
        )));
    }
    if let Some(policy) = &cfg.reactivation {
        policy.validate()?;
    }
    let mut cb = Codebook::init(k, dim, samples, cfg.seed)?;
    let mut reactivated = 0;
    for round in 0..cfg.rounds {
        let assigned = cb.assign_all(samples, cfg.metric)?;
        let pairs: Vec<(usize, &[f32])> = assigned
            .iter()
            .zip(samples)
            .map(|(&(i, _), s)| (i, s.as_ref()))
            .collect();
        cb.ema_update(&pairs, cfg.decay)?;
        let mut hits = vec![0u64; k];
        for &(i, _) in &assigned {
            hits[i] += 1;
        }
        cb.decay_idle_usage(&hits, cfg.decay);
        if let Some(policy) = &cfg.reactivation {
            let round_seed = cfg
                .seed
                .wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(round as u64 + 1));
            reactivated += cb.reactivate_dead(samples, policy, round_seed)?;
        }
    }
    let assigned = cb.assign_all(samples, cfg.metric)?;
    cb.record_hits(assigned.iter().map(|&(i, _)| i));
    let distortion = assigned
        .iter()
        .zip(samples)
        .map(|(&(i, _), s)| squared_l2(s.as_ref(), cb.vector(i)))
        .sum::<f64>()
        / samples.len() as f64;
    let mut final_hit = vec![false; k];
    for &(i, _) in &assigned {
        final_hit[i] = true;
    }
    let report = FitReport {
        rounds: cfg.rounds,
        distortion,
        reactivated,
        usage: cb.usage_fraction(),
        final_pass_usage: final_hit.iter().filter(|&&h| h).count() as f64 / k as f64,
    };
    Ok((cb, report))
}
