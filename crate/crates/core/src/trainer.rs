//! Desk-scale straight-through training of an affine encoder/decoder and a
//! shared codebook.
//!
//! The loss for one sample is
//!
//! ```text
//! ‖x − x̂‖² + ‖sg[z] − ẑ‖² + μ‖z − sg[ẑ]‖²
//! ```
//!
//! averaged over the batch. Gradient routing follows the stop-gradients:
//! the reconstruction term reaches the decoder directly and the encoder
//! through a straight-through copy (`∂/∂z := ∂/∂ẑ`), the codebook term
//! reaches only the selected codevectors, and the commitment term reaches
//! only the encoder. Parameters are updated with plain SGD.
//!
//! Weights are kept in `f64` so finite-difference checks are meaningful;
//! the codebook itself stays `f32` like everywhere else.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::codebook::{Codebook, ReactivationPolicy};
use crate::enhancement::bilinear_upsample;
use crate::error::{LoocError, Result};
use crate::quantizers::looc_quantize;
use crate::types::{segment_dim, CodeGrid, FeatureMap, QuantConfig};

/// Affine encoder `z = xᵀE + b_e` and decoder `x̂ = ẑᵀD + b_d`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearAe {
    d_in: usize,
    d_lat: usize,
    /// `d_in × d_lat`, row-major.
    enc_w: Vec<f64>,
    enc_b: Vec<f64>,
    /// `d_lat × d_in`, row-major.
    dec_w: Vec<f64>,
    dec_b: Vec<f64>,
}

impl LinearAe {
    /// Gaussian weights with variance `1 / fan_in`, zero biases.
    pub fn random(d_in: usize, d_lat: usize, seed: u64) -> Result<Self> {
        if d_in == 0 || d_lat == 0 {
            return Err(LoocError::InvalidConfig(
                "autoencoder dimensions must be positive".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = Normal::new(0.0, (1.0 / d_in as f64).sqrt()).expect("valid std");
        let dec = Normal::new(0.0, (1.0 / d_lat as f64).sqrt()).expect("valid std");
        Ok(Self {
            d_in,
            d_lat,
            enc_w: (0..d_in * d_lat).map(|_| enc.sample(&mut rng)).collect(),
            enc_b: vec![0.0; d_lat],
            dec_w: (0..d_lat * d_in).map(|_| dec.sample(&mut rng)).collect(),
            dec_b: vec![0.0; d_in],
        })
    }

    /// Identity encoder and decoder with zero biases.
    pub fn identity(d: usize) -> Self {
        let mut eye = vec![0.0; d * d];
        for i in 0..d {
            eye[i * d + i] = 1.0;
        }
        Self {
            d_in: d,
            d_lat: d,
            enc_w: eye.clone(),
            enc_b: vec![0.0; d],
            dec_w: eye,
            dec_b: vec![0.0; d],
        }
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_lat(&self) -> usize {
        self.d_lat
    }

    pub fn encode(&self, x: &[f64]) -> Vec<f64> {
        let mut z = self.enc_b.clone();
        for (a, &xa) in x.iter().enumerate() {
            for (zl, &w) in z
                .iter_mut()
                .zip(&self.enc_w[a * self.d_lat..(a + 1) * self.d_lat])
            {
                *zl += xa * w;
            }
        }
        z
    }

    pub fn decode(&self, z: &[f64]) -> Vec<f64> {
        let mut x = self.dec_b.clone();
        for (l, &zl) in z.iter().enumerate() {
            for (xj, &w) in x
                .iter_mut()
                .zip(&self.dec_w[l * self.d_in..(l + 1) * self.d_in])
            {
                *xj += zl * w;
            }
        }
        x
    }

    fn params(&self) -> [&Vec<f64>; 4] {
        [&self.enc_w, &self.enc_b, &self.dec_w, &self.dec_b]
    }

    fn params_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [
            &mut self.enc_w,
            &mut self.enc_b,
            &mut self.dec_w,
            &mut self.dec_b,
        ]
    }

    fn is_finite(&self) -> bool {
        self.params()
            .iter()
            .all(|p| p.iter().all(|v| v.is_finite()))
    }
}

/// How the codebook is learned during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CodebookLearning {
    /// SGD on the codebook term of the loss.
    #[default]
    GradientLoss,
    /// EMA of the encoder outputs assigned to each codevector.
    Ema,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub codebook_learning: CodebookLearning,
    /// Reactivate dead codevectors every this many steps; 0 disables.
    pub reactivate_every: usize,
    pub reactivation: ReactivationPolicy,
    /// Codevector decay in [`CodebookLearning::Ema`] mode.
    pub ema_decay: f64,
    /// Segments, interpolation factor, metric and commitment weight `μ`.
    pub quant: QuantConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            steps: 200,
            batch: 64,
            seed: 0,
            codebook_learning: CodebookLearning::GradientLoss,
            reactivate_every: 0,
            reactivation: ReactivationPolicy::default(),
            ema_decay: 0.9,
            quant: QuantConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(LoocError::InvalidConfig(format!(
                "lr must be finite and >= 0, got {}",
                self.lr
            )));
        }
        if self.steps == 0 || self.batch == 0 {
            return Err(LoocError::InvalidConfig(
                "steps and batch must be >= 1".into(),
            ));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(LoocError::InvalidConfig(format!(
                "ema decay must lie in (0, 1), got {}",
                self.ema_decay
            )));
        }
        self.reactivation.validate()?;
        self.quant.validate()
    }
}

/// Arrangement of a batch: independent vectors, or a row-major spatial grid
/// (required for `β > 1`, since interpolation mixes neighbours).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchLayout {
    Independent,
    Grid { h: usize, w: usize },
}

/// The three loss terms and their sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub recon: f64,
    pub codebook: f64,
    pub commit: f64,
    pub total: f64,
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Values of the three terms for one sample. `codebook` and `commit` differ
/// only by `μ`; which parameters each one trains is a routing question, see
/// [`LossTerm::routes`].
pub fn loss_terms(
    x: &[f64],
    x_hat: &[f64],
    z: &[f64],
    z_hat: &[f64],
    mu: f64,
) -> Result<LossTerms> {
    if x.len() != x_hat.len() {
        return Err(LoocError::LengthMismatch {
            expected: x.len(),
            actual: x_hat.len(),
        });
    }
    if z.len() != z_hat.len() {
        return Err(LoocError::LengthMismatch {
            expected: z.len(),
            actual: z_hat.len(),
        });
    }
    let recon = squared_distance(x, x_hat);
    let codebook = squared_distance(z, z_hat);
    let commit = mu * codebook;
    Ok(LossTerms {
        recon,
        codebook,
        commit,
        total: recon + codebook + commit,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossTerm {
    Recon,
    Codebook,
    Commit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Encoder,
    Decoder,
    Codevectors,
}

impl LossTerm {
    pub const ALL: [LossTerm; 3] = [LossTerm::Recon, LossTerm::Codebook, LossTerm::Commit];

    /// Parameter groups that receive gradient from this term.
    pub fn routes(self) -> &'static [ParamGroup] {
        match self {
            // Straight-through: the encoder sees ∂recon/∂ẑ as if ẑ = z.
            LossTerm::Recon => &[ParamGroup::Encoder, ParamGroup::Decoder],
            // sg[z]
            LossTerm::Codebook => &[ParamGroup::Codevectors],
            // sg[ẑ]
            LossTerm::Commit => &[ParamGroup::Encoder],
        }
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub recon: f64,
    pub codebook: f64,
    pub commit: f64,
    pub total: f64,
    pub usage: f64,
}

impl LossRecord {
    pub const CSV_HEADER: &'static str = "step,recon,codebook,commit,total,usage";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{:.8},{:.8},{:.8},{:.8},{:.6}",
            self.step, self.recon, self.codebook, self.commit, self.total, self.usage
        )
    }
}

/// Frozen state of one forward pass.
#[derive(Debug, Clone)]
struct Forward {
    x: Vec<Vec<f64>>,
    z: Vec<Vec<f64>>,
    z_hat: Vec<Vec<f64>>,
    x_hat: Vec<Vec<f64>>,
    grid: CodeGrid,
    beta: usize,
    /// Segments of the (possibly upsampled) latent map, in grid order.
    quantized_inputs: FeatureMap,
}

fn layout_shape(layout: BatchLayout, n: usize, beta: usize) -> Result<(usize, usize)> {
    match layout {
        BatchLayout::Independent => {
            if beta != 1 {
                return Err(LoocError::InvalidConfig(
                    "beta > 1 needs a spatial batch layout".into(),
                ));
            }
            Ok((n, 1))
        }
        BatchLayout::Grid { h, w } => {
            if h * w != n {
                return Err(LoocError::LengthMismatch {
                    expected: h * w,
                    actual: n,
                });
            }
            Ok((h, w))
        }
    }
}

/// `ẑ` at each location: the concatenated codevectors, averaged over the
/// `β × β` window of the upsampled grid.
fn reconstruct(grid: &CodeGrid, vectors: &[f64], dim: usize, beta: usize) -> Vec<Vec<f64>> {
    let (h, w, m) = (grid.h() / beta, grid.w() / beta, grid.m());
    let scale = 1.0 / (beta * beta) as f64;
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let mut acc = vec![0.0; m * dim];
            for a in 0..beta {
                for b in 0..beta {
                    for (q, &k) in grid.location(i * beta + a, j * beta + b).iter().enumerate() {
                        let c = &vectors[k as usize * dim..(k as usize + 1) * dim];
                        for (o, &v) in acc[q * dim..(q + 1) * dim].iter_mut().zip(c) {
                            *o += v * scale;
                        }
                    }
                }
            }
            out.push(acc);
        }
    }
    out
}

fn codebook_f64(cb: &Codebook) -> Vec<f64> {
    cb.vectors().iter().map(|&v| v as f64).collect()
}

fn forward<X: AsRef<[f32]>>(
    ae: &LinearAe,
    cb: &Codebook,
    batch: &[X],
    layout: BatchLayout,
    quant: &QuantConfig,
) -> Result<Forward> {
    if batch.is_empty() {
        return Err(LoocError::EmptySampleSet);
    }
    let seg = segment_dim(ae.d_lat, quant.m)?;
    if cb.dim() != seg {
        return Err(LoocError::DimensionMismatch {
            expected: seg,
            actual: cb.dim(),
        });
    }
    let (h, w) = layout_shape(layout, batch.len(), quant.beta)?;
    let mut x = Vec::with_capacity(batch.len());
    for sample in batch {
        let s = sample.as_ref();
        if s.len() != ae.d_in {
            return Err(LoocError::DimensionMismatch {
                expected: ae.d_in,
                actual: s.len(),
            });
        }
        x.push(s.iter().map(|&v| v as f64).collect::<Vec<f64>>());
    }
    let z: Vec<Vec<f64>> = x.iter().map(|xi| ae.encode(xi)).collect();
    let flat: Vec<f32> = z.iter().flatten().map(|&v| v as f32).collect();
    let zmap = FeatureMap::from_vec(h, w, ae.d_lat, flat)?;
    let quantized_inputs = bilinear_upsample(&zmap, quant.beta)?;
    let grid = looc_quantize(&quantized_inputs, cb, quant.m, quant.metric)?;
    let z_hat = reconstruct(&grid, &codebook_f64(cb), seg, quant.beta);
    let x_hat = z_hat.iter().map(|zh| ae.decode(zh)).collect();
    Ok(Forward {
        x,
        z,
        z_hat,
        x_hat,
        grid,
        beta: quant.beta,
        quantized_inputs,
    })
}

fn batch_losses(fwd: &Forward, mu: f64) -> Result<LossTerms> {
    let n = fwd.x.len() as f64;
    let mut sum = LossTerms {
        recon: 0.0,
        codebook: 0.0,
        commit: 0.0,
        total: 0.0,
    };
    for i in 0..fwd.x.len() {
        let t = loss_terms(&fwd.x[i], &fwd.x_hat[i], &fwd.z[i], &fwd.z_hat[i], mu)?;
        sum.recon += t.recon;
        sum.codebook += t.codebook;
        sum.commit += t.commit;
    }
    let (recon, codebook, commit) = (sum.recon / n, sum.codebook / n, sum.commit / n);
    Ok(LossTerms {
        recon,
        codebook,
        commit,
        total: recon + codebook + commit,
    })
}

/// Gradients of the batch-mean loss, laid out like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub enc_w: Vec<f64>,
    pub enc_b: Vec<f64>,
    pub dec_w: Vec<f64>,
    pub dec_b: Vec<f64>,
    pub codevectors: Vec<f64>,
}

impl Gradients {
    fn zeros(ae: &LinearAe, cb: &Codebook) -> Self {
        Self {
            enc_w: vec![0.0; ae.enc_w.len()],
            enc_b: vec![0.0; ae.enc_b.len()],
            dec_w: vec![0.0; ae.dec_w.len()],
            dec_b: vec![0.0; ae.dec_b.len()],
            codevectors: vec![0.0; cb.vectors().len()],
        }
    }

    fn group(&self, group: ParamGroup) -> Vec<&[f64]> {
        match group {
            ParamGroup::Encoder => vec![&self.enc_w, &self.enc_b],
            ParamGroup::Decoder => vec![&self.dec_w, &self.dec_b],
            ParamGroup::Codevectors => vec![&self.codevectors],
        }
    }

    /// Whether every entry of `group` is exactly zero.
    pub fn is_zero(&self, group: ParamGroup) -> bool {
        self.group(group)
            .iter()
            .all(|g| g.iter().all(|&v| v == 0.0))
    }

    fn add(&mut self, other: &Gradients) {
        let pairs = [
            (&mut self.enc_w, &other.enc_w),
            (&mut self.enc_b, &other.enc_b),
            (&mut self.dec_w, &other.dec_w),
            (&mut self.dec_b, &other.dec_b),
            (&mut self.codevectors, &other.codevectors),
        ];
        for (a, b) in pairs {
            a.iter_mut().zip(b.iter()).for_each(|(x, y)| *x += y);
        }
    }
}

/// Accumulates `∂L/∂z` into encoder gradients.
fn backprop_encoder(ae: &LinearAe, x: &[f64], g_z: &[f64], out: &mut Gradients) {
    for (a, &xa) in x.iter().enumerate() {
        for (g, &gz) in out.enc_w[a * ae.d_lat..(a + 1) * ae.d_lat]
            .iter_mut()
            .zip(g_z)
        {
            *g += xa * gz;
        }
    }
    out.enc_b.iter_mut().zip(g_z).for_each(|(g, &gz)| *g += gz);
}

/// Gradient contributed by a single loss term, routed per [`LossTerm::routes`].
fn term_gradients(
    ae: &LinearAe,
    cb: &Codebook,
    fwd: &Forward,
    mu: f64,
    term: LossTerm,
) -> Gradients {
    let mut out = Gradients::zeros(ae, cb);
    let n = fwd.x.len() as f64;
    match term {
        LossTerm::Recon => {
            for i in 0..fwd.x.len() {
                let g_xhat: Vec<f64> = fwd.x_hat[i]
                    .iter()
                    .zip(&fwd.x[i])
                    .map(|(xh, x)| 2.0 * (xh - x) / n)
                    .collect();
                let mut g_zhat = vec![0.0; ae.d_lat];
                for (l, &zl) in fwd.z_hat[i].iter().enumerate() {
                    let row = l * ae.d_in..(l + 1) * ae.d_in;
                    for ((g, &w), &gx) in out.dec_w[row.clone()]
                        .iter_mut()
                        .zip(&ae.dec_w[row])
                        .zip(&g_xhat)
                    {
                        *g += zl * gx;
                        g_zhat[l] += w * gx;
                    }
                }
                out.dec_b
                    .iter_mut()
                    .zip(&g_xhat)
                    .for_each(|(g, &gx)| *g += gx);
                // Straight-through copy of ∂/∂ẑ onto z.
                backprop_encoder(ae, &fwd.x[i], &g_zhat, &mut out);
            }
        }
        LossTerm::Commit => {
            for i in 0..fwd.x.len() {
                let g_z: Vec<f64> = fwd.z[i]
                    .iter()
                    .zip(&fwd.z_hat[i])
                    .map(|(z, zh)| 2.0 * mu * (z - zh) / n)
                    .collect();
                backprop_encoder(ae, &fwd.x[i], &g_z, &mut out);
            }
        }
        LossTerm::Codebook => {
            let dim = cb.dim();
            let beta = fwd.beta;
            let w = fwd.grid.w() / beta;
            let scale = 1.0 / (beta * beta) as f64;
            for i in 0..fwd.x.len() {
                let g_zhat: Vec<f64> = fwd.z_hat[i]
                    .iter()
                    .zip(&fwd.z[i])
                    .map(|(zh, z)| 2.0 * (zh - z) / n)
                    .collect();
                let (r, c) = (i / w, i % w);
                for a in 0..beta {
                    for b in 0..beta {
                        for (q, &k) in fwd
                            .grid
                            .location(r * beta + a, c * beta + b)
                            .iter()
                            .enumerate()
                        {
                            let dst =
                                &mut out.codevectors[k as usize * dim..(k as usize + 1) * dim];
                            for (g, &gz) in dst.iter_mut().zip(&g_zhat[q * dim..(q + 1) * dim]) {
                                *g += gz * scale;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn total_gradients(ae: &LinearAe, cb: &Codebook, fwd: &Forward, mu: f64) -> Gradients {
    let mut total = Gradients::zeros(ae, cb);
    for term in LossTerm::ALL {
        total.add(&term_gradients(ae, cb, fwd, mu, term));
    }
    total
}

/// Per-term gradients of the batch loss at the current parameters, with
/// code assignments taken from the current forward pass.
pub fn gradients_by_term<X: AsRef<[f32]>>(
    ae: &LinearAe,
    cb: &Codebook,
    batch: &[X],
    layout: BatchLayout,
    quant: &QuantConfig,
) -> Result<Vec<(LossTerm, Gradients)>> {
    let fwd = forward(ae, cb, batch, layout, quant)?;
    Ok(LossTerm::ALL
        .iter()
        .map(|&t| (t, term_gradients(ae, cb, &fwd, quant.mu, t)))
        .collect())
}

/// One SGD step. `step` is 1-based and only used for logging and the
/// reactivation schedule.
pub fn train_step<X: AsRef<[f32]>>(
    ae: &mut LinearAe,
    cb: &mut Codebook,
    batch: &[X],
    layout: BatchLayout,
    cfg: &TrainConfig,
    step: usize,
) -> Result<LossRecord> {
    let quant = &cfg.quant;
    let fwd = forward(ae, cb, batch, layout, quant).map_err(|e| match e {
        LoocError::NonFiniteInput => LoocError::NonFiniteLoss { step },
        other => other,
    })?;
    let losses = batch_losses(&fwd, quant.mu)?;
    if !losses.total.is_finite() {
        return Err(LoocError::NonFiniteLoss { step });
    }
    let grads = total_gradients(ae, cb, &fwd, quant.mu);

    for (param, grad) in
        ae.params_mut()
            .into_iter()
            .zip([&grads.enc_w, &grads.enc_b, &grads.dec_w, &grads.dec_b])
    {
        param
            .iter_mut()
            .zip(grad)
            .for_each(|(p, g)| *p -= cfg.lr * g);
    }
    if !ae.is_finite() {
        return Err(LoocError::NonFiniteLoss { step });
    }

    let mut hits = vec![0u64; cb.k()];
    for &k in fwd.grid.indices() {
        hits[k as usize] += 1;
    }
    let seg = cb.dim();
    match cfg.codebook_learning {
        CodebookLearning::GradientLoss => {
            let lr = cfg.lr;
            for (c, g) in cb.vectors_mut().iter_mut().zip(&grads.codevectors) {
                *c = (*c as f64 - lr * g) as f32;
            }
            if cb.vectors().iter().any(|v| !v.is_finite()) {
                return Err(LoocError::NonFiniteLoss { step });
            }
            cb.record_hits(fwd.grid.indices().iter().map(|&k| k as usize));
            cb.decay_usage(&hits, cfg.reactivation.decay);
        }
        CodebookLearning::Ema => {
            let assignments: Vec<(usize, &[f32])> = fwd
                .grid
                .indices()
                .iter()
                .zip(fwd.quantized_inputs.data().chunks_exact(seg))
                .map(|(&k, v)| (k as usize, v))
                .collect();
            cb.ema_update(&assignments, cfg.ema_decay)?;
            cb.decay_idle_usage(&hits, cfg.ema_decay);
        }
    }

    if cfg.reactivate_every > 0 && step.is_multiple_of(cfg.reactivate_every) {
        let anchors: Vec<&[f32]> = fwd.quantized_inputs.data().chunks_exact(seg).collect();
        cb.reactivate_dead(
            &anchors,
            &cfg.reactivation,
            cfg.seed ^ (step as u64).rotate_left(17),
        )?;
    }

    Ok(LossRecord {
        step,
        recon: losses.recon,
        codebook: losses.codebook,
        commit: losses.commit,
        total: losses.total,
        usage: cb.usage_fraction(),
    })
}

/// Codebook seeded (k-means++) from the encoder's latent segments on `data`.
pub fn init_codebook_from_encoder<X: AsRef<[f32]>>(
    ae: &LinearAe,
    data: &[X],
    k: usize,
    m: usize,
    seed: u64,
) -> Result<Codebook> {
    let seg = segment_dim(ae.d_lat, m)?;
    let mut segments = Vec::with_capacity(data.len() * m);
    for x in data {
        let x: Vec<f64> = x.as_ref().iter().map(|&v| v as f64).collect();
        if x.len() != ae.d_in {
            return Err(LoocError::DimensionMismatch {
                expected: ae.d_in,
                actual: x.len(),
            });
        }
        let z: Vec<f32> = ae.encode(&x).into_iter().map(|v| v as f32).collect();
        segments.extend(z.chunks_exact(seg).map(<[f32]>::to_vec));
    }
    Codebook::init(k, seg, &segments, seed)
}

/// Full training run. With [`BatchLayout::Independent`] each step draws
/// `cfg.batch` distinct samples (with replacement only if the dataset is
/// smaller than the batch); with a grid layout every step uses the whole
/// grid.
pub fn train<X: AsRef<[f32]>>(
    ae: &mut LinearAe,
    cb: &mut Codebook,
    data: &[X],
    layout: BatchLayout,
    cfg: &TrainConfig,
) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(LoocError::EmptySampleSet);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let record = match layout {
            BatchLayout::Grid { .. } => train_step(ae, cb, data, layout, cfg, step)?,
            BatchLayout::Independent => {
                let picks: Vec<usize> = if cfg.batch <= data.len() {
                    index::sample(&mut rng, data.len(), cfg.batch).into_vec()
                } else {
                    use rand::Rng;
                    (0..cfg.batch)
                        .map(|_| rng.random_range(0..data.len()))
                        .collect()
                };
                let batch: Vec<&[f32]> = picks.iter().map(|&i| data[i].as_ref()).collect();
                train_step(ae, cb, &batch, layout, cfg, step)?
            }
        };
        log.push(record);
    }
    Ok(log)
}

/// Loss with every stop-gradient resolved against a frozen forward pass:
/// the decoder input is `z(θ) + (ẑ₀ − z₀)`, the codebook term compares
/// `ẑ(C)` with `z₀`, and the commitment term compares `z(θ)` with `ẑ₀`.
/// Its ordinary derivatives are exactly the straight-through gradients.
#[allow(clippy::needless_range_loop)]
fn surrogate_loss(
    ae: &LinearAe,
    codevectors: &[f64],
    frozen: &Forward,
    mu: f64,
    dim: usize,
) -> f64 {
    let z_hat_c = reconstruct(&frozen.grid, codevectors, dim, frozen.beta);
    let n = frozen.x.len() as f64;
    let mut total = 0.0;
    for i in 0..frozen.x.len() {
        let z = ae.encode(&frozen.x[i]);
        let dec_in: Vec<f64> = z
            .iter()
            .zip(&frozen.z_hat[i])
            .zip(&frozen.z[i])
            .map(|((zt, zh0), z0)| zt + (zh0 - z0))
            .collect();
        let x_hat = ae.decode(&dec_in);
        total += squared_distance(&frozen.x[i], &x_hat)
            + squared_distance(&frozen.z[i], &z_hat_c[i])
            + mu * squared_distance(&z, &frozen.z_hat[i]);
    }
    total / n
}

pub const GRAD_CHECK_STEP: f64 = 1e-4;
/// Denominator floor for the relative error, so exactly-zero gradients
/// compare on an absolute scale.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Largest relative error between analytic gradients and central finite
/// differences of the stop-gradient surrogate, with code assignments frozen.
/// Codevectors are included in [`CodebookLearning::GradientLoss`] mode and
/// skipped in EMA mode, where their update is not a gradient.
pub fn grad_check<X: AsRef<[f32]>>(
    ae: &LinearAe,
    cb: &Codebook,
    batch: &[X],
    layout: BatchLayout,
    quant: &QuantConfig,
    learning: CodebookLearning,
) -> Result<f64> {
    let fwd = forward(ae, cb, batch, layout, quant)?;
    let grads = total_gradients(ae, cb, &fwd, quant.mu);
    let dim = cb.dim();
    let base_cb = codebook_f64(cb);
    let h = GRAD_CHECK_STEP;
    let rel = |analytic: f64, numeric: f64| {
        (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR)
    };
    let mut worst = 0.0f64;

    let analytic = [&grads.enc_w, &grads.enc_b, &grads.dec_w, &grads.dec_b];
    for (p, grad) in analytic.iter().enumerate() {
        for idx in 0..grad.len() {
            let mut plus = ae.clone();
            plus.params_mut()[p][idx] += h;
            let mut minus = ae.clone();
            minus.params_mut()[p][idx] -= h;
            let numeric = (surrogate_loss(&plus, &base_cb, &fwd, quant.mu, dim)
                - surrogate_loss(&minus, &base_cb, &fwd, quant.mu, dim))
                / (2.0 * h);
            worst = worst.max(rel(grad[idx], numeric));
        }
    }
    if learning == CodebookLearning::GradientLoss {
        for idx in 0..base_cb.len() {
            let mut plus = base_cb.clone();
            plus[idx] += h;
            let mut minus = base_cb.clone();
            minus[idx] -= h;
            let numeric = (surrogate_loss(ae, &plus, &fwd, quant.mu, dim)
                - surrogate_loss(ae, &minus, &fwd, quant.mu, dim))
                / (2.0 * h);
            worst = worst.max(rel(grads.codevectors[idx], numeric));
        }
    }
    Ok(worst)
}
