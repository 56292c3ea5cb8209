//! Synthetic datasets and binary PGM ingestion.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{LoocError, Result};
use crate::types::FeatureMap;

/// Samples and the centres they were drawn around.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    pub samples: Vec<Vec<f32>>,
    pub centers: Vec<Vec<f32>>,
    /// Generating component of each sample.
    pub labels: Vec<usize>,
}

/// `n` draws from `components` isotropic Gaussians whose centres are
/// uniform in the unit cube and whose standard deviation is `spread`.
pub fn gen_mixture_labeled(
    n: usize,
    d: usize,
    components: usize,
    spread: f64,
    seed: u64,
) -> Result<Mixture> {
    if n == 0 || d == 0 || components == 0 {
        return Err(LoocError::InvalidConfig(format!(
            "mixture needs positive n, d, components (got {n}, {d}, {components})"
        )));
    }
    if !(spread > 0.0 && spread.is_finite()) {
        return Err(LoocError::InvalidConfig(format!(
            "spread must be positive, got {spread}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f32>> = (0..components)
        .map(|_| (0..d).map(|_| rng.random::<f32>()).collect())
        .collect();
    let mut samples = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let c = rng.random_range(0..components);
        let noise = (0..d).map(|_| StandardNormal.sample(&mut rng));
        samples.push(
            centers[c]
                .iter()
                .zip(noise)
                .map(|(&mu, e): (&f32, f64)| (mu as f64 + spread * e) as f32)
                .collect(),
        );
        labels.push(c);
    }
    Ok(Mixture {
        samples,
        centers,
        labels,
    })
}

pub fn gen_mixture(
    n: usize,
    d: usize,
    components: usize,
    spread: f64,
    seed: u64,
) -> Result<Vec<Vec<f32>>> {
    Ok(gen_mixture_labeled(n, d, components, spread, seed)?.samples)
}

/// Standard-normal white noise smoothed by a normalized box filter of radius
/// `round(smoothness)`, applied per channel with periodic boundaries so the
/// filter preserves the map's mean.
pub fn gen_correlated_map(
    h: usize,
    w: usize,
    d: usize,
    smoothness: f64,
    seed: u64,
) -> Result<FeatureMap> {
    Ok(gen_correlated_pair(h, w, d, smoothness, seed)?.1)
}

/// The raw noise and its smoothed version.
pub fn gen_correlated_pair(
    h: usize,
    w: usize,
    d: usize,
    smoothness: f64,
    seed: u64,
) -> Result<(FeatureMap, FeatureMap)> {
    if !(smoothness >= 0.0 && smoothness.is_finite()) {
        return Err(LoocError::InvalidConfig(format!(
            "smoothness must be >= 0, got {smoothness}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<f32> = (0..h * w * d)
        .map(|_| StandardNormal.sample(&mut rng))
        .map(|v: f64| v as f32)
        .collect();
    let raw = FeatureMap::from_vec(h, w, d, noise)?;
    let radius = smoothness.round() as usize;
    if radius == 0 {
        return Ok((raw.clone(), raw));
    }
    let taps = 2 * radius + 1;
    let wrap = |i: usize, off: usize, n: usize| (i + n * taps - radius + off) % n;

    let mut horiz = vec![0.0f64; h * w * d];
    for i in 0..h {
        for j in 0..w {
            for off in 0..taps {
                let src = raw.location(i, wrap(j, off, w));
                let dst = &mut horiz[(i * w + j) * d..(i * w + j + 1) * d];
                for (o, &v) in dst.iter_mut().zip(src) {
                    *o += v as f64;
                }
            }
        }
    }
    let norm = 1.0 / (taps * taps) as f64;
    let mut out = vec![0.0f32; h * w * d];
    for i in 0..h {
        for j in 0..w {
            let mut acc = vec![0.0f64; d];
            for off in 0..taps {
                let r = wrap(i, off, h);
                for (a, &v) in acc
                    .iter_mut()
                    .zip(&horiz[(r * w + j) * d..(r * w + j + 1) * d])
                {
                    *a += v;
                }
            }
            for (o, a) in out[(i * w + j) * d..(i * w + j + 1) * d]
                .iter_mut()
                .zip(acc)
            {
                *o = (a * norm) as f32;
            }
        }
    }
    Ok((raw, FeatureMap::from_vec(h, w, d, out)?))
}

fn pgm_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
        *pos += 1;
    }
    if start == *pos {
        return Err(LoocError::MalformedHeader(
            "unexpected end of PGM header".into(),
        ));
    }
    Ok(&bytes[start..*pos])
}

fn pgm_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<u32> {
    let tok = pgm_token(bytes, pos)?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse::<u32>().ok())
        .ok_or_else(|| {
            LoocError::MalformedHeader(format!("bad {what} {:?}", String::from_utf8_lossy(tok)))
        })
}

/// Parses a binary (P5) PGM into an `h × w × 1` map scaled to `[0, 1]`.
pub fn decode_pgm(bytes: &[u8]) -> Result<FeatureMap> {
    let mut pos = 0;
    let magic = pgm_token(bytes, &mut pos)?;
    if magic != b"P5" {
        return Err(LoocError::MalformedHeader(format!(
            "expected binary PGM magic P5, found {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    let width = pgm_number(bytes, &mut pos, "width")? as usize;
    let height = pgm_number(bytes, &mut pos, "height")? as usize;
    let maxval = pgm_number(bytes, &mut pos, "maxval")?;
    if width == 0 || height == 0 {
        return Err(LoocError::MalformedHeader(format!(
            "empty image {width}x{height}"
        )));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(LoocError::UnsupportedMaxval(maxval));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(LoocError::MalformedHeader(
            "missing separator after maxval".into(),
        ));
    }
    pos += 1;
    let sample_bytes = if maxval < 256 { 1 } else { 2 };
    let needed = width * height * sample_bytes;
    let raster = &bytes[pos..];
    if raster.len() < needed {
        return Err(LoocError::TruncatedPixels {
            needed,
            available: raster.len(),
        });
    }
    let scale = maxval as f32;
    let data: Vec<f32> = if sample_bytes == 1 {
        raster[..needed].iter().map(|&v| v as f32 / scale).collect()
    } else {
        raster[..needed]
            .chunks_exact(2)
            .map(|b| u16::from_be_bytes([b[0], b[1]]) as f32 / scale)
            .collect()
    };
    FeatureMap::from_vec(height, width, 1, data)
}

/// Encodes a single-channel map as an 8-bit P5 PGM, clamping to `[0, 1]`.
pub fn encode_pgm(map: &FeatureMap) -> Result<Vec<u8>> {
    if map.d() != 1 {
        return Err(LoocError::ShapeMismatch(format!(
            "PGM needs one channel, got d={}",
            map.d()
        )));
    }
    let mut out = format!("P5\n{} {}\n255\n", map.w(), map.h()).into_bytes();
    out.extend(
        map.data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    Ok(out)
}

pub fn load_pgm(path: impl AsRef<Path>) -> Result<FeatureMap> {
    decode_pgm(&fs::read(path)?)
}

pub fn save_pgm(map: &FeatureMap, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_pgm(map)?)?;
    Ok(())
}

/// Non-overlapping `p × p` patches of a single-channel image, each flattened
/// row-major into a `p²`-channel location. Trailing rows and columns that
/// do not fill a patch are dropped.
pub fn patchify(image: &FeatureMap, p: usize) -> Result<FeatureMap> {
    if image.d() != 1 {
        return Err(LoocError::ShapeMismatch(format!(
            "patchify needs one channel, got d={}",
            image.d()
        )));
    }
    if p == 0 || image.h() < p || image.w() < p {
        return Err(LoocError::InvalidConfig(format!(
            "patch size {p} does not fit a {}x{} image",
            image.h(),
            image.w()
        )));
    }
    let (ph, pw) = (image.h() / p, image.w() / p);
    let mut data = Vec::with_capacity(ph * pw * p * p);
    for bi in 0..ph {
        for bj in 0..pw {
            for di in 0..p {
                for dj in 0..p {
                    data.push(image.get(bi * p + di, bj * p + dj, 0));
                }
            }
        }
    }
    FeatureMap::from_vec(ph, pw, p * p, data)
}

/// Inverse of [`patchify`] on the cropped region.
pub fn unpatchify(patches: &FeatureMap, p: usize) -> Result<FeatureMap> {
    if p == 0 || patches.d() != p * p {
        return Err(LoocError::ShapeMismatch(format!(
            "expected {} channels for patch size {p}, got {}",
            p * p,
            patches.d()
        )));
    }
    let (h, w) = (patches.h() * p, patches.w() * p);
    let mut data = vec![0.0f32; h * w];
    for bi in 0..patches.h() {
        for bj in 0..patches.w() {
            let v = patches.location(bi, bj);
            for di in 0..p {
                for dj in 0..p {
                    data[(bi * p + di) * w + bj * p + dj] = v[di * p + dj];
                }
            }
        }
    }
    FeatureMap::from_vec(h, w, 1, data)
}
