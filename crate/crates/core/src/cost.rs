//! Storage and compute accounting, plus the codecs that realize it.
//!
//! Codebooks cost `32 · K · d*` bits (f32 storage). Each index costs
//! `ceil(log2 K)` bits; a grid of `h × w × m` indices is packed MSB-first
//! with no gaps and zero-padded to a byte boundary.
//!
//! File layouts (little-endian integers and floats):
//!
//! ```text
//! codebook: "LOOC" | u16 version=1 | u32 K | u32 d* | u32 m | u8 metric | 3 reserved | K·d* f32
//! grid:     "LOOG" | u16 version=1 | u32 h | u32 w | u32 m | u32 K | packed indices
//! ```

use std::io::{Read, Write};

use serde::Serialize;

use crate::codebook::Codebook;
use crate::error::{LoocError, Result};
use crate::types::{CodeGrid, Metric};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CostReport {
    #[serde(rename = "codebookBits")]
    pub codebook_bits: u64,
    #[serde(rename = "indexBits")]
    pub index_bits: u64,
    #[serde(rename = "totalBits")]
    pub total_bits: u64,
    /// Similarity multiplications for one full quantization of an `h × w`
    /// map (additions excluded).
    pub multiplications: u64,
}

/// `ceil(log2 k)`, with `bits_per_index(1) == 0`.
pub fn bits_per_index(k: usize) -> u32 {
    assert!(k >= 1, "codebook size must be positive");
    usize::BITS - (k - 1).leading_zeros()
}

pub fn storage_cost(k: usize, dim: usize, m: usize, h: usize, w: usize) -> CostReport {
    let (k64, dim64, m64, hw) = (k as u64, dim as u64, m as u64, (h * w) as u64);
    let codebook_bits = 32 * k64 * dim64;
    let index_bits = hw * m64 * bits_per_index(k) as u64;
    CostReport {
        codebook_bits,
        index_bits,
        total_bits: codebook_bits + index_bits,
        multiplications: hw * m64 * k64 * dim64,
    }
}

/// Packs grid indices MSB-first at `ceil(log2 K)` bits each.
pub fn pack_indices(grid: &CodeGrid) -> Result<Vec<u8>> {
    let k = grid.k();
    let bits = bits_per_index(k);
    let total_bits = grid.indices().len() as u64 * bits as u64;
    let mut out = Vec::with_capacity(total_bits.div_ceil(8) as usize);
    let mut acc: u64 = 0;
    let mut filled = 0u32;
    for &idx in grid.indices() {
        if idx as usize >= k {
            return Err(LoocError::IndexOutOfRange {
                index: idx as usize,
                k,
            });
        }
        if bits == 0 {
            continue;
        }
        acc = (acc << bits) | idx as u64;
        filled += bits;
        while filled >= 8 {
            filled -= 8;
            out.push((acc >> filled) as u8);
        }
        acc &= (1u64 << filled) - 1;
    }
    if filled > 0 {
        out.push((acc << (8 - filled)) as u8);
    }
    Ok(out)
}

pub fn unpack_indices(bytes: &[u8], h: usize, w: usize, m: usize, k: usize) -> Result<CodeGrid> {
    if k == 0 {
        return Err(LoocError::InvalidConfig("K must be >= 1".into()));
    }
    let bits = bits_per_index(k);
    let count = h * w * m;
    let needed = (count as u64 * bits as u64).div_ceil(8) as usize;
    if bytes.len() < needed {
        return Err(LoocError::TruncatedStream {
            needed,
            available: bytes.len(),
        });
    }
    let mut indices = Vec::with_capacity(count);
    if bits == 0 {
        indices.resize(count, 0);
    } else {
        let mask = (1u64 << bits) - 1;
        let mut acc: u64 = 0;
        let mut filled = 0u32;
        let mut src = bytes.iter();
        while indices.len() < count {
            while filled < bits {
                acc = (acc << 8) | *src.next().expect("length checked") as u64;
                filled += 8;
            }
            filled -= bits;
            indices.push(((acc >> filled) & mask) as u32);
            acc &= (1u64 << filled) - 1;
        }
    }
    CodeGrid::new(h, w, m, k, indices)
}

const CODEBOOK_MAGIC: &[u8; 4] = b"LOOC";
const GRID_MAGIC: &[u8; 4] = b"LOOG";
const VERSION: u16 = 1;

/// A codebook together with the segment count and metric it was fit for.
#[derive(Debug, Clone, PartialEq)]
pub struct CodebookFile {
    pub codebook: Codebook,
    pub m: usize,
    pub metric: Metric,
}

fn u32_field(value: usize, name: &str) -> Result<u32> {
    u32::try_from(value)
        .map_err(|_| LoocError::InvalidConfig(format!("{name}={value} exceeds u32")))
}

pub fn write_codebook<W: Write>(mut out: W, file: &CodebookFile) -> Result<()> {
    let cb = &file.codebook;
    let mut buf = Vec::with_capacity(24 + cb.vectors().len() * 4);
    buf.extend_from_slice(CODEBOOK_MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&u32_field(cb.k(), "K")?.to_le_bytes());
    buf.extend_from_slice(&u32_field(cb.dim(), "dStar")?.to_le_bytes());
    buf.extend_from_slice(&u32_field(file.m, "m")?.to_le_bytes());
    buf.push(file.metric.code());
    buf.extend_from_slice(&[0; 3]);
    for v in cb.vectors() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(LoocError::TruncatedStream {
                needed: self.pos + n,
                available: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        if self.take(4)? != magic {
            return Err(LoocError::MalformedHeader(format!(
                "expected magic {:?}",
                String::from_utf8_lossy(magic)
            )));
        }
        let version = self.u16()?;
        if version != VERSION {
            return Err(LoocError::MalformedHeader(format!(
                "unsupported version {version}"
            )));
        }
        Ok(())
    }
}

pub fn read_codebook<R: Read>(mut input: R) -> Result<CodebookFile> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
    };
    cur.header(CODEBOOK_MAGIC)?;
    let k = cur.u32()?;
    let dim = cur.u32()?;
    let m = cur.u32()?;
    let metric_code = cur.take(1)?[0];
    let metric = Metric::from_code(metric_code)
        .ok_or_else(|| LoocError::MalformedHeader(format!("unknown metric code {metric_code}")))?;
    cur.take(3)?;
    if k == 0 || dim == 0 || m == 0 {
        return Err(LoocError::MalformedHeader(format!(
            "zero-sized codebook K={k} d*={dim} m={m}"
        )));
    }
    let raw = cur.take(k * dim * 4)?;
    let vectors = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok(CodebookFile {
        codebook: Codebook::from_vectors(k, dim, vectors)?,
        m,
        metric,
    })
}

pub fn write_grid<W: Write>(mut out: W, grid: &CodeGrid) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(GRID_MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for (v, name) in [
        (grid.h(), "h"),
        (grid.w(), "w"),
        (grid.m(), "m"),
        (grid.k(), "K"),
    ] {
        buf.extend_from_slice(&u32_field(v, name)?.to_le_bytes());
    }
    buf.extend(pack_indices(grid)?);
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_grid<R: Read>(mut input: R) -> Result<CodeGrid> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
    };
    cur.header(GRID_MAGIC)?;
    let (h, w, m, k) = (cur.u32()?, cur.u32()?, cur.u32()?, cur.u32()?);
    if h == 0 || w == 0 || m == 0 || k == 0 {
        return Err(LoocError::MalformedHeader(format!(
            "zero-sized grid {h}x{w}x{m} K={k}"
        )));
    }
    unpack_indices(&bytes[cur.pos..], h, w, m, k)
}
