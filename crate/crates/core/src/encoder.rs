//! Glyph embeddings: a handcrafted reference descriptor behind the
//! [`Encoder`] trait, and the binary embedding store.
//!
//! The descriptor concatenates a 12×12 block-mean thumbnail (144), unsigned
//! gradient-orientation histograms over a 6×6 cell grid (288) and six global
//! shape statistics, then L2-normalizes the 438-vector.

use std::f64::consts::PI;
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::glyph::Glyph;

pub const DIM: usize = 438;
const BLOCKS: usize = 12;
const CELLS: usize = 6;
const BINS: usize = 8;
const SHAPE_DIMS: usize = 6;

pub const STORE_MAGIC: &[u8; 4] = b"OBSE";
pub const STORE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("glyph has no ink")]
    EmptyGlyph,
    #[error("embedding store: {0}")]
    Store(String),
    #[error("io: {0}")]
    Io(String),
}

/// A unit-norm feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    values: Vec<f32>,
}

impl Embedding {
    /// Wraps `values`, L2-normalizing them. Returns `None` for a zero vector.
    pub fn normalized(values: Vec<f32>) -> Option<Self> {
        let norm = values.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return None;
        }
        Some(Self {
            values: values.iter().map(|&v| (v as f64 / norm) as f32).collect(),
        })
    }

    /// Wraps values that are already unit-norm (e.g. read from a store).
    pub fn from_unit(values: Vec<f32>) -> Self {
        Self { values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt()
    }

    /// Cosine similarity, accumulated in f64 in index order.
    pub fn cosine(&self, other: &Embedding) -> f64 {
        dot(&self.values, &other.values)
    }
}

/// Dot product with f64 accumulation in index order. Every similarity in the
/// crate goes through here, so results are bit-stable.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        s += *x as f64 * *y as f64;
    }
    s
}

/// The shared feature extractor. Implementations must be pure and
/// deterministic; retrieval never looks inside the vectors.
pub trait Encoder: Send + Sync {
    fn id(&self) -> String;

    fn dim(&self) -> usize;

    fn embed(&self, g: &Glyph) -> Result<Embedding, EncoderError>;
}

/// Relative weights of the three descriptor parts, applied before the final
/// normalization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HandcraftedEncoder {
    pub block_weight: f64,
    pub orientation_weight: f64,
    pub shape_weight: f64,
}

impl Default for HandcraftedEncoder {
    fn default() -> Self {
        Self {
            block_weight: 1.0,
            orientation_weight: 20.0,
            shape_weight: 0.5,
        }
    }
}

impl Encoder for HandcraftedEncoder {
    fn id(&self) -> String {
        format!(
            "handcrafted-v1(b={},o={},s={})",
            self.block_weight, self.orientation_weight, self.shape_weight
        )
    }

    fn dim(&self) -> usize {
        DIM
    }

    fn embed(&self, g: &Glyph) -> Result<Embedding, EncoderError> {
        let raw = self.features(g)?;
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(EncoderError::EmptyGlyph);
        }
        Ok(Embedding {
            values: raw.iter().map(|v| (v / norm) as f32).collect(),
        })
    }
}

impl HandcraftedEncoder {
    /// The weighted, unnormalized 438-vector.
    pub fn features(&self, g: &Glyph) -> Result<Vec<f64>, EncoderError> {
        let mass: f64 = g.pixels().iter().map(|&p| p as f64).sum();
        if mass <= 0.0 {
            return Err(EncoderError::EmptyGlyph);
        }
        let mut out = Vec::with_capacity(DIM);
        out.extend(block_means(g).into_iter().map(|v| v * self.block_weight));
        out.extend(orientation_histograms(g).into_iter().map(|v| v * self.orientation_weight));
        out.extend(shape_stats(g, mass).into_iter().map(|v| v * self.shape_weight));
        debug_assert_eq!(out.len(), DIM);
        Ok(out)
    }
}

/// Cell boundaries splitting `size` pixels into `parts` near-equal spans.
fn spans(size: usize, parts: usize) -> Vec<(usize, usize)> {
    (0..parts).map(|i| (i * size / parts, (i + 1) * size / parts)).collect()
}

pub fn block_means(g: &Glyph) -> Vec<f64> {
    let n = g.size();
    let sp = spans(n, BLOCKS);
    let mut out = Vec::with_capacity(BLOCKS * BLOCKS);
    for &(y0, y1) in &sp {
        for &(x0, x1) in &sp {
            let mut s = 0.0f64;
            for y in y0..y1 {
                for x in x0..x1 {
                    s += g.get(x, y) as f64;
                }
            }
            let area = ((y1 - y0) * (x1 - x0)).max(1) as f64;
            out.push(s / area);
        }
    }
    out
}

/// Magnitude-weighted unsigned orientation histograms of central-difference
/// gradients (edge-clamped), each divided by its cell area.
pub fn orientation_histograms(g: &Glyph) -> Vec<f64> {
    let n = g.size();
    let at = |x: isize, y: isize| g.get(x.clamp(0, n as isize - 1) as usize, y.clamp(0, n as isize - 1) as usize) as f64;
    let sp = spans(n, CELLS);
    let mut out = Vec::with_capacity(CELLS * CELLS * BINS);
    for &(y0, y1) in &sp {
        for &(x0, x1) in &sp {
            let mut hist = [0.0f64; BINS];
            for y in y0..y1 {
                for x in x0..x1 {
                    let (xi, yi) = (x as isize, y as isize);
                    let gx = 0.5 * (at(xi + 1, yi) - at(xi - 1, yi));
                    let gy = 0.5 * (at(xi, yi + 1) - at(xi, yi - 1));
                    let mag = (gx * gx + gy * gy).sqrt();
                    if mag == 0.0 {
                        continue;
                    }
                    let theta = gy.atan2(gx).rem_euclid(PI);
                    let bin = ((theta / PI * BINS as f64) as usize).min(BINS - 1);
                    hist[bin] += mag;
                }
            }
            let area = ((y1 - y0) * (x1 - x0)).max(1) as f64;
            out.extend(hist.iter().map(|h| h / area));
        }
    }
    out
}

/// Ink fraction, centroid and second central moments in canvas-normalized
/// coordinates. Moments are scaled by 12 so a uniform fill gives 1.
pub fn shape_stats(g: &Glyph, mass: f64) -> [f64; SHAPE_DIMS] {
    let n = g.size();
    let nf = n as f64;
    let (mut sx, mut sy) = (0.0f64, 0.0f64);
    for y in 0..n {
        for x in 0..n {
            let p = g.get(x, y) as f64;
            sx += p * (x as f64 + 0.5);
            sy += p * (y as f64 + 0.5);
        }
    }
    let (cx, cy) = (sx / mass, sy / mass);
    let (mut m20, mut m02, mut m11) = (0.0f64, 0.0f64, 0.0f64);
    for y in 0..n {
        for x in 0..n {
            let p = g.get(x, y) as f64;
            let (dx, dy) = ((x as f64 + 0.5 - cx) / nf, (y as f64 + 0.5 - cy) / nf);
            m20 += p * dx * dx;
            m02 += p * dy * dy;
            m11 += p * dx * dy;
        }
    }
    [
        mass / (nf * nf),
        cx / nf,
        cy / nf,
        12.0 * m20 / mass,
        12.0 * m02 / mass,
        12.0 * m11 / mass,
    ]
}

/// Writes `count × dim` row-major values in the `OBSE` store format.
pub fn write_store(path: &Path, dim: usize, values: &[f32]) -> Result<(), EncoderError> {
    let io = |e: std::io::Error| EncoderError::Io(format!("{}: {e}", path.display()));
    if dim == 0 || values.len() % dim != 0 {
        return Err(EncoderError::Store(format!("{} values do not fill rows of {dim}", values.len())));
    }
    let mut w = BufWriter::new(fs::File::create(path).map_err(io)?);
    w.write_all(STORE_MAGIC).map_err(io)?;
    w.write_all(&STORE_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(dim as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&((values.len() / dim) as u64).to_le_bytes()).map_err(io)?;
    for v in values {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Reads a store, returning `(dim, values)`.
pub fn read_store(path: &Path) -> Result<(usize, Vec<f32>), EncoderError> {
    let io = |e: std::io::Error| EncoderError::Io(format!("{}: {e}", path.display()));
    let mut bytes = Vec::new();
    fs::File::open(path).map_err(io)?.read_to_end(&mut bytes).map_err(io)?;
    decode_store(&bytes)
}

pub fn decode_store(bytes: &[u8]) -> Result<(usize, Vec<f32>), EncoderError> {
    let bad = |m: &str| EncoderError::Store(m.to_owned());
    if bytes.len() < 20 || &bytes[..4] != STORE_MAGIC {
        return Err(bad("missing OBSE header"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != STORE_VERSION {
        return Err(EncoderError::Store(format!("unsupported version {version}")));
    }
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = &bytes[20..];
    if dim == 0 || count.checked_mul(dim).and_then(|n| n.checked_mul(4)) != Some(body.len()) {
        return Err(bad("body length does not match header"));
    }
    let values = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((dim, values))
}
