//! Top-N accuracy, SSIM, L1 and the diagonal embedding-Fréchet distance.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::Embedding;
use crate::glyph::Glyph;

/// Cut-offs every accuracy curve is reported at.
pub const TOP_N: [usize; 5] = [1, 10, 20, 50, 100];

/// Name under which [`frechet_diag`] appears in reports.
pub const FRECHET_LABEL: &str = "embedding-Fréchet (diagonal)";

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("{0} rankings for {1} truths")]
    LengthMismatch(usize, usize),
    #[error("N must be at least 1")]
    ZeroN,
    #[error("glyph sizes differ: {0} vs {1}")]
    SizeMismatch(usize, usize),
    #[error("need at least 2 samples per set, got {0} and {1}")]
    InsufficientSamples(usize, usize),
    #[error("embedding dimensions differ")]
    DimensionMismatch,
}

/// Fraction of samples whose truth is among the first `n` labels of its
/// ranking. Empty rankings (failed queries) count as misses.
pub fn topn_accuracy(rankings: &[Vec<char>], truths: &[char], n: usize) -> Result<f64, MetricError> {
    if rankings.len() != truths.len() {
        return Err(MetricError::LengthMismatch(rankings.len(), truths.len()));
    }
    if n == 0 {
        return Err(MetricError::ZeroN);
    }
    if truths.is_empty() {
        return Ok(0.0);
    }
    Ok(hits(rankings, truths, n) as f64 / truths.len() as f64)
}

fn hits(rankings: &[Vec<char>], truths: &[char], n: usize) -> usize {
    rankings
        .iter()
        .zip(truths)
        .filter(|(r, t)| r.iter().take(n).any(|l| l == *t))
        .count()
}

/// Rank of the truth in each ranking (`None` if absent); the sufficient
/// statistic for every Top-N value.
pub fn truth_ranks(rankings: &[Vec<char>], truths: &[char]) -> Result<Vec<Option<usize>>, MetricError> {
    if rankings.len() != truths.len() {
        return Err(MetricError::LengthMismatch(rankings.len(), truths.len()));
    }
    Ok(rankings.iter().zip(truths).map(|(r, t)| r.iter().position(|l| l == t)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopNCurve {
    pub accuracy: BTreeMap<usize, f64>,
    pub sample_count: usize,
}

impl TopNCurve {
    pub fn from_rankings(rankings: &[Vec<char>], truths: &[char], ns: &[usize]) -> Result<Self, MetricError> {
        let ranks = truth_ranks(rankings, truths)?;
        Self::from_ranks(&ranks, ns)
    }

    pub fn from_ranks(ranks: &[Option<usize>], ns: &[usize]) -> Result<Self, MetricError> {
        let mut accuracy = BTreeMap::new();
        for &n in ns {
            if n == 0 {
                return Err(MetricError::ZeroN);
            }
            let h = ranks.iter().filter(|r| matches!(r, Some(p) if *p < n)).count();
            let acc = if ranks.is_empty() { 0.0 } else { h as f64 / ranks.len() as f64 };
            accuracy.insert(n, acc);
        }
        Ok(Self {
            accuracy,
            sample_count: ranks.len(),
        })
    }

    pub fn at(&self, n: usize) -> Option<f64> {
        self.accuracy.get(&n).copied()
    }

    pub fn is_monotone(&self) -> bool {
        let v: Vec<f64> = self.accuracy.values().copied().collect();
        v.windows(2).all(|w| w[0] <= w[1]) && v.iter().all(|a| (0.0..=1.0).contains(a))
    }
}

/// Normalized 1-D Gaussian of the SSIM window.
fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Mean local SSIM over all full 11×11 Gaussian windows (σ = 1.5) with
/// C1 = (0.01·L)², C2 = (0.03·L)², L = 1.
pub fn ssim(a: &Glyph, b: &Glyph) -> Result<f64, MetricError> {
    if a.size() != b.size() {
        return Err(MetricError::SizeMismatch(a.size(), b.size()));
    }
    const WIN: usize = 11;
    let (c1, c2) = (0.01f64 * 0.01, 0.03f64 * 0.03);
    let n = a.size();
    if n < WIN {
        return Err(MetricError::SizeMismatch(n, WIN));
    }
    let w = gaussian_window(WIN, 1.5);
    let pa: Vec<f64> = a.pixels().iter().map(|&p| p as f64).collect();
    let pb: Vec<f64> = b.pixels().iter().map(|&p| p as f64).collect();
    let out = n - WIN + 1;
    let mut total = 0.0f64;
    for y in 0..out {
        for x in 0..out {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (j, wy) in w.iter().enumerate() {
                for (i, wx) in w.iter().enumerate() {
                    let k = wy * wx;
                    let idx = (y + j) * n + x + i;
                    let (u, v) = (pa[idx], pb[idx]);
                    ma += k * u;
                    mb += k * v;
                    saa += k * u * u;
                    sbb += k * v * v;
                    sab += k * u * v;
                }
            }
            let va = saa - ma * ma;
            let vb = sbb - mb * mb;
            let cov = sab - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    }
    Ok(total / (out * out) as f64)
}

/// Mean absolute pixel difference.
pub fn l1(a: &Glyph, b: &Glyph) -> Result<f64, MetricError> {
    if a.size() != b.size() {
        return Err(MetricError::SizeMismatch(a.size(), b.size()));
    }
    let s: f64 = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .map(|(&x, &y)| (x as f64 - y as f64).abs())
        .sum();
    Ok(s / a.pixels().len() as f64)
}

/// Per-dimension mean and population variance.
pub fn moments(set: &[Embedding]) -> (Vec<f64>, Vec<f64>) {
    let dim = set[0].dim();
    let n = set.len() as f64;
    let mut mean = vec![0.0f64; dim];
    for e in set {
        for (m, &v) in mean.iter_mut().zip(e.values()) {
            *m += v as f64;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut var = vec![0.0f64; dim];
    for e in set {
        for ((s, &v), m) in var.iter_mut().zip(e.values()).zip(&mean) {
            *s += (v as f64 - m).powi(2);
        }
    }
    for s in &mut var {
        *s /= n;
    }
    (mean, var)
}

/// Squared Fréchet distance between diagonal Gaussians fitted to `a` and `b`.
pub fn frechet_diag(a: &[Embedding], b: &[Embedding]) -> Result<f64, MetricError> {
    if a.len() < 2 || b.len() < 2 {
        return Err(MetricError::InsufficientSamples(a.len(), b.len()));
    }
    let dim = a[0].dim();
    if a.iter().chain(b).any(|e| e.dim() != dim) {
        return Err(MetricError::DimensionMismatch);
    }
    let (ma, va) = moments(a);
    let (mb, vb) = moments(b);
    let mut d = 0.0f64;
    for i in 0..dim {
        d += (ma[i] - mb[i]).powi(2) + va[i] + vb[i] - 2.0 * (va[i] * vb[i]).sqrt();
    }
    Ok(d.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn topn_examples() {
        let r = vec![vec!['a', 'b'], vec!['b', 'a'], vec!['c'], vec![]];
        let t = vec!['a', 'a', 'c', 'z'];
        assert_eq!(topn_accuracy(&r, &t, 1).unwrap(), 0.5);
        assert_eq!(topn_accuracy(&r, &t, 10).unwrap(), 0.75);
        assert_eq!(topn_accuracy(&r, &t[..3], 1), Err(MetricError::LengthMismatch(4, 3)));
        assert_eq!(topn_accuracy(&r, &t, 0), Err(MetricError::ZeroN));
    }

    #[test]
    fn curve_is_monotone() {
        let r = vec![vec!['a', 'b'], vec!['b', 'a'], vec!['c'], vec![]];
        let t = vec!['a', 'a', 'c', 'z'];
        let c = TopNCurve::from_rankings(&r, &t, &TOP_N).unwrap();
        assert!(c.is_monotone());
        assert_eq!(c.at(1), Some(0.5));
        assert_eq!(c.at(100), Some(0.75));
        assert_eq!(c.sample_count, 4);
    }

    fn checker(n: usize) -> Glyph {
        let px = (0..n * n).map(|i| if ((i % n) / 4 + (i / n) / 4) % 2 == 0 { 1.0 } else { 0.0 }).collect();
        Glyph::from_pixels(n, px)
    }

    #[test]
    fn ssim_identity_and_inversion() {
        let x = checker(32);
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-9);
        let inv = Glyph::from_pixels(32, x.pixels().iter().map(|p| 1.0 - p).collect());
        assert!(ssim(&x, &inv).unwrap() < 0.0);
        assert_eq!(ssim(&x, &inv).unwrap(), ssim(&inv, &x).unwrap());
        assert!(ssim(&x, &Glyph::blank(16)).is_err());
    }

    #[test]
    fn l1_extremes() {
        let x = checker(16);
        assert_eq!(l1(&x, &x).unwrap(), 0.0);
        assert_eq!(l1(&Glyph::filled(16), &Glyph::blank(16)).unwrap(), 1.0);
    }

    fn e(v: &[f32]) -> Embedding {
        Embedding::from_unit(v.to_vec())
    }

    #[test]
    fn frechet_reductions() {
        let a = vec![e(&[0.0, 1.0]), e(&[0.0, -1.0])];
        assert!(frechet_diag(&a, &a).unwrap().abs() < 1e-12);
        // Same spread, means 3 apart along x: d² = 9.
        let b = vec![e(&[3.0, 1.0]), e(&[3.0, -1.0])];
        assert!((frechet_diag(&a, &b).unwrap() - 9.0).abs() < 1e-12);
        assert!(matches!(frechet_diag(&a[..1], &b), Err(MetricError::InsufficientSamples(1, 2))));
    }
}
