//! Capture-condition degradations: blur, noise, erosion and occlusion at
//! three severities.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::glyph::{self, Glyph, GlyphError};
use crate::seed;

const BLUR_SIGMA: [f64; 3] = [0.8, 1.6, 2.4];
const NOISE_SIGMA: [f64; 3] = [0.05, 0.15, 0.30];
const MASK_AREA: [f64; 3] = [0.10, 0.20, 0.35];
const CROSS: [(i32, i32); 5] = [(0, 0), (1, 0), (-1, 0), (0, 1), (0, -1)];

#[derive(Debug, Error)]
pub enum DegradationError {
    #[error("severity {0} outside 1..=3")]
    Severity(u8),
    #[error("unknown degradation kind {0:?}")]
    Kind(String),
    #[error(transparent)]
    Glyph(#[from] GlyphError),
    #[error("io: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DegradationKind {
    Blur,
    Noise,
    Erode,
    Mask,
}

impl DegradationKind {
    pub const ALL: [DegradationKind; 4] = [Self::Blur, Self::Noise, Self::Erode, Self::Mask];

    pub fn name(self) -> &'static str {
        match self {
            Self::Blur => "blur",
            Self::Noise => "noise",
            Self::Erode => "erode",
            Self::Mask => "mask",
        }
    }
}

impl fmt::Display for DegradationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DegradationKind {
    type Err = DegradationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| DegradationError::Kind(s.to_owned()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DegradationSpec {
    pub kind: DegradationKind,
    pub severity: u8,
    /// Used by Noise and Mask only.
    pub seed: u64,
}

impl DegradationSpec {
    pub fn new(kind: DegradationKind, severity: u8, seed: u64) -> Result<Self, DegradationError> {
        if !(1..=3).contains(&severity) {
            return Err(DegradationError::Severity(severity));
        }
        Ok(Self { kind, severity, seed })
    }

    /// All 12 kind × severity conditions with the given seed.
    pub fn grid(seed: u64) -> Vec<DegradationSpec> {
        DegradationKind::ALL
            .into_iter()
            .flat_map(|kind| (1..=3).map(move |severity| DegradationSpec { kind, severity, seed }))
            .collect()
    }

    pub fn condition_name(&self) -> String {
        format!("{}-{}", self.kind, self.severity)
    }
}

/// Applies one degradation. The output is not re-normalized.
pub fn degrade(g: &Glyph, spec: &DegradationSpec) -> Glyph {
    let s = (spec.severity.clamp(1, 3) - 1) as usize;
    match spec.kind {
        DegradationKind::Blur => gaussian_blur(g, BLUR_SIGMA[s]),
        DegradationKind::Noise => add_noise(g, NOISE_SIGMA[s], spec.seed),
        DegradationKind::Erode => {
            let mut out = g.binarized();
            for _ in 0..spec.severity {
                out = glyph::erode(&out, &CROSS);
            }
            out
        }
        DegradationKind::Mask => {
            let (x0, y0, w, h) = mask_rect(g.size(), MASK_AREA[s], spec.seed);
            let mut out = g.clone();
            for y in y0..y0 + h {
                for x in x0..x0 + w {
                    out.set(x, y, 0.0);
                }
            }
            out
        }
    }
}

/// Separable Gaussian with radius ⌈3σ⌉ and clamped edges.
pub fn gaussian_blur(g: &Glyph, sigma: f64) -> Glyph {
    let r = (3.0 * sigma).ceil() as i64;
    let mut kernel: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= total;
    }
    let n = g.size() as i64;
    let src: Vec<f64> = g.pixels().iter().map(|&p| p as f64).collect();
    let at = |v: i64| v.clamp(0, n - 1) as usize;
    let mut tmp = vec![0.0f64; src.len()];
    for y in 0..n {
        for x in 0..n {
            let mut s = 0.0;
            for (i, k) in kernel.iter().enumerate() {
                s += k * src[y as usize * n as usize + at(x + i as i64 - r)];
            }
            tmp[(y * n + x) as usize] = s;
        }
    }
    let mut out = vec![0.0f32; src.len()];
    for y in 0..n {
        for x in 0..n {
            let mut s = 0.0;
            for (i, k) in kernel.iter().enumerate() {
                s += k * tmp[at(y + i as i64 - r) * n as usize + x as usize];
            }
            out[(y * n + x) as usize] = s as f32;
        }
    }
    Glyph::from_pixels(g.size(), out)
}

fn add_noise(g: &Glyph, sigma: f64, seed_: u64) -> Glyph {
    let mut rng = seed::rng(seed::hash64(&[seed::domain("noise"), seed_]));
    let normal = Normal::new(0.0, sigma).expect("positive sigma");
    let out: Vec<f32> = g.pixels().iter().map(|&p| (p as f64 + normal.sample(&mut rng)) as f32).collect();
    Glyph::from_pixels(g.size(), out)
}

/// Occluder placement `(x0, y0, w, h)`: area fraction `frac` of the canvas,
/// aspect ratio w/h uniform in [0.5, 2], position uniform.
pub fn mask_rect(size: usize, frac: f64, seed_: u64) -> (usize, usize, usize, usize) {
    let mut rng = seed::rng(seed::hash64(&[seed::domain("mask"), seed_]));
    let area = frac * (size * size) as f64;
    let aspect: f64 = rng.random_range(0.5..=2.0);
    let w = ((area * aspect).sqrt().round() as usize).clamp(1, size);
    let h = ((area / w as f64).round() as usize).clamp(1, size);
    let x0 = rng.random_range(0..=size - w);
    let y0 = rng.random_range(0..=size - h);
    (x0, y0, w, h)
}

/// One output row of a degrade-suite run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteRow {
    pub src: PathBuf,
    pub kind: DegradationKind,
    pub severity: u8,
    pub seed: u64,
    pub dst: PathBuf,
}

/// Per-image seed for a suite run.
pub fn image_seed(suite_seed: u64, rel: &Path, kind: DegradationKind, severity: u8) -> u64 {
    seed::hash64(&[
        suite_seed,
        seed::hash_str(&rel.to_string_lossy()),
        kind as u64,
        severity as u64,
    ])
}

/// Normalizes every PNG/PGM under `input`, degrades it under each
/// (kind, severity) and writes `out/<kind>-<severity>/<relpath>.png` plus
/// `out/suite.tsv`. Unreadable or inkless images are skipped with a warning.
pub fn run_suite(
    input: &Path,
    kinds: &[DegradationKind],
    severities: &[u8],
    suite_seed: u64,
    out: &Path,
) -> Result<Vec<SuiteRow>, DegradationError> {
    for &s in severities {
        if !(1..=3).contains(&s) {
            return Err(DegradationError::Severity(s));
        }
    }
    let io = |p: &Path| {
        let p = p.to_path_buf();
        move |e: std::io::Error| DegradationError::Io(format!("{}: {e}", p.display()))
    };
    let mut files = Vec::new();
    collect_images(input, input, &mut files).map_err(io(input))?;
    files.sort();
    let mut rows = Vec::new();
    for rel in &files {
        let src = input.join(rel);
        let g = match glyph::load_raster(&src).and_then(|img| glyph::normalize(&img)) {
            Ok(g) => g,
            Err(e) => {
                log::warn!("skipping {}: {e}", src.display());
                continue;
            }
        };
        for &kind in kinds {
            for &severity in severities {
                let s = image_seed(suite_seed, rel, kind, severity);
                let d = degrade(&g, &DegradationSpec { kind, severity, seed: s });
                let dst_rel = PathBuf::from(format!("{kind}-{severity}")).join(rel).with_extension("png");
                let dst = out.join(&dst_rel);
                if let Some(parent) = dst.parent() {
                    fs::create_dir_all(parent).map_err(io(parent))?;
                }
                d.save_png(&dst)?;
                rows.push(SuiteRow {
                    src: rel.clone(),
                    kind,
                    severity,
                    seed: s,
                    dst: dst_rel,
                });
            }
        }
    }
    fs::create_dir_all(out).map_err(io(out))?;
    let mut tsv = String::from("#src\tkind\tseverity\tseed\tdst\n");
    for r in &rows {
        tsv.push_str(&format!(
            "{}\t{}\t{}\t{:016x}\t{}\n",
            r.src.display(),
            r.kind,
            r.severity,
            r.seed,
            r.dst.display()
        ));
    }
    let path = out.join("suite.tsv");
    fs::write(&path, tsv).map_err(io(&path))?;
    Ok(rows)
}

fn collect_images(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_images(root, &path, out)?;
        } else if matches!(
            path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
            Some("png" | "pgm")
        ) {
            out.push(path.strip_prefix(root).expect("walked under root").to_path_buf());
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stroke(width: usize) -> Glyph {
        let mut g = Glyph::blank(96);
        for y in 20..76 {
            for x in 48..48 + width {
                g.set(x, y, 1.0);
            }
        }
        g
    }

    #[test]
    fn severity_range_checked() {
        assert!(DegradationSpec::new(DegradationKind::Blur, 0, 0).is_err());
        assert!(DegradationSpec::new(DegradationKind::Blur, 4, 0).is_err());
        assert_eq!(DegradationSpec::grid(1).len(), 12);
    }

    #[test]
    fn noise_is_seeded() {
        let g = stroke(5);
        let a = degrade(&g, &DegradationSpec::new(DegradationKind::Noise, 1, 9).unwrap());
        let b = degrade(&g, &DegradationSpec::new(DegradationKind::Noise, 1, 9).unwrap());
        let c = degrade(&g, &DegradationSpec::new(DegradationKind::Noise, 1, 10).unwrap());
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.pixels().iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn erode_removes_thin_strokes() {
        let spec = DegradationSpec::new(DegradationKind::Erode, 3, 0).unwrap();
        assert!(degrade(&stroke(2), &spec).is_empty());
        // A 7-px stroke loses three pixels per side.
        let e = degrade(&stroke(7), &spec);
        assert_eq!(e.ink_bbox().unwrap().width(), 1);
    }

    #[test]
    fn erode_is_monotone_per_iteration() {
        let g = stroke(9);
        let mut prev = g.ink_count();
        for s in 1..=3 {
            let n = degrade(&g, &DegradationSpec::new(DegradationKind::Erode, s, 0).unwrap()).ink_count();
            assert!(n <= prev);
            prev = n;
        }
    }

    #[test]
    fn blur_preserves_mass_away_from_edges() {
        let g = stroke(5);
        let b = gaussian_blur(&g, 1.6);
        let before: f64 = g.pixels().iter().map(|&p| p as f64).sum();
        let after: f64 = b.pixels().iter().map(|&p| p as f64).sum();
        assert!((before - after).abs() < 1e-3 * before);
        // Seed-independent.
        let s1 = degrade(&g, &DegradationSpec::new(DegradationKind::Blur, 2, 1).unwrap());
        let s2 = degrade(&g, &DegradationSpec::new(DegradationKind::Blur, 2, 2).unwrap());
        assert_eq!(s1, s2);
    }

    #[test]
    fn mask_clears_a_rectangle() {
        let g = Glyph::filled(96);
        let m = degrade(&g, &DegradationSpec::new(DegradationKind::Mask, 2, 4).unwrap());
        let (x0, y0, w, h) = mask_rect(96, 0.20, 4);
        assert_eq!(96 * 96 - m.ink_count(), w * h);
        assert!(!m.is_ink(x0, y0) && !m.is_ink(x0 + w - 1, y0 + h - 1));
        let aspect = w as f64 / h as f64;
        assert!((0.45..=2.2).contains(&aspect));
    }

    #[test]
    fn parses_kind_names() {
        assert_eq!("Erode".parse::<DegradationKind>().unwrap(), DegradationKind::Erode);
        assert!("smudge".parse::<DegradationKind>().is_err());
    }

    #[test]
    fn suite_writes_tree_and_listing() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in");
        std::fs::create_dir_all(input.join("sub")).unwrap();
        stroke(6).save_png(&input.join("sub/a.png")).unwrap();
        Glyph::blank(96).save_png(&input.join("blank.png")).unwrap();
        let out = dir.path().join("out");
        let rows = run_suite(&input, &[DegradationKind::Blur, DegradationKind::Mask], &[1, 3], 7, &out).unwrap();
        assert_eq!(rows.len(), 4);
        assert!(out.join("mask-3/sub/a.png").exists());
        let tsv = std::fs::read_to_string(out.join("suite.tsv")).unwrap();
        assert_eq!(tsv.lines().count(), 5);
        assert!(run_suite(&input, &[DegradationKind::Blur], &[4], 7, &out).is_err());
    }
}
