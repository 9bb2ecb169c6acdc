//! Square glyph rasters and the morphology the synthesizer is built from.
//!
//! Internally every glyph is ink-positive: 1.0 is ink, 0.0 is background.
//! Images on disk use the usual dark-ink-on-light convention and are converted
//! at the boundary ([`Glyph::to_image`], [`load_raster`]).

use std::path::Path;

use image::{GrayImage, Luma};
use thiserror::Error;

use crate::geom::Rect;

/// Side length of the working canvas.
pub const CANVAS: usize = 96;

/// Ink extent after normalization, as a fraction of the canvas side.
pub const INK_EXTENT: f64 = 0.8;

#[derive(Debug, Error)]
pub enum GlyphError {
    #[error("image contains no ink after thresholding")]
    EmptyImage,
    #[error("glyph sizes differ: {0} vs {1}")]
    SizeMismatch(usize, usize),
    #[error("image io: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Glyph {
    size: usize,
    pixels: Vec<f32>,
}

impl Glyph {
    pub fn blank(size: usize) -> Self {
        Self {
            size,
            pixels: vec![0.0; size * size],
        }
    }

    pub fn filled(size: usize) -> Self {
        Self {
            size,
            pixels: vec![1.0; size * size],
        }
    }

    /// Builds a glyph from row-major intensities, clamping into `[0, 1]`.
    pub fn from_pixels(size: usize, mut pixels: Vec<f32>) -> Self {
        assert_eq!(pixels.len(), size * size, "pixel buffer does not match size");
        for p in &mut pixels {
            *p = if p.is_nan() { 0.0 } else { p.clamp(0.0, 1.0) };
        }
        Self { size, pixels }
    }

    pub fn from_mask(size: usize, mask: &[bool]) -> Self {
        assert_eq!(mask.len(), size * size);
        Self {
            size,
            pixels: mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.size + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.pixels[y * self.size + x] = v.clamp(0.0, 1.0);
    }

    #[inline]
    pub fn is_ink(&self, x: usize, y: usize) -> bool {
        self.get(x, y) >= 0.5
    }

    pub fn mask(&self) -> Vec<bool> {
        self.pixels.iter().map(|&p| p >= 0.5).collect()
    }

    pub fn ink_count(&self) -> usize {
        self.pixels.iter().filter(|&&p| p >= 0.5).count()
    }

    pub fn is_empty(&self) -> bool {
        self.ink_count() == 0
    }

    pub fn bounds(&self) -> Rect {
        Rect::square(self.size)
    }

    /// Tight bounding box of ink pixels, `None` for an empty glyph.
    pub fn ink_bbox(&self) -> Option<Rect> {
        mask_bbox(&self.mask(), self.size, self.size)
    }

    /// Dark-on-light 8-bit rendering.
    pub fn to_image(&self) -> GrayImage {
        let n = self.size as u32;
        GrayImage::from_fn(n, n, |x, y| {
            let v = self.get(x as usize, y as usize);
            Luma([255 - (v * 255.0).round() as u8])
        })
    }

    pub fn to_png_bytes(&self) -> Vec<u8> {
        let mut buf = std::io::Cursor::new(Vec::new());
        self.to_image()
            .write_to(&mut buf, image::ImageFormat::Png)
            .expect("png encoding into memory cannot fail");
        buf.into_inner()
    }

    pub fn save_png(&self, path: &Path) -> Result<(), GlyphError> {
        std::fs::write(path, self.to_png_bytes()).map_err(|e| GlyphError::Io(format!("{}: {e}", path.display())))
    }

    /// Shift by whole pixels; ink leaving the canvas is dropped.
    pub fn translate(&self, dx: i32, dy: i32) -> Glyph {
        let n = self.size as i32;
        let mut out = Glyph::blank(self.size);
        for y in 0..n {
            for x in 0..n {
                let (sx, sy) = (x - dx, y - dy);
                if sx >= 0 && sy >= 0 && sx < n && sy < n {
                    out.pixels[(y * n + x) as usize] = self.pixels[(sy * n + sx) as usize];
                }
            }
        }
        out
    }

    /// Binary view with threshold 0.5.
    pub fn binarized(&self) -> Glyph {
        Glyph {
            size: self.size,
            pixels: self.pixels.iter().map(|&p| if p >= 0.5 { 1.0 } else { 0.0 }).collect(),
        }
    }
}

fn mask_bbox(mask: &[bool], w: usize, h: usize) -> Option<Rect> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..h {
        for x in 0..w {
            if mask[y * w + x] {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    (x0 != usize::MAX).then(|| Rect::new(x0 as i32, y0 as i32, x1 as i32, y1 as i32))
}

/// Reads a PNG or binary PGM as 8-bit grayscale.
pub fn load_raster(path: &Path) -> Result<GrayImage, GlyphError> {
    let img = image::open(path).map_err(|e| GlyphError::Io(format!("{}: {e}", path.display())))?;
    Ok(img.to_luma8())
}

pub fn decode_raster(bytes: &[u8]) -> Result<GrayImage, GlyphError> {
    let img = image::load_from_memory(bytes).map_err(|e| GlyphError::Io(e.to_string()))?;
    Ok(img.to_luma8())
}

/// Otsu threshold over an 8-bit histogram. Pixels `<= t` form the dark class.
/// Returns `None` when the image has a single intensity.
pub fn otsu_threshold(img: &GrayImage) -> Option<u8> {
    let mut hist = [0u64; 256];
    for p in img.pixels() {
        hist[p.0[0] as usize] += 1;
    }
    let total: u64 = hist.iter().sum();
    if hist.iter().filter(|&&c| c > 0).count() < 2 {
        return None;
    }
    let sum_all: u64 = hist.iter().enumerate().map(|(i, &c)| i as u64 * c).sum();
    let (mut w0, mut sum0) = (0u64, 0u64);
    let (mut best_t, mut best_var) = (0u8, -1.0f64);
    for t in 0..255usize {
        w0 += hist[t];
        sum0 += t as u64 * hist[t];
        let w1 = total - w0;
        if w0 == 0 || w1 == 0 {
            continue;
        }
        let m0 = sum0 as f64 / w0 as f64;
        let m1 = (sum_all - sum0) as f64 / w1 as f64;
        let var = w0 as f64 * w1 as f64 * (m0 - m1) * (m0 - m1);
        if var > best_var {
            best_var = var;
            best_t = t as u8;
        }
    }
    Some(best_t)
}

/// Binarize, crop to ink, scale the larger side to 80% of the canvas and center.
pub fn normalize(img: &GrayImage) -> Result<Glyph, GlyphError> {
    normalize_to(img, CANVAS)
}

pub fn normalize_to(img: &GrayImage, size: usize) -> Result<Glyph, GlyphError> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let t = otsu_threshold(img).ok_or(GlyphError::EmptyImage)?;
    let dark: Vec<bool> = img.pixels().map(|p| p.0[0] <= t).collect();
    let dark_count = dark.iter().filter(|&&d| d).count();
    // Ink is the darker class unless that class is the majority.
    let ink: Vec<bool> = if dark_count * 2 <= w * h {
        dark
    } else {
        dark.iter().map(|&d| !d).collect()
    };
    normalize_mask(&ink, w, h, size)
}

/// Re-normalizes a glyph through its dark-on-light rendering.
pub fn normalize_glyph(g: &Glyph) -> Result<Glyph, GlyphError> {
    normalize_to(&g.to_image(), g.size())
}

fn normalize_mask(ink: &[bool], w: usize, h: usize, size: usize) -> Result<Glyph, GlyphError> {
    let bbox = mask_bbox(ink, w, h).ok_or(GlyphError::EmptyImage)?;
    let (bw, bh) = (bbox.width() as usize, bbox.height() as usize);
    let crop: Vec<bool> = (0..bh)
        .flat_map(|y| (0..bw).map(move |x| (x, y)))
        .map(|(x, y)| ink[(y + bbox.y0 as usize) * w + x + bbox.x0 as usize])
        .collect();
    let target = (size as f64 * INK_EXTENT).round() as usize;
    let larger = bw.max(bh);
    // Within one pixel of the target the crop is kept as is, which makes the
    // operation idempotent.
    let (scaled, sw, sh) = if larger.abs_diff(target) <= 1 && larger <= size {
        (crop, bw, bh)
    } else {
        let s = target as f64 / larger as f64;
        let sw = ((bw as f64 * s).round() as usize).clamp(1, size);
        let sh = ((bh as f64 * s).round() as usize).clamp(1, size);
        (resample_bilinear(&crop, bw, bh, sw, sh), sw, sh)
    };
    let bbox = mask_bbox(&scaled, sw, sh).ok_or(GlyphError::EmptyImage)?;
    let (cw, ch) = (bbox.width() as usize, bbox.height() as usize);
    let (ox, oy) = ((size - cw) / 2, (size - ch) / 2);
    let mut out = Glyph::blank(size);
    for y in 0..ch {
        for x in 0..cw {
            if scaled[(y + bbox.y0 as usize) * sw + x + bbox.x0 as usize] {
                out.pixels[(y + oy) * size + x + ox] = 1.0;
            }
        }
    }
    Ok(out)
}

/// Corner-aligned bilinear resampling of a binary mask, re-thresholded at 0.5.
fn resample_bilinear(src: &[bool], sw: usize, sh: usize, dw: usize, dh: usize) -> Vec<bool> {
    let at = |x: usize, y: usize| if src[y * sw + x] { 1.0f64 } else { 0.0 };
    let step = |s: usize, d: usize| if d > 1 { (s - 1) as f64 / (d - 1) as f64 } else { 0.0 };
    let (fx, fy) = (step(sw, dw), step(sh, dh));
    let mut out = vec![false; dw * dh];
    for y in 0..dh {
        let sy = y as f64 * fy;
        let y0 = (sy.floor() as usize).min(sh - 1);
        let y1 = (y0 + 1).min(sh - 1);
        let ty = sy - y0 as f64;
        for x in 0..dw {
            let sx = x as f64 * fx;
            let x0 = (sx.floor() as usize).min(sw - 1);
            let x1 = (x0 + 1).min(sw - 1);
            let tx = sx - x0 as f64;
            let top = at(x0, y0) * (1.0 - tx) + at(x1, y0) * tx;
            let bottom = at(x0, y1) * (1.0 - tx) + at(x1, y1) * tx;
            out[y * dw + x] = top * (1.0 - ty) + bottom * ty >= 0.5;
        }
    }
    out
}

/// 8-connected component labels (0 = background) and the component count.
pub fn connected_components(mask: &[bool], size: usize) -> (Vec<u32>, usize) {
    let mut labels = vec![0u32; mask.len()];
    let mut next = 0u32;
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (x, y) = ((i % size) as i32, (i / size) as i32);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= size as i32 || ny >= size as i32 {
                        continue;
                    }
                    let j = ny as usize * size + nx as usize;
                    if mask[j] && labels[j] == 0 {
                        labels[j] = next;
                        stack.push(j);
                    }
                }
            }
        }
    }
    (labels, next as usize)
}

pub fn component_count(g: &Glyph) -> usize {
    connected_components(&g.mask(), g.size()).1
}

/// Neighbours P2..P9, clockwise from north; outside the canvas is background.
#[inline]
fn neighbours(mask: &[bool], size: usize, x: usize, y: usize) -> [bool; 8] {
    let at = |dx: i32, dy: i32| {
        let (nx, ny) = (x as i32 + dx, y as i32 + dy);
        nx >= 0 && ny >= 0 && (nx as usize) < size && (ny as usize) < size && mask[ny as usize * size + nx as usize]
    };
    [
        at(0, -1),
        at(1, -1),
        at(1, 0),
        at(1, 1),
        at(0, 1),
        at(-1, 1),
        at(-1, 0),
        at(-1, -1),
    ]
}

/// Zhang–Suen thinning to a one-pixel skeleton, with the Lü–Wang
/// neighbour-count bound (3..=6) that keeps stroke ends and two-pixel
/// diagonals from eroding away.
///
/// A component whose every remaining pixel would be deleted in one
/// sub-iteration (e.g. a 2×2 block) keeps its first pixel, so the number of
/// connected components never drops.
pub fn skeletonize(g: &Glyph) -> Glyph {
    let size = g.size();
    let mut mask = g.mask();
    let (labels, count) = connected_components(&mask, size);
    let mut candidates = Vec::new();
    let mut survivors = vec![0usize; count + 1];
    loop {
        let mut changed = false;
        for pass in 0..2 {
            candidates.clear();
            for y in 0..size {
                for x in 0..size {
                    if !mask[y * size + x] {
                        continue;
                    }
                    let n = neighbours(&mask, size, x, y);
                    let b = n.iter().filter(|&&v| v).count();
                    if !(3..=6).contains(&b) {
                        continue;
                    }
                    let a = (0..8).filter(|&i| !n[i] && n[(i + 1) % 8]).count();
                    if a != 1 {
                        continue;
                    }
                    let (p2, p4, p6, p8) = (n[0], n[2], n[4], n[6]);
                    let keep = if pass == 0 {
                        (p2 && p4 && p6) || (p4 && p6 && p8)
                    } else {
                        (p2 && p4 && p8) || (p2 && p6 && p8)
                    };
                    if !keep {
                        candidates.push(y * size + x);
                    }
                }
            }
            if candidates.is_empty() {
                continue;
            }
            survivors.iter_mut().for_each(|s| *s = 0);
            for (i, &m) in mask.iter().enumerate() {
                if m {
                    survivors[labels[i] as usize] += 1;
                }
            }
            for &i in &candidates {
                survivors[labels[i] as usize] -= 1;
            }
            let mut spared = vec![false; count + 1];
            for &i in &candidates {
                let l = labels[i] as usize;
                if survivors[l] == 0 && !spared[l] {
                    spared[l] = true;
                    continue;
                }
                mask[i] = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    Glyph::from_mask(size, &mask)
}

/// Offsets of a digital disc of the given radius.
pub fn disc(radius: u32) -> Vec<(i32, i32)> {
    let r = radius as i32;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                out.push((dx, dy));
            }
        }
    }
    out
}

pub fn dilate(g: &Glyph, element: &[(i32, i32)]) -> Glyph {
    let size = g.size() as i32;
    let src = g.mask();
    let mut out = vec![false; src.len()];
    for y in 0..size {
        for x in 0..size {
            if !src[(y * size + x) as usize] {
                continue;
            }
            for &(dx, dy) in element {
                let (nx, ny) = (x + dx, y + dy);
                if nx >= 0 && ny >= 0 && nx < size && ny < size {
                    out[(ny * size + nx) as usize] = true;
                }
            }
        }
    }
    Glyph::from_mask(g.size(), &out)
}

/// Binary erosion; pixels outside the canvas count as background.
pub fn erode(g: &Glyph, element: &[(i32, i32)]) -> Glyph {
    let size = g.size() as i32;
    let src = g.mask();
    let mut out = vec![false; src.len()];
    for y in 0..size {
        for x in 0..size {
            out[(y * size + x) as usize] = element.iter().all(|&(dx, dy)| {
                let (nx, ny) = (x + dx, y + dy);
                nx >= 0 && ny >= 0 && nx < size && ny < size && src[(ny * size + nx) as usize]
            });
        }
    }
    Glyph::from_mask(g.size(), &out)
}

/// Dilate with a disc of radius `⌊width/2⌋`, giving strokes of uniform weight.
pub fn restroke(skeleton: &Glyph, width: u32) -> Glyph {
    assert!((1..=7).contains(&width), "stroke width {width} outside [1, 7]");
    if width / 2 == 0 {
        return skeleton.binarized();
    }
    dilate(skeleton, &disc(width / 2))
}

/// Share of the glyph's ink that lies inside `region`; 0 for an empty glyph.
pub fn ink_fraction(g: &Glyph, region: Rect) -> f64 {
    let region = region.intersect(&g.bounds());
    let n = g.size();
    let mut inside = 0usize;
    let mut total = 0usize;
    for y in 0..n {
        for x in 0..n {
            if g.is_ink(x, y) {
                total += 1;
                if region.contains(x as i32, y as i32) {
                    inside += 1;
                }
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        inside as f64 / total as f64
    }
}
