//! Sources of plain modern-character renders.
//!
//! Synthesis starts from per-font bitmaps of each modern character. They can
//! come from a render tree on disk (`fonts/<font_name>/<codepoint_hex>.png`,
//! produced by any external rasterizer) or from [`ProceduralFont`], a small
//! deterministic renderer that draws each component as a handful of strokes
//! and composes compound characters through their IDS layout. The procedural
//! fonts let the demo benchmark run with no font files at all.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};
use serde::{Deserialize, Serialize};

use crate::geom::Rect;
use crate::glyph::{self, Glyph, GlyphError};
use crate::ids::{self, IdsTable, IdsTree, LayoutParams};
use crate::seed;

/// File name stem for a character in render and exemplar trees.
pub fn codepoint_hex(c: char) -> String {
    format!("{:04x}", c as u32)
}

pub fn parse_codepoint_hex(s: &str) -> Option<char> {
    let s = s.trim().trim_start_matches("U+").trim_start_matches("u+");
    u32::from_str_radix(s, 16).ok().and_then(char::from_u32)
}

/// Anything that can produce plain renders of modern characters.
pub trait FontSource: Send + Sync {
    fn font_names(&self) -> Vec<String>;

    /// Normalized render of `label` in font `font`, or `None` if that font
    /// has no glyph for it.
    fn render(&self, font: usize, label: char) -> Result<Option<Glyph>, GlyphError>;

    /// Stable description used in build fingerprints.
    fn describe(&self) -> String;

    /// Every available render of `label`, in font order.
    fn renders(&self, label: char) -> Result<Vec<Glyph>, GlyphError> {
        let mut out = Vec::new();
        for font in 0..self.font_names().len() {
            if let Some(g) = self.render(font, label)? {
                out.push(g);
            }
        }
        Ok(out)
    }
}

/// One segment of a component, in unit-square coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Stroke {
    from: (f64, f64),
    to: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProceduralFont {
    pub name: String,
    /// Stroke width in pixels at full-canvas component size.
    pub stroke_px: f64,
    /// Maximum endpoint displacement as a fraction of the component box.
    pub jitter: f64,
    /// Horizontal shear applied inside each component box.
    pub slant: f64,
    pub split_ratio: f64,
    pub seed: u64,
}

impl ProceduralFont {
    /// The five styles shipped for the demo charset.
    pub fn demo_set() -> Vec<ProceduralFont> {
        let f = |name: &str, stroke_px, jitter, slant, split_ratio, seed| ProceduralFont {
            name: name.to_owned(),
            stroke_px,
            jitter,
            slant,
            split_ratio,
            seed,
        };
        vec![
            f("plain", 5.0, 0.0, 0.0, 0.5, 11),
            f("heavy", 7.0, 0.04, 0.0, 0.42, 23),
            f("light", 3.5, 0.05, 0.10, 0.58, 37),
            f("brush", 5.5, 0.08, -0.10, 0.5, 41),
            f("rounded", 4.5, 0.06, 0.05, 0.40, 53),
        ]
    }
}

/// Components drawn as strokes are chosen from a hash of the codepoint,
/// quantized to a 5-point lattice so shapes read as upright strokes.
fn component_strokes(c: char) -> Vec<Stroke> {
    const LATTICE: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];
    let mut state = seed::SplitMix64::new(seed::hash64(&[0xC0FF_EE, c as u64]));
    let mut pick = |n: usize| (state.next_u64() % n as u64) as usize;
    let count = 3 + pick(3);
    let mut strokes = Vec::with_capacity(count);
    for i in 0..count {
        // First stroke is always a straight horizontal or vertical.
        let kind = if i == 0 { pick(2) } else { pick(20) };
        let s = match kind {
            0 | 2..=7 => {
                let y = LATTICE[pick(5)];
                let a = pick(3);
                let b = a + 2 + pick(3 - a);
                Stroke {
                    from: (LATTICE[a], y),
                    to: (LATTICE[b.min(4)], y),
                }
            }
            1 | 8..=12 => {
                let x = LATTICE[pick(5)];
                let a = pick(3);
                let b = a + 2 + pick(3 - a);
                Stroke {
                    from: (x, LATTICE[a]),
                    to: (x, LATTICE[b.min(4)]),
                }
            }
            13..=15 => {
                let x = LATTICE[2 + pick(3)];
                let y = LATTICE[pick(3)];
                let d = 0.25 + 0.25 * pick(2) as f64;
                Stroke {
                    from: (x, y),
                    to: (x - d, y + d),
                }
            }
            16..=18 => {
                let x = LATTICE[pick(3)];
                let y = LATTICE[pick(3)];
                let d = 0.25 + 0.25 * pick(2) as f64;
                Stroke {
                    from: (x, y),
                    to: (x + d, y + d),
                }
            }
            _ => {
                let x = LATTICE[1 + pick(3)];
                let y = LATTICE[pick(4)];
                Stroke {
                    from: (x, y),
                    to: (x + 0.1, y + 0.15),
                }
            }
        };
        strokes.push(s);
    }
    strokes
}

struct Canvas {
    size: usize,
    ink: Vec<bool>,
}

impl Canvas {
    fn segment(&mut self, (ax, ay): (f64, f64), (bx, by): (f64, f64), width: f64) {
        let r = width / 2.0;
        let n = self.size as f64;
        let x0 = (ax.min(bx) - r).floor().max(0.0) as usize;
        let x1 = ((ax.max(bx) + r).ceil().min(n - 1.0)).max(0.0) as usize;
        let y0 = (ay.min(by) - r).floor().max(0.0) as usize;
        let y1 = ((ay.max(by) + r).ceil().min(n - 1.0)).max(0.0) as usize;
        let (dx, dy) = (bx - ax, by - ay);
        let len2 = dx * dx + dy * dy;
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let t = if len2 > 0.0 {
                    (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let (qx, qy) = (ax + t * dx - px, ay + t * dy - py);
                if qx * qx + qy * qy <= r * r {
                    self.ink[y * self.size + x] = true;
                }
            }
        }
    }
}

/// Draws characters with a [`ProceduralFont`] style, decomposing compounds
/// through an IDS table.
#[derive(Debug, Clone)]
pub struct ProceduralFonts {
    fonts: Vec<ProceduralFont>,
    table: IdsTable,
    size: usize,
}

impl ProceduralFonts {
    pub fn new(fonts: Vec<ProceduralFont>, table: IdsTable) -> Self {
        Self {
            fonts,
            table,
            size: glyph::CANVAS,
        }
    }

    pub fn with_canvas(mut self, size: usize) -> Self {
        self.size = size;
        self
    }

    pub fn fonts(&self) -> &[ProceduralFont] {
        &self.fonts
    }

    fn draw(&self, font: &ProceduralFont, c: char, rect: Rect, depth: usize, canvas: &mut Canvas) {
        if let Some(rec) = self.table.get(c) {
            if depth < 6 && !rec.tree.is_leaf() {
                self.draw_tree(font, &rec.tree, rect, depth, canvas);
                return;
            }
        }
        let (w, h) = (rect.width() as f64, rect.height() as f64);
        let extent = w.max(h);
        let width = (font.stroke_px * (extent / 80.0).clamp(0.55, 1.0)).max(1.5);
        // Leave room for the stroke itself inside the box.
        let pad = width / 2.0 + extent * 0.06;
        let (ix, iy) = (rect.x0 as f64 + pad, rect.y0 as f64 + pad);
        let (iw, ih) = ((w - 2.0 * pad).max(1.0), (h - 2.0 * pad).max(1.0));
        for (k, s) in component_strokes(c).iter().enumerate() {
            let map = |(ux, uy): (f64, f64), end: u64| {
                let jx = font.jitter * seed::signed_unit_f64(seed::hash64(&[font.seed, c as u64, k as u64, end, 0]));
                let jy = font.jitter * seed::signed_unit_f64(seed::hash64(&[font.seed, c as u64, k as u64, end, 1]));
                let (ux, uy) = ((ux + jx).clamp(0.0, 1.0), (uy + jy).clamp(0.0, 1.0));
                let sx = ux + font.slant * (0.5 - uy);
                (ix + sx * iw, iy + uy * ih)
            };
            canvas.segment(map(s.from, 0), map(s.to, 1), width);
        }
    }

    fn draw_tree(&self, font: &ProceduralFont, tree: &IdsTree, rect: Rect, depth: usize, canvas: &mut Canvas) {
        let params = LayoutParams {
            split_ratio: font.split_ratio,
            three_way_jitter: 0.0,
            ..LayoutParams::default()
        };
        let Ok(regions) = ids::layout(tree, rect, &params) else {
            return;
        };
        for (region, leaf) in regions.iter().zip(tree.leaves()) {
            self.draw(font, leaf, region.rect, depth + 1, canvas);
        }
    }

    /// Unnormalized drawing on a light background.
    pub fn raw_image(&self, font: usize, label: char) -> GrayImage {
        let mut canvas = Canvas {
            size: self.size,
            ink: vec![false; self.size * self.size],
        };
        let margin = (self.size / 16) as i32;
        let n = self.size as i32;
        self.draw(
            &self.fonts[font],
            label,
            Rect::new(margin, margin, n - margin, n - margin),
            0,
            &mut canvas,
        );
        let size = self.size;
        GrayImage::from_fn(size as u32, size as u32, |x, y| {
            Luma([if canvas.ink[y as usize * size + x as usize] { 0 } else { 255 }])
        })
    }
}

impl FontSource for ProceduralFonts {
    fn font_names(&self) -> Vec<String> {
        self.fonts.iter().map(|f| f.name.clone()).collect()
    }

    fn render(&self, font: usize, label: char) -> Result<Option<Glyph>, GlyphError> {
        if font >= self.fonts.len() {
            return Ok(None);
        }
        glyph::normalize_to(&self.raw_image(font, label), self.size).map(Some)
    }

    fn describe(&self) -> String {
        let fonts = serde_json::to_string(&self.fonts).expect("fonts serialize");
        format!("procedural:{}:{}", self.size, fonts)
    }
}

/// Pre-rendered bitmaps laid out as `<root>/<font_name>/<codepoint_hex>.png`.
#[derive(Debug, Clone)]
pub struct RenderTree {
    root: PathBuf,
    fonts: Vec<String>,
    files: Vec<BTreeMap<char, PathBuf>>,
    size: usize,
}

impl RenderTree {
    pub fn open(root: &Path) -> Result<Self, GlyphError> {
        let io = |e: std::io::Error| GlyphError::Io(format!("{}: {e}", root.display()));
        let mut dirs: Vec<PathBuf> = fs::read_dir(root)
            .map_err(io)?
            .filter_map(Result::ok)
            .map(|e| e.path())
            .filter(|p| p.is_dir())
            .collect();
        dirs.sort();
        let mut fonts = Vec::new();
        let mut files = Vec::new();
        for dir in dirs {
            let mut map = BTreeMap::new();
            for entry in fs::read_dir(&dir).map_err(io)?.filter_map(Result::ok) {
                let path = entry.path();
                let is_image = matches!(
                    path.extension().and_then(|e| e.to_str()),
                    Some("png" | "pgm" | "PNG" | "PGM")
                );
                if let (true, Some(c)) = (is_image, path.file_stem().and_then(|s| s.to_str()).and_then(parse_codepoint_hex)) {
                    map.insert(c, path);
                }
            }
            fonts.push(dir.file_name().unwrap().to_string_lossy().into_owned());
            files.push(map);
        }
        Ok(Self {
            root: root.to_owned(),
            fonts,
            files,
            size: glyph::CANVAS,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }
}

impl FontSource for RenderTree {
    fn font_names(&self) -> Vec<String> {
        self.fonts.clone()
    }

    fn render(&self, font: usize, label: char) -> Result<Option<Glyph>, GlyphError> {
        let Some(path) = self.files.get(font).and_then(|m| m.get(&label)) else {
            return Ok(None);
        };
        let img = glyph::load_raster(path)?;
        glyph::normalize_to(&img, self.size).map(Some)
    }

    fn describe(&self) -> String {
        // Content hash so that a changed bitmap changes the fingerprint.
        let mut h = Vec::new();
        for (name, map) in self.fonts.iter().zip(&self.files) {
            h.push(seed::hash_str(name));
            for (c, path) in map {
                h.push(*c as u64);
                h.push(fs::read(path).map(|b| seed::hash_bytes(&b)).unwrap_or(0));
            }
        }
        format!("tree:{}:{:016x}", self.fonts.join(","), seed::hash64(&h))
    }
}

/// Writes every render of `labels` as a render tree under `root`.
pub fn write_render_tree(source: &dyn FontSource, labels: &[char], root: &Path) -> Result<usize, GlyphError> {
    let mut written = 0;
    for (font, name) in source.font_names().iter().enumerate() {
        let dir = root.join(name);
        fs::create_dir_all(&dir).map_err(|e| GlyphError::Io(format!("{}: {e}", dir.display())))?;
        for &c in labels {
            if let Some(g) = source.render(font, c)? {
                g.save_png(&dir.join(format!("{}.png", codepoint_hex(c))))?;
                written += 1;
            }
        }
    }
    Ok(written)
}
