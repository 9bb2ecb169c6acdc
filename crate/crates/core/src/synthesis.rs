//! Variant synthesis: the two-stage generator that fills the dictionary.
//!
//! Stage one ([`fad_draft`]) turns a multi-font modern render into a
//! simplified incised-style draft: a jittered affine pose, thinning, spur
//! pruning and re-stroking at a uniform weight. Stage two ([`sr_refine`])
//! perturbs the draft component by component, using the character's IDS
//! layout to bound every change: branch attrition, stroke merging, elastic
//! warping and small per-component shifts, resampled until each component
//! keeps at least `containment_min` of its ink share.
//!
//! Both stages sit behind [`VariantGenerator`] so a learned backend can be
//! dropped in without touching retrieval or evaluation.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::font::{self, FontSource};
use crate::geom::Rect;
use crate::glyph::{self, Glyph, GlyphError};
use crate::ids::{self, IdsError, IdsTree, LayoutParams};
use crate::seed;

#[derive(Debug, Error)]
pub enum SynthesisError {
    #[error("character {label}: no font renders")]
    NoRenders { label: char },
    #[error("character {label}: pruning removed all ink")]
    EmptyDraft { label: char },
    #[error("containment unsatisfiable for leaf {leaf_index} after {attempts} attempts")]
    ContainmentUnsatisfiable { leaf_index: usize, attempts: u32 },
    #[error("variant {variant_index} of {label}: {source}")]
    Variant {
        label: char,
        variant_index: u32,
        #[source]
        source: Box<SynthesisError>,
    },
    #[error("duplicate label {0} in charset")]
    DuplicateLabel(char),
    #[error("invalid refinement parameters: {0}")]
    InvalidParams(String),
    #[error("layout: {0}")]
    Layout(#[from] IdsError),
    #[error("glyph: {0}")]
    Glyph(#[from] GlyphError),
    #[error("entry id collision between {0} and {1}")]
    IdCollision(String, String),
    #[error("dictionary build failed for {} character(s)", .0.failed_labels.len())]
    BuildFailed(BuildReport),
    #[error("dictionary io: {0}")]
    Io(String),
    #[error("malformed dictionary: {0}")]
    Format(String),
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> SynthesisError + '_ {
    move |e| SynthesisError::Io(format!("{}: {e}", path.display()))
}

/// Inputs for one modern character.
#[derive(Debug, Clone)]
pub struct CharSpec {
    pub label: char,
    pub ids: IdsTree,
    pub font_renders: Vec<Glyph>,
}

impl CharSpec {
    pub fn new(label: char, ids: IdsTree, font_renders: Vec<Glyph>) -> Result<Self, SynthesisError> {
        if font_renders.is_empty() {
            return Err(SynthesisError::NoRenders { label });
        }
        Ok(Self { label, ids, font_renders })
    }
}

/// Build specs for `labels` from an IDS table and a font source. Labels
/// missing from the table fall back to a single-leaf IDS.
pub fn char_specs(
    labels: &[char],
    table: &ids::IdsTable,
    fonts: &dyn FontSource,
) -> Result<Vec<CharSpec>, SynthesisError> {
    labels
        .par_iter()
        .map(|&label| {
            let tree = table.get(label).map(|r| r.tree.clone()).unwrap_or(IdsTree::Leaf(label));
            CharSpec::new(label, tree, fonts.renders(label)?)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SrParams {
    pub attrition_prob: f64,
    pub merge_radius: u32,
    pub warp_amplitude: f64,
    pub region_jitter: u32,
    pub containment_min: f64,
}

impl SrParams {
    pub const fn identity() -> Self {
        Self {
            attrition_prob: 0.0,
            merge_radius: 0,
            warp_amplitude: 0.0,
            region_jitter: 0,
            containment_min: DEFAULT_CONTAINMENT_MIN,
        }
    }

    pub fn validate(&self) -> Result<(), SynthesisError> {
        let bad = |m: String| Err(SynthesisError::InvalidParams(m));
        if !(0.0..=1.0).contains(&self.attrition_prob) {
            return bad(format!("attrition_prob {}", self.attrition_prob));
        }
        if !(0.5..=1.0).contains(&self.containment_min) {
            return bad(format!("containment_min {} below 0.5", self.containment_min));
        }
        if !(0.0..=6.0).contains(&self.warp_amplitude) {
            return bad(format!("warp_amplitude {} above 6", self.warp_amplitude));
        }
        if self.region_jitter > 5 {
            return bad(format!("region_jitter {} above 5", self.region_jitter));
        }
        if self.merge_radius > 6 {
            return bad(format!("merge_radius {} above 6", self.merge_radius));
        }
        Ok(())
    }

    /// Scale every perturbation by its own factor, clamped back into range.
    pub fn scaled(&self, f: [f64; 4]) -> Self {
        Self {
            attrition_prob: (self.attrition_prob * f[0]).clamp(0.0, 1.0),
            merge_radius: (self.merge_radius as f64 * f[1]).round().clamp(0.0, 6.0) as u32,
            warp_amplitude: (self.warp_amplitude * f[2]).clamp(0.0, 6.0),
            region_jitter: (self.region_jitter as f64 * f[3]).round().clamp(0.0, 5.0) as u32,
            containment_min: self.containment_min,
        }
    }
}

pub const DEFAULT_CONTAINMENT_MIN: f64 = 0.7;
pub const DEFAULT_VARIANTS: usize = 8;
const MAX_DRAFT_RETRIES: u32 = 8;
const MAX_REGION_ATTEMPTS: u32 = 8;

/// Per-variant-index perturbation strengths: index 0 is the clean anchor,
/// the rest ramp linearly from mild to strong.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SrSchedule {
    pub attrition: (f64, f64),
    pub warp: (f64, f64),
    pub jitter: (f64, f64),
    pub merge: (f64, f64),
    pub containment_min: f64,
}

impl Default for SrSchedule {
    fn default() -> Self {
        Self {
            attrition: (0.05, 0.30),
            warp: (1.0, 4.0),
            jitter: (0.0, 3.0),
            merge: (0.0, 2.0),
            containment_min: DEFAULT_CONTAINMENT_MIN,
        }
    }
}

impl SrSchedule {
    pub fn params(&self, variant_index: usize, k: usize) -> SrParams {
        if variant_index == 0 {
            return SrParams {
                containment_min: self.containment_min,
                ..SrParams::identity()
            };
        }
        let t = if k > 2 {
            (variant_index - 1) as f64 / (k - 2) as f64
        } else {
            0.0
        };
        let lerp = |(a, b): (f64, f64)| a + (b - a) * t;
        SrParams {
            attrition_prob: lerp(self.attrition),
            merge_radius: lerp(self.merge).round() as u32,
            warp_amplitude: lerp(self.warp),
            region_jitter: lerp(self.jitter).round() as u32,
            containment_min: self.containment_min,
        }
    }
}

/// Stage-one settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DraftConfig {
    pub max_rotation_deg: f64,
    pub max_shear: f64,
    pub scale_range: (f64, f64),
    /// Skeleton spurs shorter than this many pixels are pruned.
    pub prune_length: usize,
    pub stroke_widths: Vec<u32>,
}

impl Default for DraftConfig {
    fn default() -> Self {
        Self {
            max_rotation_deg: 6.0,
            max_shear: 0.08,
            scale_range: (0.92, 1.08),
            prune_length: 4,
            stroke_widths: vec![6, 7],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DraftTrace {
    pub font_index: usize,
    pub rotation_deg: f64,
    pub shear: f64,
    pub scale: f64,
    pub stroke_width: u32,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionShare {
    pub leaf_index: usize,
    pub rect: Rect,
    /// Ink share of the region in the draft.
    pub draft_share: f64,
    /// Ink share of the region in the refined glyph, before re-normalization.
    pub refined_share: f64,
    pub attempts: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTrace {
    pub draft: DraftTrace,
    pub sr: SrParams,
    pub regions: Vec<RegionShare>,
    /// Set when the variant is a clean-anchor substitute for a failed one.
    #[serde(default)]
    pub fallback: bool,
}

/// Output of stage two, with the intermediate needed for audits.
#[derive(Debug, Clone)]
pub struct Refined {
    pub glyph: Glyph,
    /// Composite before re-normalization.
    pub composite: Glyph,
    pub regions: Vec<RegionShare>,
}

/// The two-stage generator interface.
pub trait VariantGenerator: Send + Sync {
    fn id(&self) -> String;

    fn draft(&self, spec: &CharSpec, seed: u64) -> Result<(Glyph, DraftTrace), SynthesisError>;

    fn refine(&self, draft: &Glyph, ids: &IdsTree, params: &SrParams, seed: u64) -> Result<Refined, SynthesisError>;
}

/// The deterministic procedural reference backend.
#[derive(Debug, Clone, Default)]
pub struct ProceduralGenerator {
    pub draft: DraftConfig,
    pub layout: LayoutParams,
}

impl VariantGenerator for ProceduralGenerator {
    fn id(&self) -> String {
        "procedural-v1".to_owned()
    }

    fn draft(&self, spec: &CharSpec, seed: u64) -> Result<(Glyph, DraftTrace), SynthesisError> {
        draft_with_retries(spec, seed, &self.draft)
    }

    fn refine(&self, draft: &Glyph, ids: &IdsTree, params: &SrParams, seed: u64) -> Result<Refined, SynthesisError> {
        sr_refine_traced(draft, ids, params, seed, &self.layout)
    }
}

/// Inverse-mapped affine pose about the canvas center, nearest neighbour.
fn affine(g: &Glyph, rotation_deg: f64, shear: f64, scale: f64) -> Glyph {
    let n = g.size();
    let c = n as f64 / 2.0;
    let (s, co) = rotation_deg.to_radians().sin_cos();
    // Forward: scale · rotate · shear. Inverse applied per destination pixel.
    let (a, b, cc, d) = (scale * co, scale * (co * shear - s), scale * s, scale * (s * shear + co));
    let det = a * d - b * cc;
    let (ia, ib, ic, id) = (d / det, -b / det, -cc / det, a / det);
    let mut out = Glyph::blank(n);
    for y in 0..n {
        for x in 0..n {
            let (u, v) = (x as f64 + 0.5 - c, y as f64 + 0.5 - c);
            let sx = (ia * u + ib * v + c - 0.5).round();
            let sy = (ic * u + id * v + c - 0.5).round();
            if sx >= 0.0 && sy >= 0.0 && (sx as usize) < n && (sy as usize) < n && g.is_ink(sx as usize, sy as usize) {
                out.set(x, y, 1.0);
            }
        }
    }
    out
}

fn skeleton_degree(mask: &[bool], size: usize, x: usize, y: usize) -> usize {
    let mut n = 0;
    for dy in -1i32..=1 {
        for dx in -1i32..=1 {
            if dx == 0 && dy == 0 {
                continue;
            }
            let (nx, ny) = (x as i32 + dx, y as i32 + dy);
            if nx >= 0 && ny >= 0 && (nx as usize) < size && (ny as usize) < size && mask[ny as usize * size + nx as usize] {
                n += 1;
            }
        }
    }
    n
}

/// Removes spurs shorter than `min_len` that hang off a junction, and whole
/// skeleton components smaller than `min_len`.
pub fn prune_spurs(skeleton: &Glyph, min_len: usize) -> Glyph {
    let size = skeleton.size();
    let mut mask = skeleton.mask();
    let endpoints: Vec<usize> = (0..mask.len())
        .filter(|&i| mask[i] && skeleton_degree(&mask, size, i % size, i / size) == 1)
        .collect();
    let mut remove = Vec::new();
    for start in endpoints {
        let mut path = vec![start];
        let mut prev = usize::MAX;
        let mut cur = start;
        let mut hit_junction = false;
        while path.len() <= min_len {
            let (x, y) = (cur % size, cur / size);
            let next: Vec<usize> = neighbours8(size, x, y)
                .filter(|&j| mask[j] && j != prev && !path.contains(&j))
                .collect();
            match next.len() {
                0 => break,
                1 => {
                    let j = next[0];
                    if skeleton_degree(&mask, size, j % size, j / size) >= 3 {
                        // A corner pixel beside the branch it hangs off still
                        // belongs to the spur; a true junction separates its
                        // remaining neighbours.
                        let rest: Vec<usize> = neighbours8(size, j % size, j / size)
                            .filter(|&k| mask[k] && k != cur && !path.contains(&k))
                            .collect();
                        if !mutually_connected(&rest, size) {
                            hit_junction = true;
                            break;
                        }
                        path.push(j);
                        hit_junction = true;
                        break;
                    }
                    prev = cur;
                    cur = j;
                    path.push(j);
                }
                _ => {
                    hit_junction = true;
                    break;
                }
            }
        }
        if hit_junction && path.len() < min_len {
            remove.extend(path);
        }
    }
    for i in remove {
        mask[i] = false;
    }
    let (labels, count) = glyph::connected_components(&mask, size);
    let mut sizes = vec![0usize; count + 1];
    for &l in &labels {
        sizes[l as usize] += 1;
    }
    for (i, m) in mask.iter_mut().enumerate() {
        if *m && sizes[labels[i] as usize] < min_len {
            *m = false;
        }
    }
    Glyph::from_mask(size, &mask)
}

fn mutually_connected(points: &[usize], size: usize) -> bool {
    if points.is_empty() {
        return true;
    }
    let adjacent = |a: usize, b: usize| {
        let (ax, ay, bx, by) = ((a % size) as i32, (a / size) as i32, (b % size) as i32, (b / size) as i32);
        (ax - bx).abs() <= 1 && (ay - by).abs() <= 1
    };
    let mut seen = vec![false; points.len()];
    let mut stack = vec![0];
    seen[0] = true;
    while let Some(i) = stack.pop() {
        for j in 0..points.len() {
            if !seen[j] && adjacent(points[i], points[j]) {
                seen[j] = true;
                stack.push(j);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

fn neighbours8(size: usize, x: usize, y: usize) -> impl Iterator<Item = usize> {
    let (x, y) = (x as i32, y as i32);
    (-1i32..=1)
        .flat_map(move |dy| (-1i32..=1).map(move |dx| (x + dx, y + dy)))
        .filter(move |&(nx, ny)| (nx, ny) != (x, y) && nx >= 0 && ny >= 0 && nx < size as i32 && ny < size as i32)
        .map(move |(nx, ny)| ny as usize * size + nx as usize)
}

/// Stage one for a single seed.
pub fn fad_draft(spec: &CharSpec, seed: u64, cfg: &DraftConfig) -> Result<(Glyph, DraftTrace), SynthesisError> {
    let mut rng = seed::rng(seed);
    let font_index = rng.random_range(0..spec.font_renders.len());
    let rotation_deg = rng.random_range(-cfg.max_rotation_deg..=cfg.max_rotation_deg);
    let shear = rng.random_range(-cfg.max_shear..=cfg.max_shear);
    let scale = rng.random_range(cfg.scale_range.0..=cfg.scale_range.1);
    let stroke_width = cfg.stroke_widths[rng.random_range(0..cfg.stroke_widths.len())];
    let posed = affine(&spec.font_renders[font_index], rotation_deg, shear, scale);
    let skeleton = prune_spurs(&glyph::skeletonize(&posed), cfg.prune_length);
    if skeleton.is_empty() {
        return Err(SynthesisError::EmptyDraft { label: spec.label });
    }
    let draft = glyph::normalize_glyph(&glyph::restroke(&skeleton, stroke_width))
        .map_err(|_| SynthesisError::EmptyDraft { label: spec.label })?;
    Ok((
        draft,
        DraftTrace {
            font_index,
            rotation_deg,
            shear,
            scale,
            stroke_width,
            seed,
        },
    ))
}

/// Stage one, retrying empty drafts with derived seeds.
pub fn draft_with_retries(spec: &CharSpec, seed: u64, cfg: &DraftConfig) -> Result<(Glyph, DraftTrace), SynthesisError> {
    let mut last = None;
    for attempt in 0..=MAX_DRAFT_RETRIES {
        let s = if attempt == 0 { seed } else { seed::hash64(&[seed, attempt as u64]) };
        match fad_draft(spec, s, cfg) {
            Ok(d) => return Ok(d),
            Err(e @ SynthesisError::EmptyDraft { .. }) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.unwrap())
}

/// Stage two. See [`sr_refine_traced`] for the audit trail.
pub fn sr_refine(draft: &Glyph, ids: &IdsTree, params: &SrParams, seed: u64) -> Result<Glyph, SynthesisError> {
    sr_refine_traced(draft, ids, params, seed, &LayoutParams::default()).map(|r| r.glyph)
}

pub fn sr_refine_traced(
    draft: &Glyph,
    ids: &IdsTree,
    params: &SrParams,
    seed: u64,
    layout_params: &LayoutParams,
) -> Result<Refined, SynthesisError> {
    params.validate()?;
    let size = draft.size();
    let bbox = draft.ink_bbox().ok_or(GlyphError::EmptyImage)?;
    let lp = LayoutParams {
        jitter_seed: seed,
        ..*layout_params
    };
    let regions = ids::layout(ids, bbox, &lp)?;
    let draft_shares: Vec<f64> = regions.iter().map(|r| glyph::ink_fraction(draft, r.rect)).collect();

    // Each ink pixel belongs to the smallest region box that contains it.
    let mut owner = vec![usize::MAX; size * size];
    for y in 0..size {
        for x in 0..size {
            if !draft.is_ink(x, y) {
                continue;
            }
            let best = regions
                .iter()
                .filter(|r| r.rect.contains(x as i32, y as i32))
                .min_by_key(|r| (r.rect.area(), r.leaf_index));
            if let Some(r) = best {
                owner[y * size + x] = r.leaf_index;
            }
        }
    }
    let contents: Vec<Vec<bool>> = (0..regions.len())
        .map(|i| owner.iter().map(|&o| o == i).collect())
        .collect();

    let mut attempts = vec![0u32; regions.len()];
    let mut pieces: Vec<Vec<bool>> = contents
        .iter()
        .enumerate()
        .map(|(i, c)| perturb_region(c, size, regions[i].rect, params, seed::hash64(&[seed, i as u64, 0])))
        .collect();
    loop {
        let mut composite = vec![false; size * size];
        for p in &pieces {
            for (c, &v) in composite.iter_mut().zip(p) {
                *c |= v;
            }
        }
        let composite = Glyph::from_mask(size, &composite);
        let shares: Vec<f64> = regions.iter().map(|r| glyph::ink_fraction(&composite, r.rect)).collect();
        let violators: Vec<usize> = (0..regions.len())
            .filter(|&i| shares[i] < params.containment_min * draft_shares[i])
            .collect();
        if violators.is_empty() {
            let glyph = glyph::normalize_glyph(&composite)?;
            let regions = regions
                .iter()
                .enumerate()
                .map(|(i, r)| RegionShare {
                    leaf_index: r.leaf_index,
                    rect: r.rect,
                    draft_share: draft_shares[i],
                    refined_share: shares[i],
                    attempts: attempts[i] + 1,
                })
                .collect();
            return Ok(Refined {
                glyph,
                composite,
                regions,
            });
        }
        for i in violators {
            attempts[i] += 1;
            if attempts[i] >= MAX_REGION_ATTEMPTS {
                return Err(SynthesisError::ContainmentUnsatisfiable {
                    leaf_index: i,
                    attempts: attempts[i],
                });
            }
            pieces[i] = perturb_region(
                &contents[i],
                size,
                regions[i].rect,
                params,
                seed::hash64(&[seed, i as u64, attempts[i] as u64]),
            );
        }
    }
}

fn perturb_region(content: &[bool], size: usize, rect: Rect, p: &SrParams, seed: u64) -> Vec<bool> {
    let mut rng = seed::rng(seed);
    let mut g = Glyph::from_mask(size, content);
    if g.is_empty() {
        return content.to_vec();
    }
    if p.attrition_prob > 0.0 {
        g = attrition(&g, p.attrition_prob, &mut rng);
    }
    if p.merge_radius > 0 {
        let d = glyph::disc(p.merge_radius);
        g = glyph::erode(&glyph::dilate(&g, &d), &d);
    }
    if p.warp_amplitude > 0.0 {
        g = elastic_warp(&g, rect, p.warp_amplitude, &mut rng);
    }
    if p.region_jitter > 0 {
        let j = p.region_jitter as i32;
        let (dx, dy) = (rng.random_range(-j..=j), rng.random_range(-j..=j));
        g = g.translate(dx, dy);
    }
    g.mask()
}

/// Drops whole skeleton branches, erasing the ink around them that no
/// surviving branch also covers.
fn attrition(g: &Glyph, prob: f64, rng: &mut impl Rng) -> Glyph {
    let size = g.size();
    let skel = glyph::skeletonize(g);
    let skel_mask = skel.mask();
    let skel_len = skel.ink_count().max(1);
    let radius = ((g.ink_count() as f64 / skel_len as f64) / 2.0).ceil() as u32 + 1;
    let branches: Vec<bool> = (0..skel_mask.len())
        .map(|i| skel_mask[i] && skeleton_degree(&skel_mask, size, i % size, i / size) < 3)
        .collect();
    let (labels, count) = glyph::connected_components(&branches, size);
    let dropped: Vec<bool> = (0..=count).map(|l| l > 0 && rng.random_bool(prob)).collect();
    if !dropped.iter().any(|&d| d) {
        return g.clone();
    }
    let removed: Vec<bool> = labels.iter().map(|&l| dropped[l as usize]).collect();
    let kept: Vec<bool> = skel_mask.iter().zip(&removed).map(|(&s, &r)| s && !r).collect();
    let d = glyph::disc(radius);
    let near_removed = glyph::dilate(&Glyph::from_mask(size, &removed), &d).mask();
    let near_kept = glyph::dilate(&Glyph::from_mask(size, &kept), &d).mask();
    let mask: Vec<bool> = g
        .mask()
        .iter()
        .enumerate()
        .map(|(i, &m)| m && !(near_removed[i] && !near_kept[i]))
        .collect();
    Glyph::from_mask(size, &mask)
}

/// Smooth displacement from two low-frequency sinusoids per axis, bounded
/// by `amplitude` pixels.
fn elastic_warp(g: &Glyph, rect: Rect, amplitude: f64, rng: &mut impl Rng) -> Glyph {
    use std::f64::consts::TAU;
    let size = g.size();
    let extent = rect.width().max(rect.height()).max(8) as f64;
    let mut wave = || {
        let fx = TAU / (extent * rng.random_range(0.6..1.6));
        let fy = TAU / (extent * rng.random_range(0.6..1.6));
        let phase = rng.random_range(0.0..TAU);
        (fx, fy, phase)
    };
    let (ax, bx, ay, by) = (wave(), wave(), wave(), wave());
    let field = |w: (f64, f64, f64), x: f64, y: f64| (w.0 * x + w.1 * y + w.2).sin();
    let mut out = Glyph::blank(size);
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64, y as f64);
            let dx = amplitude * 0.5 * (field(ax, fx, fy) + field(bx, fy, fx));
            let dy = amplitude * 0.5 * (field(ay, fx, fy) + field(by, fy, fx));
            let (sx, sy) = ((fx - dx).round(), (fy - dy).round());
            if sx >= 0.0 && sy >= 0.0 && (sx as usize) < size && (sy as usize) < size && g.is_ink(sx as usize, sy as usize) {
                out.set(x, y, 1.0);
            }
        }
    }
    out
}

/// One synthesized variant.
#[derive(Debug, Clone, PartialEq)]
pub struct DictionaryEntry {
    pub entry_id: u64,
    pub label: char,
    pub variant_index: u32,
    pub glyph: Glyph,
    pub seed: u64,
    pub stage_trace: StageTrace,
}

pub fn entry_id(label: char, variant_index: u32, global_seed: u64) -> u64 {
    seed::hash64(&[label as u64, variant_index as u64, global_seed])
}

pub fn entry_seed(global_seed: u64, label: char, variant_index: u32) -> u64 {
    seed::hash64(&[global_seed, label as u64, variant_index as u64])
}

const DRAFT_STREAM: u64 = 0xD4AF_7000;
const REFINE_STREAM: u64 = 0x5EF1_9E00;

/// Both stages for one variant with explicit seed and parameters.
pub fn generate_one(
    spec: &CharSpec,
    generator: &dyn VariantGenerator,
    entry_seed: u64,
    params: &SrParams,
) -> Result<(Glyph, StageTrace), SynthesisError> {
    let (draft, draft_trace) = generator.draft(spec, seed::hash64(&[entry_seed, DRAFT_STREAM]))?;
    let refined = generator.refine(&draft, &spec.ids, params, seed::hash64(&[entry_seed, REFINE_STREAM]))?;
    Ok((
        refined.glyph,
        StageTrace {
            draft: draft_trace,
            sr: *params,
            regions: refined.regions,
            fallback: false,
        },
    ))
}

/// `k` variants of one character. Each variant's seed depends only on
/// `(global_seed, label, index)`, so the result is independent of scheduling.
pub fn generate_variants(
    spec: &CharSpec,
    k: usize,
    global_seed: u64,
    generator: &dyn VariantGenerator,
    schedule: &SrSchedule,
) -> Result<Vec<DictionaryEntry>, SynthesisError> {
    assert!(k >= 1, "at least one variant per character");
    (0..k as u32)
        .into_par_iter()
        .map(|i| {
            let s = entry_seed(global_seed, spec.label, i);
            let params = schedule.params(i as usize, k);
            generate_one(spec, generator, s, &params)
                .map(|(glyph, stage_trace)| DictionaryEntry {
                    entry_id: entry_id(spec.label, i, global_seed),
                    label: spec.label,
                    variant_index: i,
                    glyph,
                    seed: s,
                    stage_trace,
                })
                .map_err(|e| SynthesisError::Variant {
                    label: spec.label,
                    variant_index: i,
                    source: Box::new(e),
                })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DictionaryConfig {
    pub variants_per_label: usize,
    pub global_seed: u64,
    pub schedule: SrSchedule,
    pub draft: DraftConfig,
    pub layout: LayoutParams,
    pub generator_id: String,
    pub font_source: String,
    pub font_count: usize,
    /// Render tree the fonts came from; `None` for the built-in procedural fonts.
    #[serde(default)]
    pub font_dir: Option<PathBuf>,
    /// IDS table the specs came from; `None` for the bundled table.
    #[serde(default)]
    pub ids_table: Option<PathBuf>,
    pub canvas: usize,
}

impl DictionaryConfig {
    pub fn new(variants_per_label: usize, global_seed: u64, fonts: &dyn FontSource) -> Self {
        let generator = ProceduralGenerator::default();
        Self {
            variants_per_label,
            global_seed,
            schedule: SrSchedule::default(),
            draft: generator.draft.clone(),
            layout: generator.layout,
            generator_id: generator.id(),
            font_source: fonts.describe(),
            font_count: fonts.font_names().len(),
            font_dir: None,
            ids_table: None,
            canvas: glyph::CANVAS,
        }
    }

    pub fn generator(&self) -> ProceduralGenerator {
        ProceduralGenerator {
            draft: self.draft.clone(),
            layout: self.layout,
        }
    }
}

/// Hash of everything that determines the dictionary's content.
pub fn config_fingerprint(config: &DictionaryConfig, specs: &[CharSpec]) -> u64 {
    let mut parts = vec![seed::hash_str(&serde_json::to_string(config).expect("config serializes"))];
    for s in specs {
        parts.push(s.label as u64);
        parts.push(seed::hash_str(&ids::serialize(&s.ids)));
    }
    seed::hash64(&parts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildFailure {
    pub label: char,
    pub variant_index: Option<u32>,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BuildReport {
    pub labels: usize,
    pub entries: usize,
    pub variants_per_label: usize,
    pub font_count: usize,
    /// Variants replaced by a clean-anchor regeneration.
    pub fallbacks: Vec<BuildFailure>,
    pub failed_labels: Vec<BuildFailure>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    pub entries: Vec<DictionaryEntry>,
    pub generation: u32,
    pub charset: Vec<char>,
    pub config_fingerprint: u64,
    pub config: DictionaryConfig,
    /// IDS string per label, as written to the manifest.
    pub ids: BTreeMap<char, String>,
}

impl Dictionary {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, entry_id: u64) -> Option<&DictionaryEntry> {
        self.entries.iter().find(|e| e.entry_id == entry_id)
    }

    pub fn variants_of(&self, label: char) -> impl Iterator<Item = &DictionaryEntry> {
        self.entries.iter().filter(move |e| e.label == label)
    }

    pub fn sort(&mut self) {
        self.entries.sort_by_key(|e| (e.label, e.variant_index));
    }
}

/// Generates every character's variants and assembles the dictionary.
///
/// A failed variant is replaced by a clean-anchor regeneration from a derived
/// seed; a character for which even that fails is reported and fails the build.
pub fn build_dictionary(
    charset: &[CharSpec],
    config: &DictionaryConfig,
) -> Result<(Dictionary, BuildReport), SynthesisError> {
    let mut seen = BTreeSet::new();
    for s in charset {
        if !seen.insert(s.label) {
            return Err(SynthesisError::DuplicateLabel(s.label));
        }
    }
    let mut specs: Vec<&CharSpec> = charset.iter().collect();
    specs.sort_by_key(|s| s.label);
    let owned: Vec<CharSpec> = specs.iter().map(|s| (*s).clone()).collect();
    let fingerprint = config_fingerprint(config, &owned);
    let generator = config.generator();
    let k = config.variants_per_label;

    let results: Vec<(Vec<DictionaryEntry>, Vec<BuildFailure>, Option<BuildFailure>)> = specs
        .par_iter()
        .map(|spec| build_character(spec, k, config, &generator))
        .collect();

    let mut report = BuildReport {
        labels: specs.len(),
        variants_per_label: k,
        font_count: config.font_count,
        ..Default::default()
    };
    let mut entries = Vec::with_capacity(specs.len() * k);
    for (e, fallbacks, failed) in results {
        entries.extend(e);
        report.fallbacks.extend(fallbacks);
        report.failed_labels.extend(failed);
    }
    report.entries = entries.len();
    if !report.failed_labels.is_empty() {
        return Err(SynthesisError::BuildFailed(report));
    }
    let mut ids_map = BTreeMap::new();
    for s in &specs {
        ids_map.insert(s.label, ids::serialize(&s.ids));
    }
    let mut by_id: BTreeMap<u64, (char, u32)> = BTreeMap::new();
    for e in &entries {
        if let Some(prev) = by_id.insert(e.entry_id, (e.label, e.variant_index)) {
            return Err(SynthesisError::IdCollision(
                format!("{}#{}", prev.0, prev.1),
                format!("{}#{}", e.label, e.variant_index),
            ));
        }
    }
    let mut dict = Dictionary {
        entries,
        generation: 0,
        charset: specs.iter().map(|s| s.label).collect(),
        config_fingerprint: fingerprint,
        config: config.clone(),
        ids: ids_map,
    };
    dict.sort();
    Ok((dict, report))
}

fn build_character(
    spec: &CharSpec,
    k: usize,
    config: &DictionaryConfig,
    generator: &ProceduralGenerator,
) -> (Vec<DictionaryEntry>, Vec<BuildFailure>, Option<BuildFailure>) {
    let mut entries = Vec::with_capacity(k);
    let mut fallbacks = Vec::new();
    for i in 0..k as u32 {
        let s = entry_seed(config.global_seed, spec.label, i);
        let params = config.schedule.params(i as usize, k);
        let made = match generate_one(spec, generator, s, &params) {
            Ok(ok) => Ok(ok),
            Err(e) => {
                fallbacks.push(BuildFailure {
                    label: spec.label,
                    variant_index: Some(i),
                    error: e.to_string(),
                });
                let anchor = config.schedule.params(0, k);
                generate_one(spec, generator, seed::hash64(&[s, 0xFA11_BAC4]), &anchor).map(|(g, mut t)| {
                    t.fallback = true;
                    (g, t)
                })
            }
        };
        match made {
            Ok((glyph, stage_trace)) => entries.push(DictionaryEntry {
                entry_id: entry_id(spec.label, i, config.global_seed),
                label: spec.label,
                variant_index: i,
                glyph,
                seed: s,
                stage_trace,
            }),
            Err(e) => {
                return (
                    Vec::new(),
                    fallbacks,
                    Some(BuildFailure {
                        label: spec.label,
                        variant_index: Some(i),
                        error: e.to_string(),
                    }),
                )
            }
        }
    }
    (entries, fallbacks, None)
}

pub const MANIFEST: &str = "manifest.tsv";
pub const CONFIG: &str = "config.json";
pub const TRACES: &str = "stage_traces.jsonl";
const MANIFEST_HEADER: &str = "#entry_id\tlabel\tvariant_index\tseed\tids\timage\tgeneration";

pub fn image_relpath(entry_id: u64) -> String {
    format!("images/{entry_id:016x}.png")
}

#[derive(Debug, Serialize, Deserialize)]
struct ConfigFile {
    variants_per_label: usize,
    global_seed: u64,
    config_fingerprint: String,
    generation: u32,
    config: DictionaryConfig,
}

impl Dictionary {
    /// Writes `manifest.tsv`, `config.json`, stage traces and `images/`.
    pub fn save(&self, dir: &Path) -> Result<(), SynthesisError> {
        self.save_with(dir, |_, _| Ok(false))
    }

    /// Like [`Dictionary::save`], but `reuse(entry, dst)` may place an
    /// image itself (e.g. by hard-linking an unchanged file) and return true.
    pub fn save_with(
        &self,
        dir: &Path,
        reuse: impl Fn(&DictionaryEntry, &Path) -> std::io::Result<bool> + Sync,
    ) -> Result<(), SynthesisError> {
        let images = dir.join("images");
        fs::create_dir_all(&images).map_err(io_err(&images))?;
        self.entries.par_iter().try_for_each(|e| {
            let path = dir.join(image_relpath(e.entry_id));
            if reuse(e, &path).map_err(io_err(&path))? {
                return Ok(());
            }
            e.glyph.save_png(&path).map_err(SynthesisError::from)
        })?;
        let mut manifest = String::from(MANIFEST_HEADER);
        manifest.push('\n');
        for e in &self.entries {
            manifest.push_str(&format!(
                "{:016x}\t{}\t{}\t{:016x}\t{}\t{}\t{}\n",
                e.entry_id,
                font::codepoint_hex(e.label),
                e.variant_index,
                e.seed,
                self.ids.get(&e.label).map(String::as_str).unwrap_or(""),
                image_relpath(e.entry_id),
                self.generation
            ));
        }
        let path = dir.join(MANIFEST);
        fs::write(&path, manifest).map_err(io_err(&path))?;
        let cfg = ConfigFile {
            variants_per_label: self.config.variants_per_label,
            global_seed: self.config.global_seed,
            config_fingerprint: format!("{:016x}", self.config_fingerprint),
            generation: self.generation,
            config: self.config.clone(),
        };
        let path = dir.join(CONFIG);
        fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap() + "\n").map_err(io_err(&path))?;
        let path = dir.join(TRACES);
        let mut f = fs::File::create(&path).map_err(io_err(&path))?;
        for e in &self.entries {
            writeln!(f, "{}", serde_json::to_string(&e.stage_trace).unwrap()).map_err(io_err(&path))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Dictionary, SynthesisError> {
        let path = dir.join(CONFIG);
        let cfg: ConfigFile = serde_json::from_str(&fs::read_to_string(&path).map_err(io_err(&path))?)
            .map_err(|e| SynthesisError::Format(format!("{}: {e}", path.display())))?;
        let path = dir.join(MANIFEST);
        let manifest = fs::read_to_string(&path).map_err(io_err(&path))?;
        let traces: Vec<Option<StageTrace>> = match fs::read_to_string(dir.join(TRACES)) {
            Ok(t) => t.lines().map(|l| serde_json::from_str(l).ok()).collect(),
            Err(_) => Vec::new(),
        };
        let bad = |line: usize, what: &str| SynthesisError::Format(format!("{MANIFEST} line {}: {what}", line + 1));
        let hex = |s: &str| u64::from_str_radix(s, 16).ok();
        let rows: Vec<(usize, &str)> = manifest
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.starts_with('#') && !l.trim().is_empty())
            .collect();
        let mut entries = Vec::with_capacity(rows.len());
        let mut ids_map = BTreeMap::new();
        let mut generation = cfg.generation;
        for (row, (lineno, line)) in rows.iter().enumerate() {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 7 {
                return Err(bad(*lineno, "expected 7 fields"));
            }
            let entry_id = hex(f[0]).ok_or_else(|| bad(*lineno, "entry id"))?;
            let label = font::parse_codepoint_hex(f[1]).ok_or_else(|| bad(*lineno, "label"))?;
            let variant_index: u32 = f[2].parse().map_err(|_| bad(*lineno, "variant index"))?;
            let seed = hex(f[3]).ok_or_else(|| bad(*lineno, "seed"))?;
            ids_map.insert(label, f[4].to_owned());
            generation = f[6].parse().map_err(|_| bad(*lineno, "generation"))?;
            let img = glyph::load_raster(&dir.join(f[5]))?;
            let size = img.width() as usize;
            let pixels = img.pixels().map(|p| 1.0 - p.0[0] as f32 / 255.0).collect();
            let stage_trace = traces.get(row).cloned().flatten().unwrap_or_else(|| StageTrace {
                draft: DraftTrace {
                    font_index: 0,
                    rotation_deg: 0.0,
                    shear: 0.0,
                    scale: 1.0,
                    stroke_width: 0,
                    seed: 0,
                },
                sr: SrParams::identity(),
                regions: Vec::new(),
                fallback: false,
            });
            entries.push(DictionaryEntry {
                entry_id,
                label,
                variant_index,
                glyph: Glyph::from_pixels(size, pixels),
                seed,
                stage_trace,
            });
        }
        let charset: Vec<char> = ids_map.keys().copied().collect();
        let mut dict = Dictionary {
            entries,
            generation,
            charset,
            config_fingerprint: hex(&cfg.config_fingerprint)
                .ok_or_else(|| SynthesisError::Format("config fingerprint".into()))?,
            config: cfg.config,
            ids: ids_map,
        };
        dict.sort();
        Ok(dict)
    }
}
