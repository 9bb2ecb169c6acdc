//! Zero-shot benchmark harness: label-level splits, pseudo-ancient queries,
//! dictionary vs direct-retrieval comparison, degradation sweeps and reports.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::degradation::{self, DegradationKind, DegradationSpec};
use crate::encoder::{Embedding, Encoder};
use crate::font::{self, FontSource};
use crate::glyph::{self, Glyph, GlyphError};
use crate::metrics::{self, MetricError, TopNCurve, TOP_N};
use crate::retrieval::{self, Index, QueryParams, RetrievalError, VoteRule};
use crate::seed::{self, SplitMix64};
use crate::synthesis::{CharSpec, Dictionary, SrParams, SrSchedule, SynthesisError, VariantGenerator};

pub const QUERY_MANIFEST: &str = "manifest.tsv";
pub const DEFAULT_RESAMPLES: usize = 1000;
const MAX_QUERY_ATTEMPTS: u64 = 8;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("charset is empty")]
    EmptyCharset,
    #[error("split ratio {0} outside (0, 1)")]
    Ratio(f64),
    #[error("duplicate label {0} in charset")]
    DuplicateLabel(char),
    #[error("no queries to evaluate")]
    NoQueries,
    #[error("query manifest {path} line {line}: {msg}")]
    Manifest { path: PathBuf, line: usize, msg: String },
    #[error(transparent)]
    Synthesis(#[from] SynthesisError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Glyph(#[from] GlyphError),
    #[error("index fingerprint {index:016x} does not match dictionary {dictionary:016x}")]
    IndexMismatch { index: u64, dictionary: u64 },
    #[error("io: {0}")]
    Io(String),
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> EvalError + '_ {
    move |e| EvalError::Io(format!("{}: {e}", path.display()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train_labels: Vec<char>,
    pub test_labels: Vec<char>,
    pub seed: u64,
    pub ratio: f64,
}

impl Split {
    pub fn is_test(&self, label: char) -> bool {
        self.test_labels.binary_search(&label).is_ok()
    }
}

/// Sorts labels by codepoint, shuffles them with a splitmix64-driven
/// Fisher–Yates pass and sends the first ⌈ratio·n⌉ to train.
pub fn split_characters(charset: &[char], ratio: f64, seed_: u64) -> Result<Split, EvalError> {
    if charset.is_empty() {
        return Err(EvalError::EmptyCharset);
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(EvalError::Ratio(ratio));
    }
    let mut labels = charset.to_vec();
    labels.sort_unstable();
    if let Some(w) = labels.windows(2).find(|w| w[0] == w[1]) {
        return Err(EvalError::DuplicateLabel(w[0]));
    }
    let mut sm = SplitMix64::new(seed_);
    for i in (1..labels.len()).rev() {
        let j = ((sm.next_u64() as u128 * (i as u128 + 1)) >> 64) as usize;
        labels.swap(i, j);
    }
    let n_train = train_count(labels.len(), ratio);
    let mut train = labels[..n_train].to_vec();
    let mut test = labels[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok(Split {
        train_labels: train,
        test_labels: test,
        seed: seed_,
        ratio,
    })
}

/// ⌈ratio·n⌉, robust to the representation error of ratios like 0.9.
pub fn train_count(n: usize, ratio: f64) -> usize {
    let exact = ratio * n as f64;
    let nearest = exact.round();
    let c = if (exact - nearest).abs() < 1e-9 * n.max(1) as f64 {
        nearest
    } else {
        exact.ceil()
    };
    (c as usize).min(n)
}

/// One evaluation sample. `glyph` is the normalized query image; an empty
/// glyph stands for an image that failed to normalize.
#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub id: String,
    pub truth: char,
    pub glyph: Glyph,
}

/// Pseudo-ancient query generation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryGenConfig {
    pub per_label: usize,
    pub seed: u64,
    /// Parameters of both refinement passes.
    pub strong: SrParams,
    /// Severity of the capture degradation applied last.
    pub severity: u8,
}

impl QueryGenConfig {
    pub fn new(per_label: usize, seed_: u64, schedule: &SrSchedule, k: usize) -> Self {
        Self {
            per_label,
            seed: seed_,
            strong: schedule.params(k.max(2) - 1, k.max(2)),
            severity: 1,
        }
    }
}

/// "Unseen exemplars of known labels": the synthesis pipeline under a seed
/// domain disjoint from dictionary builds, followed by a second strong
/// refinement pass and a light capture degradation of random kind.
pub fn pseudo_ancient_queries(
    specs: &[CharSpec],
    generator: &dyn VariantGenerator,
    cfg: &QueryGenConfig,
) -> Result<Vec<Query>, EvalError> {
    let jobs: Vec<(&CharSpec, usize)> = specs.iter().flat_map(|s| (0..cfg.per_label).map(move |j| (s, j))).collect();
    jobs.par_iter()
        .map(|&(spec, j)| pseudo_ancient_one(spec, j, generator, cfg))
        .collect()
}

pub fn query_seed(gen_seed: u64, label: char, j: usize) -> u64 {
    seed::hash64(&[seed::domain("pseudo-ancient"), gen_seed, label as u64, j as u64])
}

fn pseudo_ancient_one(
    spec: &CharSpec,
    j: usize,
    generator: &dyn VariantGenerator,
    cfg: &QueryGenConfig,
) -> Result<Query, EvalError> {
    let base = query_seed(cfg.seed, spec.label, j);
    let mut last = None;
    for attempt in 0..MAX_QUERY_ATTEMPTS {
        let s = seed::hash64(&[base, attempt]);
        let made = generator.draft(spec, seed::hash64(&[s, 1])).and_then(|(draft, _)| {
            let first = generator.refine(&draft, &spec.ids, &cfg.strong, seed::hash64(&[s, 2]))?;
            generator.refine(&first.glyph, &spec.ids, &cfg.strong, seed::hash64(&[s, 3]))
        });
        match made {
            Ok(refined) => {
                let kind = DegradationKind::ALL[(seed::hash64(&[s, 4]) % 4) as usize];
                let d = degradation::degrade(
                    &refined.glyph,
                    &DegradationSpec {
                        kind,
                        severity: cfg.severity,
                        seed: seed::hash64(&[s, 5]),
                    },
                );
                match glyph::normalize_glyph(&d) {
                    Ok(g) => {
                        return Ok(Query {
                            id: format!("images/{}_{j}.png", font::codepoint_hex(spec.label)),
                            truth: spec.label,
                            glyph: g,
                        })
                    }
                    Err(e) => last = Some(EvalError::Glyph(e)),
                }
            }
            Err(e) => last = Some(EvalError::Synthesis(e)),
        }
    }
    Err(last.expect("at least one attempt"))
}

/// Label groups and query sets of the offline benchmark.
#[derive(Debug, Clone)]
pub struct BenchmarkSets {
    pub split: Split,
    /// Train labels withheld from refinement support, used for early stopping.
    pub validation_labels: Vec<char>,
    /// The query population over every label; benchmarks score its
    /// test-label part, fidelity uses all of it.
    pub queries: Vec<Query>,
    pub exemplars: Vec<Query>,
    pub validation: Vec<Query>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub split_ratio: f64,
    pub split_seed: u64,
    pub queries_per_label: usize,
    pub exemplars_per_label: usize,
    pub validation_per_label: usize,
    /// Query-generation seeds for the three sets; they must differ.
    pub seeds: [u64; 3],
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            split_ratio: 0.9,
            split_seed: 0,
            queries_per_label: 5,
            exemplars_per_label: 3,
            validation_per_label: 5,
            seeds: [7, 1007, 2007],
        }
    }
}

/// Queries for every label; train labels are split again into exemplar
/// labels and as many validation labels as there are test labels. Exemplar
/// and validation sets come from their own seeds, so they never coincide
/// with queries.
pub fn benchmark_sets(
    specs: &[CharSpec],
    generator: &dyn VariantGenerator,
    schedule: &SrSchedule,
    k: usize,
    cfg: &BenchmarkConfig,
) -> Result<BenchmarkSets, EvalError> {
    let labels: Vec<char> = specs.iter().map(|s| s.label).collect();
    let split = split_characters(&labels, cfg.split_ratio, cfg.split_seed)?;
    let n_train = split.train_labels.len();
    let n_val = split.test_labels.len().min(n_train.saturating_sub(1));
    let validation_labels = if n_val == 0 {
        Vec::new()
    } else {
        split_characters(&split.train_labels, 1.0 - n_val as f64 / n_train as f64, seed::hash64(&[cfg.split_seed, 1]))?.test_labels
    };
    let pick = |keep: &dyn Fn(char) -> bool| -> Vec<CharSpec> { specs.iter().filter(|s| keep(s.label)).cloned().collect() };
    let is_val = |l: char| validation_labels.binary_search(&l).is_ok();
    let gen = |set: Vec<CharSpec>, per_label: usize, seed_: u64| {
        pseudo_ancient_queries(&set, generator, &QueryGenConfig::new(per_label, seed_, schedule, k))
    };
    let queries = gen(specs.to_vec(), cfg.queries_per_label, cfg.seeds[0])?;
    let exemplars = gen(pick(&|l| !split.is_test(l) && !is_val(l)), cfg.exemplars_per_label, cfg.seeds[1])?;
    let validation = gen(pick(&is_val), cfg.validation_per_label, cfg.seeds[2])?;
    Ok(BenchmarkSets {
        split,
        validation_labels,
        queries,
        exemplars,
        validation,
    })
}

/// Writes queries as `<dir>/<id>` images plus a manifest
/// (`image_relpath\ttruth_codepoint_hex`).
pub fn write_queries(dir: &Path, queries: &[Query]) -> Result<(), EvalError> {
    let mut manifest = String::from("#image\ttruth\n");
    for q in queries {
        let path = dir.join(&q.id);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        q.glyph.save_png(&path)?;
        let _ = writeln!(manifest, "{}\t{}", q.id, font::codepoint_hex(q.truth));
    }
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join(QUERY_MANIFEST);
    fs::write(&path, manifest).map_err(io_err(&path))
}

/// Loads queries from a manifest file, a directory holding `manifest.tsv`,
/// or an exemplar tree `<dir>/<codepoint_hex>/<any>.png`.
pub fn load_queries(path: &Path) -> Result<Vec<Query>, EvalError> {
    if path.is_file() {
        return load_manifest(path);
    }
    if path.join(QUERY_MANIFEST).is_file() {
        return load_manifest(&path.join(QUERY_MANIFEST));
    }
    load_exemplar_tree(path)
}

fn load_image(path: &Path) -> Result<Glyph, EvalError> {
    let img = glyph::load_raster(path)?;
    Ok(match glyph::normalize(&img) {
        Ok(g) => g,
        Err(GlyphError::EmptyImage) => Glyph::blank(glyph::CANVAS),
        Err(e) => return Err(e.into()),
    })
}

fn load_manifest(path: &Path) -> Result<Vec<Query>, EvalError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let root = path.parent().unwrap_or(Path::new("."));
    let bad = |line: usize, msg: &str| EvalError::Manifest {
        path: path.to_path_buf(),
        line: line + 1,
        msg: msg.to_owned(),
    };
    let rows: Vec<(usize, &str)> = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.starts_with('#') && !l.trim().is_empty())
        .collect();
    rows.par_iter()
        .map(|&(i, line)| {
            let mut f = line.split('\t');
            let (Some(rel), Some(hex)) = (f.next(), f.next()) else {
                return Err(bad(i, "expected image path and codepoint"));
            };
            let truth = font::parse_codepoint_hex(hex.trim()).ok_or_else(|| bad(i, "bad codepoint"))?;
            Ok(Query {
                id: rel.to_owned(),
                truth,
                glyph: load_image(&root.join(rel))?,
            })
        })
        .collect()
}

fn load_exemplar_tree(root: &Path) -> Result<Vec<Query>, EvalError> {
    let mut items = Vec::new();
    for entry in fs::read_dir(root).map_err(io_err(root))? {
        let dir = entry.map_err(io_err(root))?.path();
        let Some(label) = dir
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(font::parse_codepoint_hex)
            .filter(|_| dir.is_dir())
        else {
            continue;
        };
        for f in fs::read_dir(&dir).map_err(io_err(&dir))? {
            let p = f.map_err(io_err(&dir))?.path();
            let ext = p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
            if matches!(ext.as_deref(), Some("png" | "pgm")) {
                items.push((p.strip_prefix(root).unwrap().to_string_lossy().into_owned(), label));
            }
        }
    }
    items.sort();
    items
        .par_iter()
        .map(|(rel, label)| {
            Ok(Query {
                id: rel.clone(),
                truth: *label,
                glyph: load_image(&root.join(rel))?,
            })
        })
        .collect()
}

/// Stable fingerprint of a query image's pixels.
pub fn glyph_fingerprint(g: &Glyph) -> u64 {
    let bytes: Vec<u8> = g.pixels().iter().flat_map(|p| p.to_le_bytes()).collect();
    seed::hash64(&[g.size() as u64, seed::hash_bytes(&bytes)])
}

/// Evaluation settings echoed into every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Entry matches feeding the vote; `None` means 100 × K.
    pub k: Option<usize>,
    pub rule: VoteRule,
    pub ns: Vec<usize>,
    pub resamples: usize,
    pub bootstrap_seed: u64,
    /// Restrict queries to the test side of this split.
    pub split: Option<(f64, u64)>,
    pub suite_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k: None,
            rule: VoteRule::Sum,
            ns: TOP_N.to_vec(),
            resamples: DEFAULT_RESAMPLES,
            bootstrap_seed: 0,
            split: Some((0.9, 0)),
            suite_seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn k_for(&self, variants_per_label: usize) -> usize {
        self.k.unwrap_or(100 * variants_per_label.max(1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    pub k: usize,
    pub dr_k: usize,
    pub variants_per_label: usize,
    pub voting: VoteRule,
    pub encoder_id: String,
    pub dictionary_fingerprint: String,
    pub index_generation: u32,
    pub split_ratio: Option<f64>,
    pub split_seed: Option<u64>,
    pub bootstrap_resamples: usize,
    pub bootstrap_seed: u64,
    pub suite_seed: Option<u64>,
    pub query_count: usize,
    pub test_labels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    /// `clean` or `<kind>-<severity>`.
    pub condition: String,
    pub kind: Option<DegradationKind>,
    pub severity: u8,
    /// `dictionary` or `dr`.
    pub method: String,
    pub curve: TopNCurve,
    /// 95% percentile-bootstrap interval per N.
    pub ci: BTreeMap<usize, (f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryFailure {
    pub query_id: String,
    pub condition: String,
    pub method: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub metric: String,
    /// Size of every sample compared, and how many reshuffles were averaged.
    pub sample_size: usize,
    pub repeats: usize,
    /// Two disjoint samples of the query population.
    pub query_halves: f64,
    /// Dictionary entries vs queries (same labels).
    pub dictionary_vs_queries: f64,
    /// Plain modern renders vs queries (same labels).
    pub plain_vs_queries: f64,
    /// Mean over queries of the best SSIM / L1 against the label's entries.
    pub ssim_dictionary: f64,
    pub ssim_plain: f64,
    pub l1_dictionary: f64,
    pub l1_plain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: ReportConfig,
    pub conditions: Vec<ConditionReport>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub fidelity: Option<FidelityReport>,
    pub failures: Vec<QueryFailure>,
}

impl EvalReport {
    pub fn condition(&self, condition: &str, method: &str) -> Option<&ConditionReport> {
        self.conditions.iter().find(|c| c.condition == condition && c.method == method)
    }

    pub fn all_monotone(&self) -> bool {
        self.conditions.iter().all(|c| c.curve.is_monotone())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("condition\tmethod");
        let ns: Vec<usize> = self
            .conditions
            .first()
            .map(|c| c.curve.accuracy.keys().copied().collect())
            .unwrap_or_default();
        for n in &ns {
            let _ = write!(out, "\ttop{n}\ttop{n}_lo\ttop{n}_hi");
        }
        out.push('\n');
        for c in &self.conditions {
            let _ = write!(out, "{}\t{}", c.condition, c.method);
            for n in &ns {
                let (lo, hi) = c.ci.get(n).copied().unwrap_or((f64::NAN, f64::NAN));
                let _ = write!(out, "\t{:.4}\t{lo:.4}\t{hi:.4}", c.curve.at(*n).unwrap_or(f64::NAN));
            }
            out.push('\n');
        }
        out
    }

    /// Line chart of every curve (x: N, y: accuracy).
    pub fn to_svg(&self) -> String {
        const W: f64 = 640.0;
        const H: f64 = 400.0;
        const PAD: f64 = 48.0;
        const COLORS: [&str; 8] = ["#1b6ca8", "#d1495b", "#2e933c", "#edae49", "#6a4c93", "#00798c", "#8d6a9f", "#444444"];
        let ns: Vec<usize> = self
            .conditions
            .first()
            .map(|c| c.curve.accuracy.keys().copied().collect())
            .unwrap_or_default();
        let x_of = |i: usize| PAD + (W - 2.0 * PAD) * i as f64 / (ns.len().max(2) - 1) as f64;
        let y_of = |a: f64| H - PAD - (H - 2.0 * PAD) * a;
        let mut s = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{}\" font-family=\"sans-serif\" font-size=\"11\">\n",
            H + 16.0 * self.conditions.len() as f64
        );
        let _ = writeln!(
            s,
            "<line x1=\"{PAD}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"black\"/><line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{0}\" stroke=\"black\"/>",
            H - PAD,
            W - PAD
        );
        for (i, n) in ns.iter().enumerate() {
            let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">Top-{n}</text>", x_of(i), H - PAD + 16.0);
        }
        for t in 0..=4 {
            let a = t as f64 / 4.0;
            let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{a:.2}</text>", PAD - 6.0, y_of(a) + 4.0);
        }
        for (ci, c) in self.conditions.iter().enumerate() {
            let color = COLORS[ci % COLORS.len()];
            let pts: Vec<String> = ns
                .iter()
                .enumerate()
                .map(|(i, n)| format!("{:.1},{:.1}", x_of(i), y_of(c.curve.at(*n).unwrap_or(0.0))))
                .collect();
            let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>", pts.join(" "));
            let _ = writeln!(
                s,
                "<text x=\"{PAD}\" y=\"{:.1}\" fill=\"{color}\">{} / {}</text>",
                H + 16.0 * ci as f64,
                c.condition,
                c.method
            );
        }
        s.push_str("</svg>\n");
        s
    }

    /// Writes `<path>` (JSON), a `.tsv` sibling and optionally an `.svg` one.
    pub fn write(&self, path: &Path, svg: bool) -> Result<(), EvalError> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        fs::write(path, self.to_json()).map_err(io_err(path))?;
        let tsv = path.with_extension("tsv");
        fs::write(&tsv, self.to_tsv()).map_err(io_err(&tsv))?;
        if svg {
            let p = path.with_extension("svg");
            fs::write(&p, self.to_svg()).map_err(io_err(&p))?;
        }
        Ok(())
    }
}

/// One plain render per label from the first font that has it.
pub fn plain_renders(fonts: &dyn FontSource, labels: &[char]) -> Result<Vec<(char, Glyph)>, EvalError> {
    let n_fonts = fonts.font_names().len();
    labels
        .par_iter()
        .map(|&l| {
            for f in 0..n_fonts {
                if let Some(g) = fonts.render(f, l)? {
                    return Ok(Some((l, g)));
                }
            }
            Ok(None)
        })
        .filter_map(|r| r.transpose())
        .collect()
}

/// Rankings of `queries` against `ix`, with failures. Query glyphs are
/// embedded as given: they are already normalized, and degradations are
/// applied downstream of normalization.
pub fn rank_queries(
    ix: &Index,
    enc: &dyn Encoder,
    queries: &[Query],
    params: QueryParams,
) -> Vec<Result<Vec<char>, String>> {
    queries
        .par_iter()
        .enumerate()
        .map(|(i, q)| {
            retrieval::decipher_normalized(ix, enc, &q.glyph, params, i as u64)
                .map(|r| r.labels())
                .map_err(|e| e.to_string())
        })
        .collect()
}

/// Percentile-bootstrap 95% interval per N, clamped to contain the point
/// estimate.
pub fn bootstrap_ci(
    ranks: &[Option<usize>],
    ns: &[usize],
    resamples: usize,
    seed_: u64,
) -> BTreeMap<usize, (f64, f64)> {
    let point = TopNCurve::from_ranks(ranks, ns).expect("N validated");
    let mut out = BTreeMap::new();
    if ranks.is_empty() || resamples == 0 {
        for &n in ns {
            let p = point.at(n).unwrap_or(0.0);
            out.insert(n, (p, p));
        }
        return out;
    }
    let mut rng = seed::rng(seed_);
    let m = ranks.len();
    let mut samples: Vec<Vec<f64>> = vec![Vec::with_capacity(resamples); ns.len()];
    let mut pick = vec![0usize; m];
    for _ in 0..resamples {
        for p in pick.iter_mut() {
            *p = rng.random_range(0..m);
        }
        for (ni, &n) in ns.iter().enumerate() {
            let h = pick.iter().filter(|&&i| matches!(ranks[i], Some(r) if r < n)).count();
            samples[ni].push(h as f64 / m as f64);
        }
    }
    for (ni, &n) in ns.iter().enumerate() {
        let s = &mut samples[ni];
        s.sort_by(f64::total_cmp);
        let q = |f: f64| s[((resamples - 1) as f64 * f).round() as usize];
        let p = point.at(n).unwrap_or(0.0);
        out.insert(n, (q(0.025).min(p), q(0.975).max(p)));
    }
    out
}

/// Scores one condition for one index.
#[allow(clippy::too_many_arguments)]
fn evaluate_condition(
    ix: &Index,
    enc: &dyn Encoder,
    queries: &[Query],
    params: QueryParams,
    cfg: &EvalConfig,
    condition: &str,
    kind: Option<DegradationKind>,
    severity: u8,
    method: &str,
    failures: &mut Vec<QueryFailure>,
) -> Result<ConditionReport, EvalError> {
    let ranked = rank_queries(ix, enc, queries, params);
    let mut rankings = Vec::with_capacity(ranked.len());
    for (q, r) in queries.iter().zip(ranked) {
        match r {
            Ok(l) => rankings.push(l),
            Err(error) => {
                failures.push(QueryFailure {
                    query_id: q.id.clone(),
                    condition: condition.to_owned(),
                    method: method.to_owned(),
                    error,
                });
                rankings.push(Vec::new());
            }
        }
    }
    let truths: Vec<char> = queries.iter().map(|q| q.truth).collect();
    let ranks = metrics::truth_ranks(&rankings, &truths)?;
    let curve = TopNCurve::from_ranks(&ranks, &cfg.ns)?;
    let ci = bootstrap_ci(
        &ranks,
        &cfg.ns,
        cfg.resamples,
        seed::hash64(&[cfg.bootstrap_seed, seed::hash_str(condition), seed::hash_str(method)]),
    );
    Ok(ConditionReport {
        condition: condition.to_owned(),
        kind,
        severity,
        method: method.to_owned(),
        curve,
        ci,
    })
}

/// Queries restricted to the split's test labels (all queries when no split
/// is configured), in id order.
pub fn select_queries(d: &Dictionary, queries: &[Query], cfg: &EvalConfig) -> Result<(Vec<Query>, usize), EvalError> {
    let mut selected: Vec<Query> = match cfg.split {
        Some((ratio, s)) => {
            let split = split_characters(&d.charset, ratio, s)?;
            queries.iter().filter(|q| split.is_test(q.truth)).cloned().collect()
        }
        None => queries.to_vec(),
    };
    if selected.is_empty() {
        return Err(EvalError::NoQueries);
    }
    selected.sort_by(|a, b| a.id.cmp(&b.id).then(a.truth.cmp(&b.truth)));
    let labels: BTreeSet<char> = selected.iter().map(|q| q.truth).collect();
    Ok((selected, labels.len()))
}

fn report_config(d: &Dictionary, ix: &Index, cfg: &EvalConfig, k: usize, dr_k: usize, n: usize, labels: usize) -> ReportConfig {
    ReportConfig {
        k,
        dr_k,
        variants_per_label: d.config.variants_per_label,
        voting: cfg.rule,
        encoder_id: ix.encoder_id().to_owned(),
        dictionary_fingerprint: format!("{:016x}", d.config_fingerprint),
        index_generation: ix.generation(),
        split_ratio: cfg.split.map(|s| s.0),
        split_seed: cfg.split.map(|s| s.1),
        bootstrap_resamples: cfg.resamples,
        bootstrap_seed: cfg.bootstrap_seed,
        suite_seed: None,
        query_count: n,
        test_labels: labels,
    }
}

fn check_index(d: &Dictionary, ix: &Index) -> Result<(), EvalError> {
    if ix.fingerprint() != d.config_fingerprint || ix.generation() != d.generation {
        return Err(EvalError::IndexMismatch {
            index: ix.fingerprint(),
            dictionary: d.config_fingerprint,
        });
    }
    Ok(())
}

/// Dictionary vs direct-retrieval benchmark on the clean queries, with
/// fidelity measures of the dictionary against the query population.
pub fn run_benchmark(
    d: &Dictionary,
    ix: &Index,
    enc: &dyn Encoder,
    plain: &[(char, Glyph)],
    queries: &[Query],
    cfg: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    check_index(d, ix)?;
    let all_queries = queries;
    let (queries, labels) = select_queries(d, queries, cfg)?;
    let k = cfg.k_for(d.config.variants_per_label);
    let max_n = cfg.ns.iter().copied().max().unwrap_or(1);
    let dr_ix = retrieval::build_label_index(plain, enc)?.with_canvas(ix.canvas());
    let mut failures = Vec::new();
    let params = QueryParams { k, rule: cfg.rule };
    let dict_row = evaluate_condition(ix, enc, &queries, params, cfg, "clean", None, 0, "dictionary", &mut failures)?;
    let dr_params = QueryParams {
        k: max_n,
        rule: cfg.rule,
    };
    let dr_row = evaluate_condition(&dr_ix, enc, &queries, dr_params, cfg, "clean", None, 0, "dr", &mut failures)?;
    // Fidelity is a population-level comparison, so it uses every query
    // rather than only the test split.
    let fidelity = fidelity(d, enc, plain, all_queries, cfg.bootstrap_seed)?;
    Ok(EvalReport {
        config: report_config(d, ix, cfg, k, max_n, queries.len(), labels),
        conditions: vec![dict_row, dr_row],
        fidelity,
        failures,
    })
}

/// Clean row plus one row per degradation spec, dictionary method only.
/// Each query gets its own seed derived from the suite seed.
pub fn run_degradation_suite(
    d: &Dictionary,
    ix: &Index,
    enc: &dyn Encoder,
    queries: &[Query],
    specs: &[DegradationSpec],
    cfg: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    check_index(d, ix)?;
    let (queries, labels) = select_queries(d, queries, cfg)?;
    let k = cfg.k_for(d.config.variants_per_label);
    let params = QueryParams { k, rule: cfg.rule };
    let mut failures = Vec::new();
    let mut rows = vec![evaluate_condition(ix, enc, &queries, params, cfg, "clean", None, 0, "dictionary", &mut failures)?];
    for spec in specs {
        let degraded: Vec<Query> = queries
            .par_iter()
            .enumerate()
            .map(|(i, q)| {
                let s = seed::hash64(&[cfg.suite_seed, spec.seed, i as u64, spec.kind as u64, spec.severity as u64]);
                Query {
                    id: q.id.clone(),
                    truth: q.truth,
                    glyph: degradation::degrade(&q.glyph, &DegradationSpec { seed: s, ..*spec }),
                }
            })
            .collect();
        rows.push(evaluate_condition(
            ix,
            enc,
            &degraded,
            params,
            cfg,
            &spec.condition_name(),
            Some(spec.kind),
            spec.severity,
            "dictionary",
            &mut failures,
        )?);
    }
    let mut config = report_config(d, ix, cfg, k, k, queries.len(), labels);
    config.suite_seed = Some(cfg.suite_seed);
    Ok(EvalReport {
        config,
        conditions: rows,
        fidelity: None,
        failures,
    })
}

fn embed_all(enc: &dyn Encoder, glyphs: &[&Glyph]) -> Vec<Embedding> {
    glyphs.par_iter().filter_map(|g| enc.embed(g).ok()).collect()
}

/// Embedding-Fréchet distances and pixel metrics of the dictionary and of
/// plain renders against the query population, restricted to query labels.
/// Reshuffles averaged by [`fidelity`].
pub const FIDELITY_REPEATS: usize = 8;

pub fn fidelity(
    d: &Dictionary,
    enc: &dyn Encoder,
    plain: &[(char, Glyph)],
    queries: &[Query],
    seed_: u64,
) -> Result<Option<FidelityReport>, EvalError> {
    let labels: BTreeSet<char> = queries.iter().map(|q| q.truth).collect();
    let good: Vec<&Query> = queries.iter().filter(|q| !q.glyph.is_empty()).collect();
    let dict: Vec<&Glyph> = d.entries.iter().filter(|e| labels.contains(&e.label)).map(|e| &e.glyph).collect();
    let plain_g: Vec<&Glyph> = plain.iter().filter(|(l, _)| labels.contains(l)).map(|(_, g)| g).collect();
    if good.len() < 4 || dict.len() < 2 || plain_g.len() < 2 {
        return Ok(None);
    }
    let (eq, ed, ep) = (
        embed_all(enc, &good.iter().map(|q| &q.glyph).collect::<Vec<_>>()),
        embed_all(enc, &dict),
        embed_all(enc, &plain_g),
    );
    // Every comparison uses samples of the same size m: the diagonal
    // Fréchet estimate is biased upward by about tr(Σ)/m per set, so
    // unequal sizes would order the three distances by sample count.
    let m = (eq.len() / 2).min(ed.len()).min(ep.len());
    if m < 2 {
        return Ok(None);
    }
    let mut rng = seed::rng(seed::hash64(&[seed::domain("fidelity-halves"), seed_]));
    let (mut halves, mut dq, mut pq) = (0.0, 0.0, 0.0);
    let sample = |set: &[Embedding], n: usize, rng: &mut ChaCha8Rng| -> Vec<Embedding> {
        let mut idx: Vec<usize> = (0..set.len()).collect();
        idx.shuffle(rng);
        idx[..n].iter().map(|&i| set[i].clone()).collect()
    };
    for _ in 0..FIDELITY_REPEATS {
        let q = sample(&eq, 2 * m, &mut rng);
        let (qa, qb) = q.split_at(m);
        let ds = sample(&ed, m, &mut rng);
        let ps = sample(&ep, m, &mut rng);
        halves += metrics::frechet_diag(qa, qb)?;
        dq += metrics::frechet_diag(&ds, qb)?;
        pq += metrics::frechet_diag(&ps, qb)?;
    }
    let r = FIDELITY_REPEATS as f64;

    let plain_of: BTreeMap<char, &Glyph> = plain.iter().map(|(l, g)| (*l, g)).collect();
    let pixel: Vec<(f64, f64, f64, f64)> = good
        .par_iter()
        .map(|q| {
            let mut best_ssim = f64::NEG_INFINITY;
            let mut best_l1 = f64::INFINITY;
            for e in d.variants_of(q.truth) {
                best_ssim = best_ssim.max(metrics::ssim(&q.glyph, &e.glyph).unwrap_or(f64::NEG_INFINITY));
                best_l1 = best_l1.min(metrics::l1(&q.glyph, &e.glyph).unwrap_or(f64::INFINITY));
            }
            let (ps, pl) = plain_of
                .get(&q.truth)
                .map(|g| (metrics::ssim(&q.glyph, g).unwrap_or(0.0), metrics::l1(&q.glyph, g).unwrap_or(1.0)))
                .unwrap_or((0.0, 1.0));
            (best_ssim, best_l1, ps, pl)
        })
        .collect();
    let mean = |f: fn(&(f64, f64, f64, f64)) -> f64| pixel.iter().map(f).sum::<f64>() / pixel.len() as f64;
    Ok(Some(FidelityReport {
        metric: metrics::FRECHET_LABEL.to_owned(),
        sample_size: m,
        repeats: FIDELITY_REPEATS,
        query_halves: halves / r,
        dictionary_vs_queries: dq / r,
        plain_vs_queries: pq / r,
        ssim_dictionary: mean(|p| p.0),
        l1_dictionary: mean(|p| p.1),
        ssim_plain: mean(|p| p.2),
        l1_plain: mean(|p| p.3),
    }))
}
