//! Iterative dictionary refinement: entries that no exemplar vouches for are
//! regenerated, the index is rebuilt, and the best generation on held-out
//! validation characters is kept. Test queries never enter the loop.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::Encoder;
use crate::evaluation::{self, Query};
use crate::metrics::{self, TopNCurve, TOP_N};
use crate::retrieval::{self, Index, QueryParams, RetrievalError};
use crate::seed;
use crate::synthesis::{self, CharSpec, Dictionary, DictionaryEntry, SynthesisError, VariantGenerator};

#[derive(Debug, Error)]
pub enum RefineError {
    #[error("iterations must be at least 1")]
    NoIterations,
    #[error("validation and exemplar sets share labels: {0:?}")]
    OverlappingLabels(Vec<char>),
    #[error("{set} input {id} matches a test query")]
    TestLeakage { set: &'static str, id: String },
    #[error("no character spec for label {0:?}")]
    MissingSpec(char),
    #[error("validation set is empty")]
    NoValidation,
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Synthesis(#[from] SynthesisError),
    #[error(transparent)]
    Metric(#[from] metrics::MetricError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("trace: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SupportMode {
    Supervised,
    Unsupervised,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Support {
    pub supported: bool,
    pub mode: SupportMode,
    /// Exemplars of the entry's own label that retrieved it (supervised).
    pub exemplars: Vec<String>,
    /// Best cosine to any exemplar (unsupervised); `None` without exemplars.
    pub score: Option<f64>,
}

/// One record per dictionary entry.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SupportMap {
    pub entries: BTreeMap<u64, Support>,
    /// Threshold used by the unsupervised rule.
    pub median: Option<f64>,
}

impl SupportMap {
    pub fn is_supported(&self, entry_id: u64) -> bool {
        self.entries.get(&entry_id).is_some_and(|s| s.supported)
    }

    pub fn supported_count(&self) -> usize {
        self.entries.values().filter(|s| s.supported).count()
    }

    pub fn covers(&self, d: &Dictionary) -> bool {
        self.entries.len() == d.len() && d.entries.iter().all(|e| self.entries.contains_key(&e.entry_id))
    }
}

/// Lower median; `None` for an empty slice.
fn lower_median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some(v[(v.len() - 1) / 2])
}

/// Supervised where the label has exemplars (retrieved within top-`k` by one
/// of them), otherwise by best cosine to any exemplar against the median of
/// that statistic over the whole dictionary.
pub fn compute_support(ix: &Index, enc: &dyn Encoder, exemplars: &[Query], k: usize) -> Result<SupportMap, RefineError> {
    let embedded: Vec<(&Query, crate::encoder::Embedding)> = exemplars
        .par_iter()
        .filter_map(|q| match enc.embed(&q.glyph) {
            Ok(e) => Some((q, e)),
            Err(err) => {
                warn!("exemplar {} skipped: {err}", q.id);
                None
            }
        })
        .collect();
    let covered: BTreeSet<char> = embedded.iter().map(|(q, _)| q.truth).collect();

    // Who retrieved whom, own label only.
    let mut retrieved_by: BTreeMap<u64, Vec<String>> = BTreeMap::new();
    let hits: Vec<Vec<(u64, String)>> = embedded
        .par_iter()
        .map(|(q, e)| {
            ix.query_topk(e, k).map(|ms| {
                ms.into_iter()
                    .filter(|m| m.label == q.truth)
                    .map(|m| (m.entry_id, q.id.clone()))
                    .collect()
            })
        })
        .collect::<Result<_, _>>()?;
    for (id, q) in hits.into_iter().flatten() {
        retrieved_by.entry(id).or_default().push(q);
    }

    // Best similarity of every entry to any exemplar.
    let mut best = vec![f64::NEG_INFINITY; ix.len()];
    for (_, e) in &embedded {
        let sims = ix.similarities(e.values())?;
        for (b, s) in best.iter_mut().zip(sims) {
            *b = b.max(s);
        }
    }
    let median = lower_median(&best);

    let mut entries = BTreeMap::new();
    for (i, (&id, &label)) in ix.entry_ids().iter().zip(ix.labels()).enumerate() {
        let support = if covered.contains(&label) {
            let ex = retrieved_by.remove(&id).unwrap_or_default();
            Support {
                supported: !ex.is_empty(),
                mode: SupportMode::Supervised,
                exemplars: ex,
                score: None,
            }
        } else {
            let score = best[i].is_finite().then_some(best[i]);
            Support {
                supported: median.is_none_or(|m| best[i] >= m),
                mode: SupportMode::Unsupervised,
                exemplars: Vec::new(),
                score,
            }
        };
        entries.insert(id, support);
    }
    Ok(SupportMap { entries, median })
}

const JITTER_STREAM: u64 = 0x7177_E400;

pub fn regeneration_seed(global_seed: u64, label: char, variant_index: u32, iteration: u32) -> u64 {
    seed::hash64(&[global_seed, label as u64, variant_index as u64, iteration as u64])
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    #[serde(with = "seed::hex_id::vec")]
    pub regenerated: Vec<u64>,
    pub failures: Vec<String>,
}

/// Supported entries are copied verbatim; the rest are regenerated with
/// their schedule parameters jittered by ±20%. A failed regeneration keeps
/// the old entry.
pub fn refine_step(
    d: &Dictionary,
    support: &SupportMap,
    specs: &BTreeMap<char, CharSpec>,
    generator: &dyn VariantGenerator,
    iteration: u32,
) -> Result<(Dictionary, StepReport), RefineError> {
    let cfg = &d.config;
    let k = cfg.variants_per_label;
    let results: Vec<(DictionaryEntry, Option<Result<(), String>>)> = d
        .entries
        .par_iter()
        .map(|e| {
            if support.is_supported(e.entry_id) {
                return Ok((e.clone(), None));
            }
            let spec = specs.get(&e.label).ok_or(RefineError::MissingSpec(e.label))?;
            let s = regeneration_seed(cfg.global_seed, e.label, e.variant_index, iteration);
            let mut rng = seed::rng(seed::hash64(&[s, JITTER_STREAM]));
            let factors: [f64; 4] = std::array::from_fn(|_| rng.random_range(0.8..=1.2));
            let params = cfg.schedule.params(e.variant_index as usize, k).scaled(factors);
            Ok(match synthesis::generate_one(spec, generator, s, &params) {
                Ok((glyph, stage_trace)) => (
                    DictionaryEntry {
                        glyph,
                        seed: s,
                        stage_trace,
                        ..e.clone()
                    },
                    Some(Ok(())),
                ),
                Err(err) => (e.clone(), Some(Err(format!("{}#{}: {err}", e.label, e.variant_index)))),
            })
        })
        .collect::<Result<_, RefineError>>()?;

    let mut report = StepReport::default();
    let mut entries = Vec::with_capacity(results.len());
    for (entry, outcome) in results {
        match outcome {
            Some(Ok(())) => report.regenerated.push(entry.entry_id),
            Some(Err(msg)) => {
                warn!("regeneration failed, keeping entry: {msg}");
                report.failures.push(msg);
            }
            None => {}
        }
        entries.push(entry);
    }
    let out = Dictionary {
        entries,
        generation: d.generation + 1,
        ..d.clone_header()
    };
    Ok((out, report))
}

impl Dictionary {
    /// Everything but the entries.
    fn clone_header(&self) -> Dictionary {
        Dictionary {
            entries: Vec::new(),
            generation: self.generation,
            charset: self.charset.clone(),
            config_fingerprint: self.config_fingerprint,
            config: self.config.clone(),
            ids: self.ids.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineConfig {
    pub iterations: u32,
    pub patience: u32,
    pub support_k: usize,
    pub query: QueryParams,
    /// Fingerprints of test images; any exemplar or validation glyph that
    /// matches one aborts the run before it starts.
    #[serde(skip)]
    pub test_fingerprints: BTreeSet<u64>,
    /// Per-generation snapshots go to `<dir>/gen-NNNN/`.
    #[serde(skip)]
    pub snapshot_dir: Option<PathBuf>,
}

impl RefineConfig {
    pub fn new(iterations: u32, variants_per_label: usize) -> Self {
        Self {
            iterations,
            patience: 3,
            support_k: retrieval::DEFAULT_K,
            query: QueryParams {
                k: 100 * variants_per_label.max(1),
                ..Default::default()
            },
            test_fingerprints: BTreeSet::new(),
            snapshot_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    pub iteration: u32,
    pub generation: u32,
    pub supported: usize,
    pub regenerated: usize,
    pub failures: Vec<String>,
    pub validation: TopNCurve,
    pub improved: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stop_reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementTrace {
    pub iterations: Vec<IterationTrace>,
    pub best_generation: u32,
    pub stop_reason: String,
    pub encoder_id: String,
}

impl RefinementTrace {
    pub fn write(&self, path: &Path) -> Result<(), RefineError> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n").map_err(|source| RefineError::Io {
            path: path.to_owned(),
            source,
        })
    }
}

/// Validation accuracies from the largest N down, compared lexicographically:
/// Top-100 decides, smaller N break ties.
fn curve_key(c: &TopNCurve) -> Vec<f64> {
    c.accuracy.values().rev().copied().collect()
}

fn better(a: &[f64], b: &[f64]) -> bool {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            std::cmp::Ordering::Greater => return true,
            std::cmp::Ordering::Less => return false,
            std::cmp::Ordering::Equal => {}
        }
    }
    false
}

pub fn validation_curve(ix: &Index, enc: &dyn Encoder, validation: &[Query], params: QueryParams) -> Result<TopNCurve, RefineError> {
    let ranked = evaluation::rank_queries(ix, enc, validation, params);
    let rankings: Vec<Vec<char>> = ranked.into_iter().map(|r| r.unwrap_or_default()).collect();
    let truths: Vec<char> = validation.iter().map(|q| q.truth).collect();
    Ok(TopNCurve::from_rankings(&rankings, &truths, &TOP_N)?)
}

fn check_inputs(exemplars: &[Query], validation: &[Query], cfg: &RefineConfig) -> Result<(), RefineError> {
    if cfg.iterations == 0 {
        return Err(RefineError::NoIterations);
    }
    if validation.is_empty() {
        return Err(RefineError::NoValidation);
    }
    let ex: BTreeSet<char> = exemplars.iter().map(|q| q.truth).collect();
    let va: BTreeSet<char> = validation.iter().map(|q| q.truth).collect();
    let shared: Vec<char> = ex.intersection(&va).copied().collect();
    if !shared.is_empty() {
        return Err(RefineError::OverlappingLabels(shared));
    }
    for (set, qs) in [("exemplar", exemplars), ("validation", validation)] {
        if let Some(q) = qs
            .iter()
            .find(|q| cfg.test_fingerprints.contains(&evaluation::glyph_fingerprint(&q.glyph)))
        {
            return Err(RefineError::TestLeakage { set, id: q.id.clone() });
        }
    }
    Ok(())
}

fn snapshot_path(dir: &Path, generation: u32) -> PathBuf {
    dir.join(format!("gen-{generation:04}"))
}

/// Saves `d` under `dir`, hard-linking images of entries not in `changed`
/// from `prev` (falling back to a fresh write if linking fails).
pub fn write_snapshot(d: &Dictionary, dir: &Path, prev: Option<&Path>, changed: &BTreeSet<u64>) -> Result<(), RefineError> {
    d.save_with(dir, |e, dst| {
        let Some(prev) = prev else { return Ok(false) };
        if changed.contains(&e.entry_id) {
            return Ok(false);
        }
        let src = prev.join(synthesis::image_relpath(e.entry_id));
        if dst.exists() {
            fs::remove_file(dst)?;
        }
        Ok(fs::hard_link(&src, dst).is_ok())
    })?;
    Ok(())
}

/// Runs up to `cfg.iterations` rounds of support → regenerate → re-index →
/// validate, stopping after `cfg.patience` rounds without a validation gain,
/// and returns the best generation seen (iteration 0 included).
pub fn refine_loop(
    d: Dictionary,
    specs: &BTreeMap<char, CharSpec>,
    generator: &dyn VariantGenerator,
    enc: &dyn Encoder,
    exemplars: &[Query],
    validation: &[Query],
    cfg: &RefineConfig,
) -> Result<(Dictionary, RefinementTrace), RefineError> {
    check_inputs(exemplars, validation, cfg)?;
    if let Some(label) = d.charset.iter().find(|l| !specs.contains_key(l)) {
        return Err(RefineError::MissingSpec(*label));
    }

    let mut ix = retrieval::build_index(&d, enc)?;
    let curve = validation_curve(&ix, enc, validation, cfg.query)?;
    let mut best_key = curve_key(&curve);
    let mut trace = RefinementTrace {
        iterations: vec![IterationTrace {
            iteration: 0,
            generation: d.generation,
            supported: d.len(),
            regenerated: 0,
            failures: Vec::new(),
            validation: curve,
            improved: false,
            stop_reason: None,
        }],
        best_generation: d.generation,
        stop_reason: String::new(),
        encoder_id: enc.id(),
    };
    let mut prev_snapshot = None;
    if let Some(dir) = &cfg.snapshot_dir {
        let p = snapshot_path(dir, d.generation);
        write_snapshot(&d, &p, None, &BTreeSet::new())?;
        prev_snapshot = Some(p);
    }

    let mut best = d.clone();
    let mut current = d;
    let mut stale = 0;
    let mut stop = format!("completed {} iterations", cfg.iterations);
    for it in 1..=cfg.iterations {
        let support = compute_support(&ix, enc, exemplars, cfg.support_k)?;
        let (next, step) = refine_step(&current, &support, specs, generator, it)?;
        ix = retrieval::build_index(&next, enc)?;
        let curve = validation_curve(&ix, enc, validation, cfg.query)?;
        let key = curve_key(&curve);
        let improved = better(&key, &best_key);
        if improved {
            best_key = key;
            best = next.clone();
            stale = 0;
        } else {
            stale += 1;
        }
        info!(
            "iteration {it}: generation {}, {} regenerated, validation Top-{} {:.4}{}",
            next.generation,
            step.regenerated.len(),
            TOP_N[TOP_N.len() - 1],
            curve.at(TOP_N[TOP_N.len() - 1]).unwrap_or(0.0),
            if improved { " (best)" } else { "" }
        );
        if let Some(dir) = &cfg.snapshot_dir {
            let p = snapshot_path(dir, next.generation);
            let changed: BTreeSet<u64> = step.regenerated.iter().copied().collect();
            write_snapshot(&next, &p, prev_snapshot.as_deref(), &changed)?;
            prev_snapshot = Some(p);
        }
        trace.iterations.push(IterationTrace {
            iteration: it,
            generation: next.generation,
            supported: support.supported_count(),
            regenerated: step.regenerated.len(),
            failures: step.failures,
            validation: curve,
            improved,
            stop_reason: None,
        });
        current = next;
        if stale >= cfg.patience {
            stop = format!("no validation improvement for {} iterations", cfg.patience);
            break;
        }
    }
    if let Some(last) = trace.iterations.last_mut() {
        last.stop_reason = Some(stop.clone());
    }
    trace.stop_reason = stop;
    trace.best_generation = best.generation;
    Ok((best, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demo;
    use crate::encoder::HandcraftedEncoder;
    use crate::synthesis::{build_dictionary, char_specs, DictionaryConfig};

    fn setup(labels: &[char], k: usize) -> (Dictionary, BTreeMap<char, CharSpec>, DictionaryConfig) {
        let fonts = demo::procedural_fonts();
        let specs = char_specs(labels, &demo::ids_table(), &fonts).unwrap();
        let cfg = DictionaryConfig::new(k, 5, &fonts);
        let (d, _) = build_dictionary(&specs, &cfg).unwrap();
        (d, specs.into_iter().map(|s| (s.label, s)).collect(), cfg)
    }

    fn exemplar(e: &DictionaryEntry) -> Query {
        Query {
            id: format!("{:016x}", e.entry_id),
            truth: e.label,
            glyph: e.glyph.clone(),
        }
    }

    #[test]
    fn lower_median_picks_lower_middle() {
        assert_eq!(lower_median(&[3.0, 1.0, 2.0, 4.0]), Some(2.0));
        assert_eq!(lower_median(&[5.0]), Some(5.0));
        assert_eq!(lower_median(&[]), None);
    }

    #[test]
    fn exemplar_equal_to_entry_supports_it() {
        let (d, _, _) = setup(&['明', '林'], 3);
        let enc = HandcraftedEncoder::default();
        let ix = retrieval::build_index(&d, &enc).unwrap();
        let e = &d.entries[1];
        let s = compute_support(&ix, &enc, &[exemplar(e)], 1).unwrap();
        assert!(s.covers(&d));
        assert!(s.is_supported(e.entry_id));
        assert_eq!(s.entries[&e.entry_id].mode, SupportMode::Supervised);
    }

    #[test]
    fn no_exemplars_supports_everything() {
        let (d, _, _) = setup(&['明'], 1);
        let enc = HandcraftedEncoder::default();
        let ix = retrieval::build_index(&d, &enc).unwrap();
        let s = compute_support(&ix, &enc, &[], 10).unwrap();
        assert_eq!(s.supported_count(), 1);
    }

    #[test]
    fn all_supported_step_only_bumps_generation() {
        let (d, specs, cfg) = setup(&['明', '林'], 2);
        let all = SupportMap {
            entries: d
                .entries
                .iter()
                .map(|e| {
                    (
                        e.entry_id,
                        Support {
                            supported: true,
                            mode: SupportMode::Supervised,
                            exemplars: vec![],
                            score: None,
                        },
                    )
                })
                .collect(),
            median: None,
        };
        let (next, rep) = refine_step(&d, &all, &specs, &cfg.generator(), 1).unwrap();
        assert!(rep.regenerated.is_empty());
        assert_eq!(next.entries, d.entries);
        assert_eq!(next.generation, d.generation + 1);
    }

    #[test]
    fn one_unsupported_entry_changes_alone() {
        let (d, specs, cfg) = setup(&['明', '林'], 2);
        let target = d.entries[2].entry_id;
        let map = SupportMap {
            entries: d
                .entries
                .iter()
                .map(|e| {
                    (
                        e.entry_id,
                        Support {
                            supported: e.entry_id != target,
                            mode: SupportMode::Supervised,
                            exemplars: vec![],
                            score: None,
                        },
                    )
                })
                .collect(),
            median: None,
        };
        let (next, rep) = refine_step(&d, &map, &specs, &cfg.generator(), 1).unwrap();
        assert_eq!(rep.regenerated, vec![target]);
        let differing: Vec<u64> = d
            .entries
            .iter()
            .zip(&next.entries)
            .filter(|(a, b)| a.glyph != b.glyph)
            .map(|(a, _)| a.entry_id)
            .collect();
        assert_eq!(differing, vec![target]);
    }

    #[test]
    fn overlapping_labels_and_leakage_are_rejected() {
        let (d, specs, cfg) = setup(&['明', '林'], 2);
        let enc = HandcraftedEncoder::default();
        let gen = cfg.generator();
        let ex = vec![exemplar(&d.entries[0])];
        let rc = RefineConfig::new(1, 2);
        let err = refine_loop(d.clone(), &specs, &gen, &enc, &ex, &ex, &rc).unwrap_err();
        assert!(matches!(err, RefineError::OverlappingLabels(_)));

        let val = vec![exemplar(&d.entries[3])];
        let mut rc = RefineConfig::new(1, 2);
        rc.test_fingerprints.insert(evaluation::glyph_fingerprint(&val[0].glyph));
        let err = refine_loop(d.clone(), &specs, &gen, &enc, &ex, &val, &rc).unwrap_err();
        assert!(matches!(err, RefineError::TestLeakage { set: "validation", .. }));
        assert!(matches!(
            refine_loop(d, &specs, &gen, &enc, &ex, &val, &RefineConfig::new(0, 2)),
            Err(RefineError::NoIterations)
        ));
    }

    #[test]
    fn single_iteration_trace() {
        let (d, specs, cfg) = setup(&['明', '林', '好'], 2);
        let enc = HandcraftedEncoder::default();
        let ex = vec![exemplar(&d.entries[0]), exemplar(&d.entries[2])];
        let val = vec![exemplar(&d.entries[4])];
        let (best, trace) = refine_loop(d.clone(), &specs, &cfg.generator(), &enc, &ex, &val, &RefineConfig::new(1, 2)).unwrap();
        assert_eq!(trace.iterations.len(), 2);
        assert_eq!(trace.iterations[1].generation, 1);
        assert!(trace.iterations[1].stop_reason.is_some());
        assert_eq!(best.generation, trace.best_generation);
        assert_eq!(best.len(), d.len());
    }

    #[test]
    fn lexicographic_comparison() {
        assert!(better(&[0.9, 0.5], &[0.8, 0.9]));
        assert!(better(&[0.9, 0.6], &[0.9, 0.5]));
        assert!(!better(&[0.9, 0.5], &[0.9, 0.5]));
    }
}
