//! Exact cosine top-k over the dictionary embeddings and label voting.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::{Arc, RwLock};

use image::GrayImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{self, Embedding, Encoder, EncoderError};
use crate::glyph::{self, Glyph, GlyphError};
use crate::seed;
use crate::synthesis::Dictionary;

pub const DEFAULT_K: usize = 50;
pub const STORE_FILE: &str = "embeddings.obse";
pub const META_FILE: &str = "index_meta.json";
const CHUNK: usize = 1024;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("dictionary is empty")]
    EmptyDictionary,
    #[error("entry {entry_id:016x}: {source}")]
    Embed {
        entry_id: u64,
        #[source]
        source: EncoderError,
    },
    #[error("query has dimension {query}, index has {index}")]
    DimensionMismatch { query: usize, index: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error(transparent)]
    Image(#[from] GlyphError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error("index does not match dictionary: {0}")]
    Stale(String),
    #[error("io: {0}")]
    Io(String),
}

/// Dictionary embeddings with parallel entry ids and labels. Immutable once
/// built; rows are in dictionary (manifest) order.
#[derive(Debug, Clone, PartialEq)]
pub struct Index {
    dim: usize,
    embeddings: Vec<f32>,
    entry_ids: Vec<u64>,
    labels: Vec<char>,
    generation: u32,
    fingerprint: u64,
    encoder_id: String,
    canvas: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexMeta {
    pub generation: u32,
    pub dim: usize,
    pub count: usize,
    pub dictionary_fingerprint: String,
    pub encoder_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Match {
    #[serde(with = "seed::hex_id")]
    pub entry_id: u64,
    pub label: char,
    pub similarity: f64,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelScore {
    pub label: char,
    pub score: f64,
    pub best_similarity: f64,
    #[serde(with = "seed::hex_id::vec")]
    pub supporting_entry_ids: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    #[serde(with = "seed::hex_id")]
    pub query_id: u64,
    pub matches: Vec<Match>,
    pub label_ranking: Vec<LabelScore>,
    pub index_generation: u32,
}

impl RetrievalResult {
    pub fn labels(&self) -> Vec<char> {
        self.label_ranking.iter().map(|l| l.label).collect()
    }
}

/// How matches are turned into label scores.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VoteRule {
    /// Sum of similarities of the label's matches.
    #[default]
    Sum,
    /// Number of the label's matches.
    Count,
}

impl std::fmt::Display for VoteRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            VoteRule::Sum => "sum",
            VoteRule::Count => "count",
        })
    }
}

impl std::str::FromStr for VoteRule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sum" => Ok(VoteRule::Sum),
            "count" => Ok(VoteRule::Count),
            other => Err(format!("unknown voting rule {other:?} (expected sum or count)")),
        }
    }
}

impl Index {
    /// Assembles an index from unit rows.
    pub fn from_parts(
        dim: usize,
        embeddings: Vec<f32>,
        entry_ids: Vec<u64>,
        labels: Vec<char>,
        generation: u32,
        fingerprint: u64,
        encoder_id: String,
    ) -> Self {
        assert_eq!(embeddings.len(), dim * entry_ids.len(), "embedding matrix shape");
        assert_eq!(entry_ids.len(), labels.len(), "parallel arrays");
        Self {
            dim,
            embeddings,
            entry_ids,
            labels,
            generation,
            fingerprint,
            encoder_id,
            canvas: glyph::CANVAS,
        }
    }

    /// Side length queries are normalized to before embedding.
    pub fn with_canvas(mut self, canvas: usize) -> Self {
        self.canvas = canvas;
        self
    }

    pub fn canvas(&self) -> usize {
        self.canvas
    }

    pub fn build(d: &Dictionary, enc: &dyn Encoder) -> Result<Index, RetrievalError> {
        build_index(d, enc)
    }

    pub fn len(&self) -> usize {
        self.entry_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entry_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn generation(&self) -> u32 {
        self.generation
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn encoder_id(&self) -> &str {
        &self.encoder_id
    }

    pub fn entry_ids(&self) -> &[u64] {
        &self.entry_ids
    }

    pub fn labels(&self) -> &[char] {
        &self.labels
    }

    pub fn embeddings(&self) -> &[f32] {
        &self.embeddings
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.embeddings[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label_count(&self) -> usize {
        let mut l = self.labels.clone();
        l.sort_unstable();
        l.dedup();
        l.len()
    }

    pub fn meta(&self) -> IndexMeta {
        IndexMeta {
            generation: self.generation,
            dim: self.dim,
            count: self.len(),
            dictionary_fingerprint: format!("{:016x}", self.fingerprint),
            encoder_id: self.encoder_id.clone(),
        }
    }

    /// Cosine similarity of `q` against every row, in row order.
    pub fn similarities(&self, q: &[f32]) -> Result<Vec<f64>, RetrievalError> {
        if q.len() != self.dim {
            return Err(RetrievalError::DimensionMismatch {
                query: q.len(),
                index: self.dim,
            });
        }
        let mut sims = vec![0.0f64; self.len()];
        sims.par_chunks_mut(CHUNK).enumerate().for_each(|(c, out)| {
            for (j, s) in out.iter_mut().enumerate() {
                *s = encoder::dot(self.row(c * CHUNK + j), q);
            }
        });
        Ok(sims)
    }

    /// Exact top-k by cosine, ties broken by ascending entry id; `k` is
    /// clamped to the index size.
    pub fn query_topk(&self, q: &Embedding, k: usize) -> Result<Vec<Match>, RetrievalError> {
        if k == 0 {
            return Err(RetrievalError::ZeroK);
        }
        let sims = self.similarities(q.values())?;
        let k = k.min(self.len());
        let order = |&a: &usize, &b: &usize| -> Ordering {
            cmp_f64(sims[b], sims[a]).then(self.entry_ids[a].cmp(&self.entry_ids[b]))
        };
        let mut rows: Vec<usize> = (0..self.len()).collect();
        if k < rows.len() {
            rows.select_nth_unstable_by(k - 1, order);
            rows.truncate(k);
        }
        rows.sort_unstable_by(order);
        Ok(rows
            .into_iter()
            .enumerate()
            .map(|(rank, i)| Match {
                entry_id: self.entry_ids[i],
                label: self.labels[i],
                similarity: sims[i],
                rank,
            })
            .collect())
    }

    /// Writes the embedding store and `index_meta.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), RetrievalError> {
        fs::create_dir_all(dir).map_err(|e| RetrievalError::Io(format!("{}: {e}", dir.display())))?;
        encoder::write_store(&dir.join(STORE_FILE), self.dim, &self.embeddings)?;
        let path = dir.join(META_FILE);
        let json = serde_json::to_string_pretty(&self.meta()).expect("meta serializes") + "\n";
        fs::write(&path, json).map_err(|e| RetrievalError::Io(format!("{}: {e}", path.display())))
    }

    /// Loads a saved index; ids and labels come from the dictionary, whose
    /// fingerprint, generation and size must match the saved metadata.
    pub fn load(dir: &Path, d: &Dictionary) -> Result<Index, RetrievalError> {
        let path = dir.join(META_FILE);
        let text = fs::read_to_string(&path).map_err(|e| RetrievalError::Io(format!("{}: {e}", path.display())))?;
        let meta: IndexMeta =
            serde_json::from_str(&text).map_err(|e| RetrievalError::Io(format!("{}: {e}", path.display())))?;
        let (dim, embeddings) = encoder::read_store(&dir.join(STORE_FILE))?;
        let fp = format!("{:016x}", d.config_fingerprint);
        if meta.dictionary_fingerprint != fp || meta.generation != d.generation {
            return Err(RetrievalError::Stale(format!(
                "index is for {} generation {}, dictionary is {fp} generation {}",
                meta.dictionary_fingerprint, meta.generation, d.generation
            )));
        }
        if dim != meta.dim || embeddings.len() != dim * d.len() || meta.count != d.len() {
            return Err(RetrievalError::Stale(format!(
                "{} rows of {dim} for {} entries",
                embeddings.len() / dim.max(1),
                d.len()
            )));
        }
        Ok(Index::from_parts(
            dim,
            embeddings,
            d.entries.iter().map(|e| e.entry_id).collect(),
            d.entries.iter().map(|e| e.label).collect(),
            d.generation,
            d.config_fingerprint,
            meta.encoder_id,
        )
        .with_canvas(d.config.canvas))
    }
}

/// Embeds every dictionary entry, in dictionary order.
pub fn build_index(d: &Dictionary, enc: &dyn Encoder) -> Result<Index, RetrievalError> {
    if d.is_empty() {
        return Err(RetrievalError::EmptyDictionary);
    }
    let rows: Vec<Embedding> = d
        .entries
        .par_iter()
        .map(|e| {
            enc.embed(&e.glyph).map_err(|source| RetrievalError::Embed {
                entry_id: e.entry_id,
                source,
            })
        })
        .collect::<Result<_, _>>()?;
    let dim = enc.dim();
    let mut embeddings = Vec::with_capacity(dim * rows.len());
    for r in rows {
        embeddings.extend(r.into_values());
    }
    Ok(Index::from_parts(
        dim,
        embeddings,
        d.entries.iter().map(|e| e.entry_id).collect(),
        d.entries.iter().map(|e| e.label).collect(),
        d.generation,
        d.config_fingerprint,
        enc.id(),
    )
    .with_canvas(d.config.canvas))
}

/// Index over one glyph per label (the direct-retrieval baseline).
pub fn build_label_index(glyphs: &[(char, Glyph)], enc: &dyn Encoder) -> Result<Index, RetrievalError> {
    if glyphs.is_empty() {
        return Err(RetrievalError::EmptyDictionary);
    }
    let ids: Vec<u64> = glyphs.iter().map(|(l, _)| seed::hash64(&[seed::domain("label-index"), *l as u64])).collect();
    let rows: Vec<Embedding> = glyphs
        .par_iter()
        .zip(&ids)
        .map(|((_, g), &id)| enc.embed(g).map_err(|source| RetrievalError::Embed { entry_id: id, source }))
        .collect::<Result<_, _>>()?;
    let mut embeddings = Vec::with_capacity(enc.dim() * rows.len());
    for r in rows {
        embeddings.extend(r.into_values());
    }
    let fp = seed::hash64(&ids);
    Ok(Index::from_parts(
        enc.dim(),
        embeddings,
        ids,
        glyphs.iter().map(|(l, _)| *l).collect(),
        0,
        fp,
        enc.id(),
    ))
}

/// Numeric order with 0.0 == -0.0, so signed zeros fall through to the
/// tie-break; NaN (never produced by unit vectors) sorts by bit pattern.
fn cmp_f64(a: f64, b: f64) -> Ordering {
    a.partial_cmp(&b).unwrap_or_else(|| a.total_cmp(&b))
}

/// Groups matches by label and orders the labels by
/// (score desc, best similarity desc, codepoint asc).
pub fn vote_labels(matches: &[Match], rule: VoteRule) -> Vec<LabelScore> {
    let mut by_label: BTreeMap<char, LabelScore> = BTreeMap::new();
    for m in matches {
        let e = by_label.entry(m.label).or_insert_with(|| LabelScore {
            label: m.label,
            score: 0.0,
            best_similarity: f64::NEG_INFINITY,
            supporting_entry_ids: Vec::new(),
        });
        e.score += match rule {
            VoteRule::Sum => m.similarity,
            VoteRule::Count => 1.0,
        };
        e.best_similarity = e.best_similarity.max(m.similarity);
        e.supporting_entry_ids.push(m.entry_id);
    }
    let mut out: Vec<LabelScore> = by_label.into_values().collect();
    out.sort_by(|a, b| {
        cmp_f64(b.score, a.score)
            .then(cmp_f64(b.best_similarity, a.best_similarity))
            .then(a.label.cmp(&b.label))
    });
    out
}

/// Query id from the image bytes and a caller-supplied salt.
pub fn query_id(image_bytes: &[u8], salt: u64) -> u64 {
    seed::hash64(&[seed::hash_bytes(image_bytes), salt])
}

/// Retrieval settings shared by every entry point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueryParams {
    pub k: usize,
    pub rule: VoteRule,
}

impl Default for QueryParams {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            rule: VoteRule::Sum,
        }
    }
}

/// Retrieval for an already normalized glyph.
pub fn decipher_normalized(
    ix: &Index,
    enc: &dyn Encoder,
    g: &Glyph,
    params: QueryParams,
    query_id: u64,
) -> Result<RetrievalResult, RetrievalError> {
    let q = enc.embed(g)?;
    let matches = ix.query_topk(&q, params.k)?;
    let label_ranking = vote_labels(&matches, params.rule);
    Ok(RetrievalResult {
        query_id,
        matches,
        label_ranking,
        index_generation: ix.generation(),
    })
}

/// normalize → embed → top-k → vote.
pub fn decipher(
    ix: &Index,
    enc: &dyn Encoder,
    image: &GrayImage,
    params: QueryParams,
    query_id: u64,
) -> Result<RetrievalResult, RetrievalError> {
    let g = glyph::normalize_to(image, ix.canvas())?;
    decipher_normalized(ix, enc, &g, params, query_id)
}

/// Retrieval for a glyph that still needs normalizing (e.g. a degraded one):
/// it is rendered to an image and enters through [`decipher`].
pub fn decipher_glyph(
    ix: &Index,
    enc: &dyn Encoder,
    g: &Glyph,
    params: QueryParams,
    query_id: u64,
) -> Result<RetrievalResult, RetrievalError> {
    let n = g.size();
    let img = glyph::normalize_to(&g.to_image(), n)?;
    decipher_normalized(ix, enc, &img, params, query_id)
}

/// Shared, atomically swappable handle to the current index. Readers take a
/// snapshot and finish against it even if a new generation is installed.
#[derive(Debug, Default)]
pub struct IndexHandle<T> {
    current: RwLock<Option<Arc<T>>>,
}

impl<T> IndexHandle<T> {
    pub fn new(value: T) -> Self {
        Self {
            current: RwLock::new(Some(Arc::new(value))),
        }
    }

    pub fn empty() -> Self {
        Self {
            current: RwLock::new(None),
        }
    }

    pub fn get(&self) -> Option<Arc<T>> {
        self.current.read().expect("index lock poisoned").clone()
    }

    /// Installs `value`, returning the previous snapshot.
    pub fn swap(&self, value: T) -> Option<Arc<T>> {
        self.current.write().expect("index lock poisoned").replace(Arc::new(value))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_index(n: usize, dim: usize, seed_: u64) -> Index {
        let mut rng = seed::rng(seed_);
        let mut data = Vec::with_capacity(n * dim);
        for _ in 0..n {
            let v: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            data.extend(Embedding::normalized(v).unwrap().into_values());
        }
        let ids: Vec<u64> = (0..n as u64).map(|i| seed::hash64(&[i])).collect();
        let labels: Vec<char> = (0..n).map(|i| char::from_u32(0x4E00 + (i % 37) as u32).unwrap()).collect();
        Index::from_parts(dim, data, ids, labels, 3, 1, "test".into())
    }

    #[test]
    fn self_match_ranks_first() {
        let ix = random_index(200, 16, 1);
        let q = Embedding::from_unit(ix.row(17).to_vec());
        let m = ix.query_topk(&q, 5).unwrap();
        assert_eq!(m[0].entry_id, ix.entry_ids()[17]);
        assert!((m[0].similarity - 1.0).abs() < 1e-6);
        assert_eq!(m.iter().map(|m| m.rank).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4]);
        assert!(m.windows(2).all(|w| w[0].similarity >= w[1].similarity));
    }

    #[test]
    fn k_is_clamped_and_zero_rejected() {
        let ix = random_index(7, 4, 2);
        let q = Embedding::from_unit(ix.row(0).to_vec());
        assert_eq!(ix.query_topk(&q, 100).unwrap().len(), 7);
        assert!(matches!(ix.query_topk(&q, 0), Err(RetrievalError::ZeroK)));
        let short = Embedding::from_unit(vec![1.0; 3]);
        assert!(matches!(
            ix.query_topk(&short, 1),
            Err(RetrievalError::DimensionMismatch { query: 3, index: 4 })
        ));
    }

    #[test]
    fn ties_break_by_entry_id() {
        let rows = vec![1.0f32, 0.0, 1.0, 0.0, 1.0, 0.0];
        let ix = Index::from_parts(2, rows, vec![30, 10, 20], vec!['a', 'b', 'c'], 0, 0, "t".into());
        let m = ix.query_topk(&Embedding::from_unit(vec![1.0, 0.0]), 2).unwrap();
        assert_eq!(m.iter().map(|m| m.entry_id).collect::<Vec<_>>(), vec![10, 20]);
    }

    fn mk(label: char, sim: f64, id: u64, rank: usize) -> Match {
        Match {
            entry_id: id,
            label,
            similarity: sim,
            rank,
        }
    }

    #[test]
    fn sum_rule_prefers_two_moderate_votes() {
        let m = vec![mk('A', 0.9, 1, 0), mk('B', 0.5, 2, 1), mk('B', 0.5, 3, 2)];
        let v = vote_labels(&m, VoteRule::Sum);
        assert_eq!(v.iter().map(|l| l.label).collect::<String>(), "BA");
        assert_eq!(v[0].score, 1.0);
        assert_eq!(v[0].supporting_entry_ids, vec![2, 3]);
        assert_eq!(v[1].best_similarity, 0.9);
    }

    #[test]
    fn single_label_and_empty() {
        let m = vec![mk('x', 0.25, 1, 0), mk('x', 0.5, 2, 1)];
        let v = vote_labels(&m, VoteRule::Sum);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].score, 0.75);
        assert!(vote_labels(&[], VoteRule::Sum).is_empty());
    }

    #[test]
    fn count_rule_and_tie_breaks() {
        let m = vec![mk('b', 0.9, 1, 0), mk('a', 0.9, 2, 1), mk('c', 0.2, 3, 2), mk('c', 0.1, 4, 3)];
        let v = vote_labels(&m, VoteRule::Count);
        assert_eq!(v.iter().map(|l| l.label).collect::<String>(), "cab");
        let v = vote_labels(&m, VoteRule::Sum);
        // a and b tie on score and best similarity; codepoint decides.
        assert_eq!(v.iter().map(|l| l.label).collect::<String>(), "abc");
    }

    #[test]
    fn save_load_round_trip() {
        use crate::synthesis::{build_dictionary, char_specs, DictionaryConfig};
        let fonts = crate::demo::procedural_fonts();
        let specs = char_specs(&['木', '林'], &crate::demo::ids_table(), &fonts).unwrap();
        let (d, _) = build_dictionary(&specs, &DictionaryConfig::new(2, 5, &fonts)).unwrap();
        let enc = crate::encoder::HandcraftedEncoder::default();
        let ix = build_index(&d, &enc).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ix.save(dir.path()).unwrap();
        assert_eq!(Index::load(dir.path(), &d).unwrap(), ix);
        let mut other = d.clone();
        other.generation += 1;
        assert!(matches!(Index::load(dir.path(), &other), Err(RetrievalError::Stale(_))));
    }

    #[test]
    fn handle_swaps_atomically() {
        let h = IndexHandle::new(1u32);
        let before = h.get().unwrap();
        h.swap(2);
        assert_eq!(*before, 1);
        assert_eq!(*h.get().unwrap(), 2);
        assert!(IndexHandle::<u32>::empty().get().is_none());
    }
}
