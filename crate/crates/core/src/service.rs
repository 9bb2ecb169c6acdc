//! HTTP surface of the workbench: query, evidence images, append-only
//! annotations and index statistics.

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use axum::body::Body;
use axum::extract::{DefaultBodyLimit, Multipart, Path as UrlPath, Query as UrlQuery, State};
use axum::http::{header, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use log::info;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::{mpsc, oneshot};

use crate::encoder::{Encoder, HandcraftedEncoder};
use crate::retrieval::{self, Index, IndexHandle, QueryParams, RetrievalError, RetrievalResult};
use crate::seed;
use crate::synthesis::{self, Dictionary, SynthesisError};

/// Index directory inside a dictionary directory.
pub const INDEX_DIR: &str = "index";
pub const DEFAULT_N: usize = 10;
pub const MAX_N: usize = 100;
/// Supporting variants shown per candidate.
pub const EVIDENCE_PER_LABEL: usize = 3;

#[derive(Debug, Error)]
pub enum WorkspaceError {
    #[error(transparent)]
    Synthesis(#[from] SynthesisError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error("index was built by encoder {index}, serving with {current}")]
    EncoderMismatch { index: String, current: String },
}

/// A dictionary with its index, as served.
#[derive(Debug)]
pub struct Workspace {
    pub dictionary: Dictionary,
    pub index: Index,
    pub dict_dir: PathBuf,
}

impl Workspace {
    /// Loads `dict_dir` and its saved index (or embeds the dictionary when
    /// none was saved).
    pub fn open(dict_dir: &Path, enc: &dyn Encoder) -> Result<Workspace, WorkspaceError> {
        let dictionary = Dictionary::load(dict_dir)?;
        let ix_dir = dict_dir.join(INDEX_DIR);
        let index = if ix_dir.join(retrieval::META_FILE).exists() {
            let ix = Index::load(&ix_dir, &dictionary)?;
            if ix.encoder_id() != enc.id() {
                return Err(WorkspaceError::EncoderMismatch {
                    index: ix.encoder_id().to_owned(),
                    current: enc.id(),
                });
            }
            ix
        } else {
            retrieval::build_index(&dictionary, enc)?
        };
        Ok(Workspace {
            dictionary,
            index,
            dict_dir: dict_dir.to_owned(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Confirmed,
    Rejected,
    Uncertain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    #[serde(with = "seed::hex_id")]
    pub annotation_id: u64,
    #[serde(with = "seed::hex_id")]
    pub query_id: u64,
    pub chosen_label: Option<char>,
    pub verdict: Verdict,
    pub confidence: u8,
    pub created_at: DateTime<Utc>,
    pub index_generation: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRequest {
    pub query_id: String,
    pub verdict: Verdict,
    #[serde(default)]
    pub chosen_label: Option<char>,
    pub confidence: u8,
    #[serde(default)]
    pub note: Option<String>,
}

/// Field invariants of an annotation.
pub fn validate_annotation(verdict: Verdict, chosen_label: Option<char>, confidence: u8) -> Result<(), String> {
    if !(1..=5).contains(&confidence) {
        return Err(format!("confidence {confidence} outside 1..=5"));
    }
    match (verdict, chosen_label) {
        (Verdict::Confirmed, None) => Err("confirmed verdict needs chosen_label".into()),
        (Verdict::Rejected | Verdict::Uncertain, Some(_)) => Err("chosen_label is only allowed with a confirmed verdict".into()),
        _ => Ok(()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantRef {
    #[serde(with = "seed::hex_id")]
    pub entry_id: u64,
    pub image: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub rank: usize,
    pub label: char,
    pub vote_score: f64,
    pub best_similarity: f64,
    pub variants: Vec<VariantRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuerySession {
    #[serde(with = "seed::hex_id")]
    pub query_id: u64,
    /// Stored query image, relative to the data directory.
    pub image: String,
    pub k: usize,
    pub n: usize,
    pub created_at: DateTime<Utc>,
    pub index_generation: u32,
    pub candidates: Vec<Candidate>,
    pub result: RetrievalResult,
    #[serde(default)]
    pub annotations: Vec<Annotation>,
}

pub fn entry_image_url(entry_id: u64) -> String {
    format!("/api/entries/{entry_id:016x}/image")
}

/// Top-`n` labels of a result with their evidence.
pub fn candidates(result: &RetrievalResult, n: usize) -> Vec<Candidate> {
    result
        .label_ranking
        .iter()
        .take(n)
        .enumerate()
        .map(|(i, s)| Candidate {
            rank: i + 1,
            label: s.label,
            vote_score: s.score,
            best_similarity: s.best_similarity,
            variants: s
                .supporting_entry_ids
                .iter()
                .take(EVIDENCE_PER_LABEL)
                .map(|&id| VariantRef {
                    entry_id: id,
                    image: entry_image_url(id),
                })
                .collect(),
        })
        .collect()
}

const ANNOTATIONS: &str = "annotations.ndjson";
const SESSIONS: &str = "sessions";

type AppendJob = (Annotation, oneshot::Sender<io::Result<()>>);

/// Sessions as one JSON file each; annotations appended to one NDJSON log by
/// a single writer task, fsynced per record.
#[derive(Debug)]
pub struct Store {
    dir: PathBuf,
    writer: mpsc::Sender<AppendJob>,
    seq: AtomicU64,
}

fn write_synced(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = File::create(&tmp)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    fs::rename(&tmp, path)
}

impl Store {
    /// Must be called inside a Tokio runtime (spawns the writer task).
    pub fn open(dir: &Path) -> io::Result<Store> {
        fs::create_dir_all(dir.join(SESSIONS))?;
        let log_path = dir.join(ANNOTATIONS);
        let existing = if log_path.exists() {
            BufReader::new(File::open(&log_path)?).lines().count() as u64
        } else {
            0
        };
        let (tx, mut rx) = mpsc::channel::<AppendJob>(64);
        tokio::task::spawn_blocking(move || {
            while let Some((a, reply)) = rx.blocking_recv() {
                let res = (|| {
                    let mut f = OpenOptions::new().create(true).append(true).open(&log_path)?;
                    let mut line = serde_json::to_vec(&a)?;
                    line.push(b'\n');
                    f.write_all(&line)?;
                    f.sync_data()
                })();
                let _ = reply.send(res);
            }
        });
        Ok(Store {
            dir: dir.to_owned(),
            writer: tx,
            seq: AtomicU64::new(existing),
        })
    }

    fn session_path(&self, query_id: u64) -> PathBuf {
        self.dir.join(SESSIONS).join(format!("{query_id:016x}.json"))
    }

    pub fn image_relpath(query_id: u64) -> String {
        format!("{SESSIONS}/{query_id:016x}.img")
    }

    pub fn save_session(&self, s: &QuerySession, image: &[u8]) -> io::Result<()> {
        write_synced(&self.dir.join(Self::image_relpath(s.query_id)), image)?;
        write_synced(&self.session_path(s.query_id), &serde_json::to_vec_pretty(s)?)
    }

    /// The stored session with its annotations in write order.
    pub fn session(&self, query_id: u64) -> io::Result<Option<QuerySession>> {
        let path = self.session_path(query_id);
        if !path.exists() {
            return Ok(None);
        }
        let mut s: QuerySession = serde_json::from_slice(&fs::read(&path)?)?;
        s.annotations = self.annotations(Some(query_id))?;
        Ok(Some(s))
    }

    pub fn has_session(&self, query_id: u64) -> bool {
        self.session_path(query_id).exists()
    }

    pub fn annotations(&self, query_id: Option<u64>) -> io::Result<Vec<Annotation>> {
        let path = self.dir.join(ANNOTATIONS);
        if !path.exists() {
            return Ok(Vec::new());
        }
        let mut out = Vec::new();
        for line in BufReader::new(File::open(path)?).lines() {
            // A line still being appended fails to parse and is skipped.
            let Ok(a) = serde_json::from_str::<Annotation>(&line?) else { continue };
            if query_id.is_none_or(|q| q == a.query_id) {
                out.push(a);
            }
        }
        Ok(out)
    }

    pub async fn append(&self, req: AnnotationRequest, query_id: u64, generation: u32) -> io::Result<Annotation> {
        let seq = self.seq.fetch_add(1, Ordering::SeqCst);
        let created_at = Utc::now();
        let a = Annotation {
            annotation_id: seed::hash64(&[query_id, seq, created_at.timestamp_nanos_opt().unwrap_or_default() as u64]),
            query_id,
            chosen_label: req.chosen_label,
            verdict: req.verdict,
            confidence: req.confidence,
            created_at,
            index_generation: generation,
            note: req.note,
        };
        let (tx, rx) = oneshot::channel();
        self.writer
            .send((a.clone(), tx))
            .await
            .map_err(|_| io::Error::other("annotation writer stopped"))?;
        rx.await.map_err(|_| io::Error::other("annotation writer stopped"))??;
        Ok(a)
    }
}

#[derive(Clone)]
pub struct AppState {
    pub workspace: Arc<IndexHandle<Workspace>>,
    pub encoder: Arc<dyn Encoder>,
    pub store: Arc<Store>,
    pub params: QueryParams,
    pub ui_dir: Option<PathBuf>,
}

impl AppState {
    pub fn new(workspace: Option<Workspace>, data_dir: &Path) -> io::Result<AppState> {
        Ok(AppState {
            workspace: Arc::new(workspace.map(IndexHandle::new).unwrap_or_else(IndexHandle::empty)),
            encoder: Arc::new(HandcraftedEncoder::default()),
            store: Arc::new(Store::open(data_dir)?),
            params: QueryParams::default(),
            ui_dir: None,
        })
    }
}

#[derive(Debug)]
pub struct ApiError(StatusCode, String);

impl ApiError {
    fn bad_request(msg: impl ToString) -> Self {
        Self(StatusCode::BAD_REQUEST, msg.to_string())
    }
    fn not_found(msg: impl ToString) -> Self {
        Self(StatusCode::NOT_FOUND, msg.to_string())
    }
    fn internal(msg: impl ToString) -> Self {
        Self(StatusCode::INTERNAL_SERVER_ERROR, msg.to_string())
    }
    fn unavailable() -> Self {
        Self(StatusCode::SERVICE_UNAVAILABLE, "index not loaded".into())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn parse_id(s: &str) -> ApiResult<u64> {
    u64::from_str_radix(s, 16).map_err(|_| ApiError::not_found(format!("no such id {s}")))
}

fn current(state: &AppState) -> ApiResult<Arc<Workspace>> {
    state.workspace.get().ok_or_else(ApiError::unavailable)
}

#[derive(Debug, Deserialize)]
struct QueryOpts {
    k: Option<usize>,
    n: Option<usize>,
}

async fn post_query(
    State(state): State<AppState>,
    UrlQuery(opts): UrlQuery<QueryOpts>,
    mut form: Multipart,
) -> ApiResult<Json<QuerySession>> {
    let ws = current(&state)?;
    let n = opts.n.unwrap_or(DEFAULT_N);
    if n == 0 || n > MAX_N {
        return Err(ApiError::bad_request(format!("n must be in 1..={MAX_N}")));
    }
    let params = QueryParams {
        k: opts.k.unwrap_or(state.params.k),
        rule: state.params.rule,
    };
    if params.k == 0 {
        return Err(ApiError::bad_request("k must be at least 1"));
    }
    let mut bytes = None;
    while let Some(field) = form.next_field().await.map_err(ApiError::bad_request)? {
        if field.name() == Some("image") {
            bytes = Some(field.bytes().await.map_err(ApiError::bad_request)?);
        }
    }
    let bytes = bytes.ok_or_else(|| ApiError::bad_request("multipart field `image` missing"))?;
    let created_at = Utc::now();
    let query_id = retrieval::query_id(&bytes, created_at.timestamp_nanos_opt().unwrap_or_default() as u64);
    let enc = state.encoder.clone();
    let data = bytes.clone();
    let result = tokio::task::spawn_blocking(move || -> ApiResult<RetrievalResult> {
        let img = image::load_from_memory(&data)
            .map_err(|e| ApiError::bad_request(format!("undecodable image: {e}")))?
            .to_luma8();
        retrieval::decipher(&ws.index, enc.as_ref(), &img, params, query_id).map_err(|e| match e {
            RetrievalError::Image(_) | RetrievalError::Encoder(_) => ApiError::bad_request(e),
            other => ApiError::internal(other),
        })
    })
    .await
    .map_err(ApiError::internal)??;
    let session = QuerySession {
        query_id,
        image: Store::image_relpath(query_id),
        k: params.k,
        n,
        created_at,
        index_generation: result.index_generation,
        candidates: candidates(&result, n),
        result,
        annotations: Vec::new(),
    };
    let store = state.store.clone();
    let saved = session.clone();
    tokio::task::spawn_blocking(move || store.save_session(&saved, &bytes))
        .await
        .map_err(ApiError::internal)?
        .map_err(ApiError::internal)?;
    info!("query {query_id:016x}: {} candidates", session.candidates.len());
    Ok(Json(session))
}

async fn get_session(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<QuerySession>> {
    let id = parse_id(&id)?;
    state
        .store
        .session(id)
        .map_err(ApiError::internal)?
        .map(Json)
        .ok_or_else(|| ApiError::not_found(format!("no session {id:016x}")))
}

async fn get_entry_image(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let ws = current(&state)?;
    let id = parse_id(&id)?;
    if ws.dictionary.entry(id).is_none() {
        return Err(ApiError::not_found(format!("no entry {id:016x}")));
    }
    let path = ws.dict_dir.join(synthesis::image_relpath(id));
    let bytes = tokio::fs::read(&path).await.map_err(|e| ApiError::not_found(format!("{}: {e}", path.display())))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

async fn post_annotation(State(state): State<AppState>, body: axum::body::Bytes) -> ApiResult<Json<Annotation>> {
    let req: AnnotationRequest =
        serde_json::from_slice(&body).map_err(|e| ApiError(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))?;
    let query_id = parse_id(&req.query_id)?;
    let session = state
        .store
        .session(query_id)
        .map_err(ApiError::internal)?
        .ok_or_else(|| ApiError::not_found(format!("no session {query_id:016x}")))?;
    validate_annotation(req.verdict, req.chosen_label, req.confidence)
        .map_err(|e| ApiError(StatusCode::UNPROCESSABLE_ENTITY, e))?;
    let a = state
        .store
        .append(req, query_id, session.index_generation)
        .await
        .map_err(ApiError::internal)?;
    Ok(Json(a))
}

#[derive(Debug, Deserialize)]
struct AnnotationFilter {
    query_id: Option<String>,
}

async fn get_annotations(
    State(state): State<AppState>,
    UrlQuery(f): UrlQuery<AnnotationFilter>,
) -> ApiResult<Json<Vec<Annotation>>> {
    let q = match f.query_id.as_deref() {
        Some(s) => {
            let id = parse_id(s)?;
            if !state.store.has_session(id) {
                return Err(ApiError::not_found(format!("no session {id:016x}")));
            }
            Some(id)
        }
        None => None,
    };
    Ok(Json(state.store.annotations(q).map_err(ApiError::internal)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub label_count: usize,
    pub entry_count: usize,
    pub index_generation: u32,
    pub encoder_id: String,
    pub dim: usize,
}

async fn get_stats(State(state): State<AppState>) -> ApiResult<Json<Stats>> {
    let ws = current(&state)?;
    Ok(Json(Stats {
        label_count: ws.index.label_count(),
        entry_count: ws.index.len(),
        index_generation: ws.index.generation(),
        encoder_id: ws.index.encoder_id().to_owned(),
        dim: ws.index.dim(),
    }))
}

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()) {
        Some("html") => "text/html; charset=utf-8",
        Some("js" | "mjs") => "text/javascript",
        Some("css") => "text/css",
        Some("json") => "application/json",
        Some("svg") => "image/svg+xml",
        Some("png") => "image/png",
        Some("ico") => "image/x-icon",
        _ => "application/octet-stream",
    }
}

/// Static files of a built UI, with `index.html` for unknown paths.
async fn static_ui(State(state): State<AppState>, uri: Uri) -> Response {
    let Some(root) = state.ui_dir.as_ref() else {
        return (StatusCode::NOT_FOUND, "no UI bundled; the API is under /api/\n").into_response();
    };
    let rel = uri.path().trim_start_matches('/');
    if rel.split('/').any(|c| c == "..") {
        return StatusCode::NOT_FOUND.into_response();
    }
    let mut path = root.join(rel);
    if rel.is_empty() || !path.is_file() {
        path = root.join("index.html");
    }
    match tokio::fs::read(&path).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, content_type(&path))], Body::from(bytes)).into_response(),
        Err(_) => StatusCode::NOT_FOUND.into_response(),
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/query", post(post_query))
        .route("/api/sessions/{id}", get(get_session))
        .route("/api/entries/{id}/image", get(get_entry_image))
        .route("/api/annotations", post(post_annotation).get(get_annotations))
        .route("/api/stats", get(get_stats))
        .fallback(static_ui)
        .layer(DefaultBodyLimit::max(32 << 20))
        .with_state(state)
}

pub async fn serve(addr: SocketAddr, state: AppState) -> io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn annotation_invariants() {
        assert!(validate_annotation(Verdict::Confirmed, Some('明'), 4).is_ok());
        assert!(validate_annotation(Verdict::Confirmed, None, 4).is_err());
        assert!(validate_annotation(Verdict::Rejected, None, 1).is_ok());
        assert!(validate_annotation(Verdict::Uncertain, Some('明'), 3).is_err());
        assert!(validate_annotation(Verdict::Rejected, None, 0).is_err());
        assert!(validate_annotation(Verdict::Rejected, None, 6).is_err());
    }

    #[tokio::test]
    async fn annotations_append_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        for c in 1..=3u8 {
            let req = AnnotationRequest {
                query_id: "00".into(),
                verdict: Verdict::Uncertain,
                chosen_label: None,
                confidence: c,
                note: Some(format!("#{c}")),
            };
            store.append(req, 7, 0).await.unwrap();
        }
        let got = store.annotations(Some(7)).unwrap();
        assert_eq!(got.iter().map(|a| a.confidence).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert!(store.annotations(Some(8)).unwrap().is_empty());
        // A reopened store continues the sequence.
        drop(store);
        let store = Store::open(dir.path()).unwrap();
        assert_eq!(store.seq.load(Ordering::SeqCst), 3);
    }
}
