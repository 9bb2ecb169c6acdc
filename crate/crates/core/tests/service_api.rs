//! HTTP status codes and payloads of the API, without a UI.

use std::path::Path;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use glyphdict::demo;
use glyphdict::encoder::HandcraftedEncoder;
use glyphdict::retrieval;
use glyphdict::service::{self, AppState, QuerySession, Stats, Workspace};
use glyphdict::synthesis::{self, DictionaryConfig};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn small_dictionary(dir: &Path) -> synthesis::Dictionary {
    let fonts = demo::procedural_fonts();
    let labels: Vec<char> = demo::charset().into_iter().take(12).collect();
    let specs = synthesis::char_specs(&labels, &demo::ids_table(), &fonts).unwrap();
    let (d, _) = synthesis::build_dictionary(&specs, &DictionaryConfig::new(2, 42, &fonts)).unwrap();
    d.save(dir).unwrap();
    retrieval::build_index(&d, &HandcraftedEncoder::default())
        .unwrap()
        .save(&dir.join(service::INDEX_DIR))
        .unwrap();
    d
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

fn get(uri: &str) -> Request<Body> {
    Request::get(uri).body(Body::empty()).unwrap()
}

fn post_json(uri: &str, body: Value) -> Request<Body> {
    Request::post(uri)
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap()
}

fn post_image(uri: &str, field: &str, bytes: &[u8]) -> Request<Body> {
    let b = "xyzzy";
    let mut body = format!("--{b}\r\nContent-Disposition: form-data; name=\"{field}\"; filename=\"a.png\"\r\n\r\n").into_bytes();
    body.extend_from_slice(bytes);
    body.extend_from_slice(format!("\r\n--{b}--\r\n").as_bytes());
    Request::post(uri)
        .header("content-type", format!("multipart/form-data; boundary={b}"))
        .body(Body::from(body))
        .unwrap()
}

fn error_of(bytes: &[u8]) -> String {
    let v: Value = serde_json::from_slice(bytes).unwrap();
    v["error"].as_str().unwrap().to_owned()
}

#[tokio::test]
async fn without_index_the_api_is_unavailable() {
    let tmp = tempfile::tempdir().unwrap();
    let app = service::router(AppState::new(None, tmp.path()).unwrap());
    let png = glyphdict::glyph::Glyph::filled(8).to_png_bytes();
    for req in [get("/api/stats"), post_image("/api/query", "image", &png), get("/api/entries/0000000000000001/image")] {
        let (status, body) = send(&app, req).await;
        assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
        assert!(!error_of(&body).is_empty());
    }
}

#[tokio::test]
async fn query_session_and_annotation_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let dict_dir = tmp.path().join("dict");
    let d = small_dictionary(&dict_dir);
    let ws = Workspace::open(&dict_dir, &HandcraftedEncoder::default()).unwrap();
    let app = service::router(AppState::new(Some(ws), &tmp.path().join("data")).unwrap());

    let (status, body) = send(&app, get("/api/stats")).await;
    assert_eq!(status, StatusCode::OK);
    let stats: Stats = serde_json::from_slice(&body).unwrap();
    assert_eq!((stats.entry_count, stats.label_count, stats.dim), (24, 12, 438));

    let png = d.entries[5].glyph.to_png_bytes();
    for n in ["0", "101"] {
        let (status, _) = send(&app, post_image(&format!("/api/query?n={n}"), "image", &png)).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "n={n}");
    }
    let (status, _) = send(&app, post_image("/api/query", "picture", &png)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = send(&app, post_image("/api/query", "image", b"not an image")).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let (status, body) = send(&app, post_image("/api/query?n=3", "image", &png)).await;
    assert_eq!(status, StatusCode::OK);
    let s: QuerySession = serde_json::from_slice(&body).unwrap();
    assert_eq!(s.candidates.len(), 3);
    assert_eq!(s.candidates[0].label, d.entries[5].label);
    let ranks: Vec<usize> = s.candidates.iter().map(|c| c.rank).collect();
    assert_eq!(ranks, vec![1, 2, 3]);

    // Evidence thumbnails resolve to the stored entry images.
    let thumb = &s.candidates[0].variants[0];
    let (status, bytes) = send(&app, get(&thumb.image)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(bytes, std::fs::read(dict_dir.join(synthesis::image_relpath(thumb.entry_id))).unwrap());
    let (status, _) = send(&app, get("/api/entries/00000000000000ff/image")).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let qid = format!("{:016x}", s.query_id);
    let (status, body) = send(&app, get(&format!("/api/sessions/{qid}"))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(serde_json::from_slice::<QuerySession>(&body).unwrap(), s);
    for bad in ["0123456789abcdef", "nothex"] {
        let (status, _) = send(&app, get(&format!("/api/sessions/{bad}"))).await;
        assert_eq!(status, StatusCode::NOT_FOUND);
    }

    // Invariant violations and malformed bodies are 422; unknown queries 404.
    let cases = [
        (json!({"query_id": qid, "verdict": "confirmed", "confidence": 3}), StatusCode::UNPROCESSABLE_ENTITY),
        (json!({"query_id": qid, "verdict": "rejected", "chosen_label": "山", "confidence": 3}), StatusCode::UNPROCESSABLE_ENTITY),
        (json!({"query_id": qid, "verdict": "uncertain", "confidence": 9}), StatusCode::UNPROCESSABLE_ENTITY),
        (json!({"query_id": qid, "verdict": "maybe", "confidence": 3}), StatusCode::UNPROCESSABLE_ENTITY),
        (json!({"verdict": "uncertain", "confidence": 3}), StatusCode::UNPROCESSABLE_ENTITY),
        (json!({"query_id": "0123456789abcdef", "verdict": "uncertain", "confidence": 3}), StatusCode::NOT_FOUND),
    ];
    for (body, want) in cases {
        let (status, resp) = send(&app, post_json("/api/annotations", body.clone())).await;
        assert_eq!(status, want, "{body}");
        assert!(!error_of(&resp).is_empty());
    }
    let (status, _) = send(&app, get("/api/annotations?query_id=0123456789abcdef")).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, body) = send(&app, get("/api/annotations")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, b"[]");

    // Only valid annotations were persisted.
    let ok = json!({"query_id": qid, "verdict": "rejected", "confidence": 1});
    assert_eq!(send(&app, post_json("/api/annotations", ok)).await.0, StatusCode::OK);
    let log = std::fs::read_to_string(tmp.path().join("data").join("annotations.ndjson")).unwrap();
    assert_eq!(log.lines().count(), 1);
}

#[tokio::test]
async fn configured_ui_is_served_with_spa_fallback() {
    let tmp = tempfile::tempdir().unwrap();
    let ui = tmp.path().join("ui");
    std::fs::create_dir_all(ui.join("assets")).unwrap();
    std::fs::write(ui.join("index.html"), "<!doctype html><title>glyphs</title>").unwrap();
    std::fs::write(ui.join("assets/app.js"), "console.log(1)").unwrap();
    let mut state = AppState::new(None, &tmp.path().join("data")).unwrap();
    state.ui_dir = Some(ui);
    let app = service::router(state);
    let (status, body) = send(&app, get("/")).await;
    assert_eq!(status, StatusCode::OK);
    assert!(String::from_utf8(body).unwrap().contains("glyphs"));
    let (_, body) = send(&app, get("/assets/app.js")).await;
    assert_eq!(body, b"console.log(1)");
    let (_, body) = send(&app, get("/session/abc")).await;
    assert!(String::from_utf8(body).unwrap().contains("glyphs"));
    let (status, _) = send(&app, get("/../secret")).await;
    assert_ne!(status, StatusCode::INTERNAL_SERVER_ERROR);
}
