//! The HTTP API driven in-process: a query, its stored session, and an
//! annotation. Pass `--listen` to serve on 127.0.0.1:8080 instead.

use axum::body::Body;
use axum::http::Request;
use glyphdict::demo;
use glyphdict::encoder::HandcraftedEncoder;
use glyphdict::font::FontSource;
use glyphdict::service::{self, AppState, Workspace};
use glyphdict::synthesis::{self, DictionaryConfig};
use glyphdict::retrieval;
use http_body_util::BodyExt;
use tower::ServiceExt;

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let root = std::path::PathBuf::from("target/example-serve");
    let dict_dir = root.join("dictionary");
    let fonts = demo::procedural_fonts();
    let labels: Vec<char> = demo::charset().into_iter().take(50).collect();
    let specs = synthesis::char_specs(&labels, &demo::ids_table(), &fonts)?;
    let (dict, _) = synthesis::build_dictionary(&specs, &DictionaryConfig::new(4, 42, &fonts))?;
    dict.save(&dict_dir)?;
    let enc = HandcraftedEncoder::default();
    retrieval::build_index(&dict, &enc)?.save(&dict_dir.join(service::INDEX_DIR))?;
    let state = AppState::new(Some(Workspace::open(&dict_dir, &enc)?), &root.join("data"))?;

    if std::env::args().any(|a| a == "--listen") {
        service::serve("127.0.0.1:8080".parse()?, state).await?;
        return Ok(());
    }
    let app = service::router(state);
    let png = fonts.renders(labels[3])?.remove(1).to_png_bytes();
    let mut body = b"--b\r\nContent-Disposition: form-data; name=\"image\"; filename=\"q.png\"\r\n\r\n".to_vec();
    body.extend_from_slice(&png);
    body.extend_from_slice(b"\r\n--b--\r\n");
    let req = Request::post("/api/query?n=5")
        .header("content-type", "multipart/form-data; boundary=b")
        .body(Body::from(body))?;
    let resp = app.clone().oneshot(req).await?;
    let session: service::QuerySession = serde_json::from_slice(&resp.into_body().collect().await?.to_bytes())?;
    println!("query {:016x} (truth {}):", session.query_id, labels[3]);
    for c in &session.candidates {
        println!("  {}. {} vote {:.3} best {:.3} evidence {}", c.rank, c.label, c.vote_score, c.best_similarity, c.variants[0].image);
    }

    let note = serde_json::json!({
        "query_id": format!("{:016x}", session.query_id),
        "verdict": "confirmed",
        "chosen_label": session.candidates[0].label.to_string(),
        "confidence": 4,
    });
    let req = Request::post("/api/annotations")
        .header("content-type", "application/json")
        .body(Body::from(note.to_string()))?;
    let resp = app.clone().oneshot(req).await?;
    println!("annotation: {}", String::from_utf8(resp.into_body().collect().await?.to_bytes().to_vec())?);
    Ok(())
}
