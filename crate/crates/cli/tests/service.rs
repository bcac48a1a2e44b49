use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use base64::Engine as _;
use http_body_util::BodyExt;
use pedsearch::commands;
use pedsearch::service::{cors_layer, router, serve, AppState, ServiceState};
use pedsearch::EngineConfig;
use pedsearch_core::eval::SynthConfig;
use pedsearch_core::graph::SemanticGraph;
use pedsearch_core::index::{GalleryIndex, RetrievalEngine};
use serde_json::{json, Value};
use tower::ServiceExt;

struct Fixture {
    _dir: tempfile::TempDir,
    manifest: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    commands::synth(&SynthConfig { identities: 8, seed: 4, ..Default::default() }, dir.path()).unwrap();
    Fixture {
        manifest: dir.path().join("manifest.jsonl"),
        _dir: dir,
    }
}

fn state_for(manifest: &Path, ttl: Duration, snapshot: Option<PathBuf>) -> AppState {
    let engine = commands::engine_from_manifest(&EngineConfig::default(), manifest).unwrap();
    AppState::new(ServiceState::new(engine, ttl, snapshot))
}

fn empty_state() -> AppState {
    let cfg = EngineConfig::default();
    let engine = RetrievalEngine::new(GalleryIndex::default(), cfg.provider().unwrap(), cfg.params()).unwrap();
    AppState::new(ServiceState::new(engine, Duration::from_secs(60), None))
}

fn app(state: &AppState) -> Router {
    router(state.clone(), cors_layer(&[]).unwrap())
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let v = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, v)
}

async fn graph_of(state: &AppState) -> SemanticGraph {
    state.with(|st| Ok(st.engine().index.graph().clone())).await.unwrap()
}

#[tokio::test]
async fn healthz() {
    let (s, v) = call(&app(&empty_state()), Method::GET, "/healthz", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v, json!({"status": "ok"}));
}

#[tokio::test]
async fn session_lifecycle() {
    let f = fixture();
    let state = state_for(&f.manifest, Duration::from_secs(60), None);
    let app = app(&state);
    let before = graph_of(&state).await;

    let (s, v) = call(&app, Method::POST, "/sessions", Some(json!({"q0": "red jacket, black hair", "top_k": 5}))).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let id = v["session_id"].as_str().unwrap().to_owned();
    assert_eq!(v["round"], 0);
    assert_eq!(v["ranking"].as_array().unwrap().len(), 5);
    assert_eq!(v["ranking"][0]["rank"], 1);
    assert_ne!(graph_of(&state).await, before, "pseudo-query nodes inserted");

    let (s, v) = call(&app, Method::POST, &format!("/sessions/{id}/feedback"), Some(json!({"text": "Lower: blue pants"}))).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["round"], 1);
    assert_eq!(v["ranking"].as_array().unwrap().len(), 24);

    let key = v["ranking"][0]["image_key"].as_str().unwrap().to_owned();
    let (s, v) = call(&app, Method::POST, &format!("/sessions/{id}/reveal"), Some(json!({"image_key": key}))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v, json!({"revealed_count": 1, "added": true}));
    let (_, v) = call(&app, Method::POST, &format!("/sessions/{id}/reveal"), Some(json!({"image_key": key}))).await;
    assert_eq!(v, json!({"revealed_count": 1, "added": false}));
    let (s, v) = call(&app, Method::POST, &format!("/sessions/{id}/reveal"), Some(json!({"image_key": "nope"}))).await;
    assert_eq!((s, v["error"]["code"].as_str()), (StatusCode::NOT_FOUND, Some("not_found")));

    let (s, v) = call(&app, Method::GET, &format!("/sessions/{id}"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["session_id"], id.as_str());
    assert_eq!(v["rounds"].as_array().unwrap().len(), 2);
    assert_eq!(v["rounds"][1]["feedback"], "Lower: blue pants");
    assert_eq!(v["closed"], false);
    assert_eq!(v["revealed"], json!([key]));

    let (s, v) = call(&app, Method::DELETE, &format!("/sessions/{id}"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["closed"], true);
    assert_eq!(graph_of(&state).await, before, "closing restores the graph");

    let (s, v) = call(&app, Method::POST, &format!("/sessions/{id}/feedback"), Some(json!({"text": "white hat"}))).await;
    assert_eq!((s, v["error"]["code"].as_str()), (StatusCode::CONFLICT, Some("session_closed")));
    let (s, _) = call(&app, Method::DELETE, &format!("/sessions/{id}"), None).await;
    assert_eq!(s, StatusCode::CONFLICT);
    let (s, v) = call(&app, Method::GET, &format!("/sessions/{id}"), None).await;
    assert_eq!((s, v["closed"].as_bool()), (StatusCode::OK, Some(true)));
}

#[tokio::test]
async fn error_codes() {
    let f = fixture();
    let app = app(&state_for(&f.manifest, Duration::from_secs(60), None));
    for (method, uri) in [
        (Method::GET, "/sessions/s999999"),
        (Method::DELETE, "/sessions/s999999"),
        (Method::POST, "/sessions/s999999/feedback"),
    ] {
        let body = (method == Method::POST).then(|| json!({"text": "red jacket"}));
        let (s, v) = call(&app, method, uri, body).await;
        assert_eq!(s, StatusCode::NOT_FOUND, "{uri}");
        assert_eq!(v["error"]["code"], "not_found");
    }
    let (s, v) = call(&app, Method::POST, "/sessions", Some(json!({"q0": "a sunny afternoon"}))).await;
    assert_eq!((s, v["error"]["code"].as_str()), (StatusCode::UNPROCESSABLE_ENTITY, Some("parse_error")));
    let (s, v) = call(&app, Method::POST, "/sessions", Some(json!({"q0": ""}))).await;
    assert_eq!((s, v["error"]["code"].as_str()), (StatusCode::UNPROCESSABLE_ENTITY, Some("parse_error")));
    let (s, v) = call(&app, Method::POST, "/sessions", Some(json!({"query": "red jacket"}))).await;
    assert_eq!((s, v["error"]["code"].as_str()), (StatusCode::UNPROCESSABLE_ENTITY, Some("parse_error")));

    let (_, v) = call(&app, Method::POST, "/sessions", Some(json!({"q0": "red jacket"}))).await;
    let id = v["session_id"].as_str().unwrap();
    let (s, v) = call(&app, Method::POST, &format!("/sessions/{id}/feedback"), Some(json!({"text": "lovely weather"}))).await;
    assert_eq!((s, v["error"]["code"].as_str()), (StatusCode::UNPROCESSABLE_ENTITY, Some("parse_error")));
    let (s, v) = call(&app, Method::GET, "/sessions/s000001", None).await;
    assert_eq!((s, v["rounds"].as_array().map(Vec::len)), (StatusCode::OK, Some(1)), "failed feedback leaves the round count");
}

#[tokio::test]
async fn responses_are_deterministic() {
    let f = fixture();
    let script = |app: Router| async move {
        let mut out = Vec::new();
        out.push(call(&app, Method::POST, "/sessions", Some(json!({"q0": "green hat, grey shoes"}))).await);
        out.push(call(&app, Method::POST, "/sessions", Some(json!({"q0": "black shirt"}))).await);
        out.push(call(&app, Method::POST, "/sessions/s000001/feedback", Some(json!({"text": "Upper: red jacket"}))).await);
        out.push(call(&app, Method::POST, "/sessions/s000002/feedback", Some(json!({"text": "blue backpack"}))).await);
        out.push(call(&app, Method::DELETE, "/sessions/s000001", None).await);
        out.push(call(&app, Method::GET, "/sessions/s000002", None).await);
        out
    };
    let a = script(app(&state_for(&f.manifest, Duration::from_secs(60), None))).await;
    let b = script(app(&state_for(&f.manifest, Duration::from_secs(60), None))).await;
    assert_eq!(a, b);
    assert!(a.iter().all(|(s, _)| *s == StatusCode::OK));
}

#[tokio::test]
async fn gallery_returns_bytes_and_metadata() {
    let f = fixture();
    let app = app(&state_for(&f.manifest, Duration::from_secs(60), None));
    let (s, v) = call(&app, Method::GET, "/gallery/images/p0003_1.bin", None).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["image_key"], "images/p0003_1.bin");
    assert_eq!(v["identity"].as_str().unwrap().len(), 16);
    let bytes = base64::engine::general_purpose::STANDARD.decode(v["content_base64"].as_str().unwrap()).unwrap();
    let on_disk = std::fs::read(f.manifest.parent().unwrap().join("images/p0003_1.bin")).unwrap();
    assert_eq!(bytes, on_disk);
    assert!(!v["description"]["upper"].as_array().unwrap().is_empty() || !v["description"]["head"].as_array().unwrap().is_empty());
    let (s, _) = call(&app, Method::GET, "/gallery/images/missing.bin", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn ingest_grows_the_gallery() {
    let f = fixture();
    let state = empty_state();
    let app = app(&state);
    let (s, v) = call(&app, Method::POST, "/sessions", Some(json!({"q0": "red jacket"}))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["ranking"], json!([]));

    let (s, v) = call(&app, Method::POST, "/ingest", Some(json!({"manifest_path": f.manifest}))).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v, json!({"indexed_count": 24, "total": 24}));
    let (s, v) = call(&app, Method::POST, "/ingest", Some(json!({"manifest_path": f.manifest}))).await;
    assert_eq!((s, v["error"]["code"].as_str()), (StatusCode::CONFLICT, Some("duplicate_key")));
    let (s, v) = call(&app, Method::POST, "/ingest", Some(json!({"manifest_path": "/no/such/manifest.jsonl"}))).await;
    assert_eq!((s, v["error"]["code"].as_str()), (StatusCode::BAD_REQUEST, Some("io_error")));

    // the session opened on the empty gallery keeps working
    let (s, v) = call(&app, Method::POST, "/sessions/s000001/feedback", Some(json!({"text": "black hair"}))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["ranking"].as_array().unwrap().len(), 24);

    // an index ingested in one go matches the grown one
    let direct = commands::engine_from_manifest(&EngineConfig::default(), &f.manifest).unwrap();
    state
        .with(|st| st.shutdown())
        .await
        .unwrap();
    let grown = state.with(|st| Ok(st.engine().index.to_bytes().unwrap())).await.unwrap();
    assert_eq!(grown, direct.index.to_bytes().unwrap());
}

#[tokio::test]
async fn idle_sessions_expire() {
    let f = fixture();
    let state = state_for(&f.manifest, Duration::from_secs(5), None);
    let app = app(&state);
    let before = graph_of(&state).await;
    call(&app, Method::POST, "/sessions", Some(json!({"q0": "red jacket"}))).await;
    call(&app, Method::POST, "/sessions", Some(json!({"q0": "blue pants"}))).await;
    assert_eq!(state.with(|st| Ok(st.sweep(Instant::now()))).await.unwrap(), 0);
    let later = Instant::now() + Duration::from_secs(6);
    assert_eq!(state.with(move |st| Ok(st.sweep(later))).await.unwrap(), 2);
    assert_eq!(graph_of(&state).await, before);
    let (s, _) = call(&app, Method::GET, "/sessions/s000001", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn cors_headers() {
    let state = empty_state();
    let req = || Request::builder().uri("/healthz").header("origin", "http://console.local");
    let any = app(&state).oneshot(req().body(Body::empty()).unwrap()).await.unwrap();
    assert_eq!(any.headers()["access-control-allow-origin"], "*");

    let only = router(state.clone(), cors_layer(&["http://console.local".into()]).unwrap());
    let ok = only.clone().oneshot(req().body(Body::empty()).unwrap()).await.unwrap();
    assert_eq!(ok.headers()["access-control-allow-origin"], "http://console.local");
    let other = Request::builder().uri("/healthz").header("origin", "http://elsewhere").body(Body::empty()).unwrap();
    let denied = only.oneshot(other).await.unwrap();
    assert!(denied.headers().get("access-control-allow-origin").is_none());
    assert!(cors_layer(&["bad\norigin".into()]).is_err());
}

async fn raw_get(addr: std::net::SocketAddr, path: &str) -> String {
    use tokio::io::{AsyncReadExt, AsyncWriteExt};
    let mut s = tokio::net::TcpStream::connect(addr).await.unwrap();
    s.write_all(format!("GET {path} HTTP/1.1\r\nhost: x\r\nconnection: close\r\n\r\n").as_bytes()).await.unwrap();
    let mut out = String::new();
    s.read_to_string(&mut out).await.unwrap();
    out
}

#[tokio::test]
async fn shutdown_closes_sessions_and_writes_snapshot() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let snap = dir.path().join("graph.json");
    let state = state_for(&f.manifest, Duration::from_secs(60), Some(snap.clone()));
    let before = graph_of(&state).await;
    call(&app(&state), Method::POST, "/sessions", Some(json!({"q0": "red jacket"}))).await;
    assert_eq!(state.with(|st| Ok(st.open_sessions())).await.unwrap(), 1);

    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let server = tokio::spawn(serve(listener, state.clone(), cors_layer(&[]).unwrap(), async move {
        let _ = rx.await;
    }));
    let reply = raw_get(addr, "/healthz").await;
    assert!(reply.starts_with("HTTP/1.1 200"), "{reply}");
    assert!(reply.ends_with(r#"{"status":"ok"}"#), "{reply}");
    tx.send(()).unwrap();
    server.await.unwrap().unwrap();

    assert_eq!(state.with(|st| Ok(st.open_sessions())).await.unwrap(), 0);
    let saved = SemanticGraph::load(&snap).unwrap();
    assert_eq!(saved, before);
    assert!(saved.pseudo_sessions().is_empty());
}
