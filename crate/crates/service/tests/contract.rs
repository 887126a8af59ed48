use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use base64::Engine;
use http_body_util::BodyExt;
use rand::SeedableRng;
use serde_json::{json, Value};
use tower::ServiceExt;

use gsgn_core::checkpoint::Checkpoint;
use gsgn_core::data::encode_png;
use gsgn_core::inference::Enhancer;
use gsgn_core::models::{Gsgn, ModelConfig, NormMode};
use gsgn_core::Tensor;
use gsgn_service::{router, ServiceState, METADATA_HEADER};

fn toy_checkpoint(seed: u64) -> Checkpoint {
    let cfg = ModelConfig {
        base_channels: 4,
        blocks_per_level: vec![1, 1, 1],
        latent_w_dim: 8,
        norm_mode: NormMode::Adaptive,
        task_count: 3,
        zero_output_init: false,
        ..ModelConfig::default()
    };
    let (_, p) = Gsgn::build(&cfg, &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed)).unwrap();
    Checkpoint::from_generator(&cfg, vec!["bright".into(), "warm".into(), "cool".into()], &p).unwrap()
}

fn png(h: usize, w: usize) -> Vec<u8> {
    encode_png(&Tensor::from_fn([3, h, w], |k| ((k * 53 % 97) as f32) / 96.0)).unwrap()
}

fn loaded(max_edge: usize) -> (Arc<ServiceState>, Checkpoint) {
    let ck = toy_checkpoint(1);
    let state = Arc::new(ServiceState::new(max_edge));
    state.install_checkpoint(&ck).unwrap();
    (state, ck)
}

struct Reply {
    status: StatusCode,
    content_type: String,
    meta: Option<Value>,
    body: Vec<u8>,
}

impl Reply {
    fn json(&self) -> Value {
        serde_json::from_slice(&self.body).unwrap()
    }
}

async fn send(state: &Arc<ServiceState>, req: Request<Body>) -> Reply {
    let resp = router(state.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let content_type = resp.headers().get("content-type").map(|v| v.to_str().unwrap().to_string()).unwrap_or_default();
    let meta = resp.headers().get(METADATA_HEADER).map(|v| serde_json::from_str(v.to_str().unwrap()).unwrap());
    let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    Reply { status, content_type, meta, body }
}

fn get(path: &str) -> Request<Body> {
    Request::get(path).body(Body::empty()).unwrap()
}

fn enhance_json(body: Value) -> Request<Body> {
    Request::post("/v1/enhance").header("content-type", "application/json").body(Body::from(body.to_string())).unwrap()
}

fn b64(bytes: &[u8]) -> String {
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

fn multipart(parts: &[(&str, &[u8])]) -> Request<Body> {
    let boundary = "gsgnboundary42";
    let mut body = Vec::new();
    for (name, data) in parts {
        body.extend_from_slice(format!("--{boundary}\r\n").as_bytes());
        if *name == "image" {
            body.extend_from_slice(b"Content-Disposition: form-data; name=\"image\"; filename=\"in.png\"\r\nContent-Type: image/png\r\n\r\n");
        } else {
            body.extend_from_slice(format!("Content-Disposition: form-data; name=\"{name}\"\r\n\r\n").as_bytes());
        }
        body.extend_from_slice(data);
        body.extend_from_slice(b"\r\n");
    }
    body.extend_from_slice(format!("--{boundary}--\r\n").as_bytes());
    Request::post("/v1/enhance")
        .header("content-type", format!("multipart/form-data; boundary={boundary}"))
        .body(Body::from(body))
        .unwrap()
}

#[tokio::test]
async fn health_reports_model_and_hash_or_503() {
    let empty = Arc::new(ServiceState::new(1024));
    let r = send(&empty, get("/healthz")).await;
    assert_eq!(r.status, StatusCode::SERVICE_UNAVAILABLE);

    let (state, ck) = loaded(1024);
    let r = send(&state, get("/healthz")).await;
    assert_eq!(r.status, StatusCode::OK);
    let v = r.json();
    let hash = ck.content_hash().unwrap();
    assert_eq!(v["checkpoint_hash"], format!("{hash:016x}"));
    assert_eq!(u64::from_str_radix(v["checkpoint_hash"].as_str().unwrap(), 16).unwrap(), hash);
    assert_eq!(v["model_id"], format!("gsgn-{hash:016x}"));
}

#[tokio::test]
async fn styles_follow_checkpoint_order() {
    let empty = Arc::new(ServiceState::new(1024));
    assert_eq!(send(&empty, get("/v1/styles")).await.status, StatusCode::SERVICE_UNAVAILABLE);
    let (state, _) = loaded(1024);
    let r = send(&state, get("/v1/styles")).await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(
        r.json(),
        json!([{"index": 0, "name": "bright"}, {"index": 1, "name": "warm"}, {"index": 2, "name": "cool"}])
    );
}

#[tokio::test]
async fn named_style_returns_png_of_the_input_size() {
    let (state, ck) = loaded(1024);
    let input = png(13, 22);
    let r = send(&state, enhance_json(json!({"image": b64(&input), "style": "warm"}))).await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(r.content_type, "image/png");
    let out = gsgn_core::data::decode_png(&r.body).unwrap();
    assert_eq!(out.shape(), &[3, 13, 22]);
    let meta = r.meta.unwrap();
    assert_eq!(meta["style"], json!({"name": "warm", "weights": [0.0, 1.0, 0.0]}));
    assert_eq!((meta["width"].as_u64(), meta["height"].as_u64()), (Some(22), Some(13)));
    assert!(meta["inference_ms"].as_f64().unwrap() >= 0.0);
    assert!(meta.get("metrics").is_none());

    // the CLI path produces the same bytes
    let e = Enhancer::from_checkpoint(&ck).unwrap();
    let local = e.enhance_png(&input, &e.parse_style("warm").unwrap(), None).unwrap();
    assert_eq!(local, r.body);
}

#[tokio::test]
async fn bad_requests_are_400_with_a_reason() {
    let (state, _) = loaded(1024);
    let input = b64(&png(12, 12));
    let r = send(&state, enhance_json(json!({"image": input, "style": [0.5, 0.5]}))).await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);
    let msg = r.json()["error"].as_str().unwrap().to_string();
    assert!(msg.contains("2 weights") && msg.contains("3 tasks"), "{msg}");

    for body in [
        json!({"image": input, "style": "sepia"}),
        json!({"image": b64(b"not a png")}),
        json!({"image": "%%%"}),
        json!({"style": "warm"}),
        json!({"image": input, "extra": 1}),
    ] {
        let r = send(&state, enhance_json(body.clone())).await;
        assert_eq!(r.status, StatusCode::BAD_REQUEST, "{body}");
        assert!(r.json()["error"].is_string());
    }
    let r = send(&state, multipart(&[("style", b"warm")])).await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn oversized_images_are_413() {
    let (state, _) = loaded(16);
    let r = send(&state, enhance_json(json!({"image": b64(&png(8, 17))}))).await;
    assert_eq!(r.status, StatusCode::PAYLOAD_TOO_LARGE);
    let r = send(&state, multipart(&[("image", &png(17, 4))])).await;
    assert_eq!(r.status, StatusCode::PAYLOAD_TOO_LARGE);
    let r = send(&state, enhance_json(json!({"image": b64(&png(16, 16))}))).await;
    assert_eq!(r.status, StatusCode::OK);
}

#[tokio::test]
async fn unloaded_enhance_is_503() {
    let state = Arc::new(ServiceState::new(1024));
    let r = send(&state, enhance_json(json!({"image": b64(&png(8, 8))}))).await;
    assert_eq!(r.status, StatusCode::SERVICE_UNAVAILABLE);
}

#[tokio::test]
async fn identical_requests_give_identical_bytes() {
    let (state, _) = loaded(1024);
    let body = json!({"image": b64(&png(16, 20)), "style": [0.2, 0.3, 0.5]});
    let first = send(&state, enhance_json(body.clone())).await;
    let second = send(&state, enhance_json(body.clone())).await;
    assert_eq!(first.status, StatusCode::OK);
    assert_eq!(first.body, second.body);
    let handles: Vec<_> = (0..4)
        .map(|_| {
            let (s, b) = (state.clone(), body.clone());
            tokio::spawn(async move { send(&s, enhance_json(b)).await.body })
        })
        .collect();
    for h in handles {
        assert_eq!(h.await.unwrap(), first.body);
    }
}

#[tokio::test]
async fn weights_are_clamped_to_the_unit_interval() {
    let (state, _) = loaded(1024);
    let input = b64(&png(12, 12));
    let raw = send(&state, enhance_json(json!({"image": input, "style": [2.0, -1.0, 0.5]}))).await;
    let clamped = send(&state, enhance_json(json!({"image": input, "style": [1.0, 0.0, 0.5]}))).await;
    assert_eq!(raw.status, StatusCode::OK);
    assert_eq!(raw.body, clamped.body);
    assert_eq!(raw.meta.unwrap()["style"]["weights"], json!([1.0, 0.0, 0.5]));
    let pure = send(&state, enhance_json(json!({"image": input, "style": [1.0, 0.0, 0.0]}))).await;
    let named = send(&state, enhance_json(json!({"image": input, "style": "bright"}))).await;
    let default = send(&state, enhance_json(json!({"image": input}))).await;
    assert_eq!(pure.body, named.body);
    assert_eq!(default.body, named.body);
    assert_eq!(pure.meta.unwrap()["style"]["name"], "bright");
}

#[tokio::test]
async fn multipart_matches_json() {
    let (state, _) = loaded(1024);
    let input = png(14, 12);
    let j = send(&state, enhance_json(json!({"image": b64(&input), "style": "cool", "return_metrics": true}))).await;
    let m = send(&state, multipart(&[("image", &input), ("style", b"cool"), ("return_metrics", b"true")])).await;
    assert_eq!(m.status, StatusCode::OK);
    assert_eq!(j.body, m.body);
    let w = send(&state, multipart(&[("image", &input), ("style", b"0,0,1")])).await;
    assert_eq!(w.body, j.body);
    let a = send(&state, multipart(&[("image", &input), ("style", b"[0, 0, 1]")])).await;
    assert_eq!(a.body, j.body);
    let meta = m.meta.unwrap();
    assert!(meta["metrics"]["psnr_db"].as_f64().unwrap() > 0.0);
    assert!(meta["metrics"]["ssim"].as_f64().is_some());
    assert_eq!(meta["metrics"], j.meta.unwrap()["metrics"]);
}

#[tokio::test]
async fn unsupported_content_type_is_rejected() {
    let (state, _) = loaded(1024);
    let req = Request::post("/v1/enhance").header("content-type", "text/plain").body(Body::from("x")).unwrap();
    assert_eq!(send(&state, req).await.status, StatusCode::UNSUPPORTED_MEDIA_TYPE);
}

#[tokio::test]
async fn hot_swap_is_atomic() {
    let (a, b) = (toy_checkpoint(1), toy_checkpoint(2));
    let state = Arc::new(ServiceState::new(1024));
    state.install_checkpoint(&a).unwrap();
    let input = png(12, 12);
    let body = json!({"image": b64(&input), "style": "warm"});
    let ea = Enhancer::from_checkpoint(&a).unwrap();
    let eb = Enhancer::from_checkpoint(&b).unwrap();
    let out_a = ea.enhance_png(&input, &ea.parse_style("warm").unwrap(), None).unwrap();
    let out_b = eb.enhance_png(&input, &eb.parse_style("warm").unwrap(), None).unwrap();
    assert_ne!(out_a, out_b);

    // a request holding the old snapshot keeps it across a swap
    let pinned = state.current().unwrap();
    state.install_checkpoint(&b).unwrap();
    assert_eq!(pinned.model_id(), ea.model_id());
    assert_eq!(state.current().unwrap().model_id(), eb.model_id());

    let mut tasks = Vec::new();
    for i in 0..12 {
        let (s, req) = (state.clone(), body.clone());
        tasks.push(tokio::spawn(async move { send(&s, enhance_json(req)).await }));
        let (s, next) = (state.clone(), if i % 2 == 0 { a.clone() } else { b.clone() });
        tasks.push(tokio::spawn(async move {
            s.install_checkpoint(&next).unwrap();
            Reply { status: StatusCode::NO_CONTENT, content_type: String::new(), meta: None, body: Vec::new() }
        }));
    }
    for t in tasks {
        let r = t.await.unwrap();
        if r.status == StatusCode::NO_CONTENT {
            continue;
        }
        assert_eq!(r.status, StatusCode::OK);
        let id = r.meta.unwrap()["model_id"].as_str().unwrap().to_string();
        // pixels and metadata come from the same snapshot
        if id == ea.model_id() {
            assert_eq!(r.body, out_a);
        } else {
            assert_eq!(id, eb.model_id());
            assert_eq!(r.body, out_b);
        }
    }
}

#[test]
fn reload_keeps_the_old_snapshot_on_failure() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.gsgn");
    let a = toy_checkpoint(1);
    a.save(&path).unwrap();
    let state = ServiceState::from_path(&path, 1024).unwrap();
    let id = state.current().unwrap().model_id();
    std::fs::write(&path, b"garbage").unwrap();
    assert!(state.reload().is_err());
    assert_eq!(state.current().unwrap().model_id(), id);
    toy_checkpoint(2).save(&path).unwrap();
    state.reload().unwrap();
    assert_ne!(state.current().unwrap().model_id(), id);
    assert!(ServiceState::new(8).reload().is_err());
}

#[test]
fn client_round_trip_over_tcp() {
    let (state, ck) = loaded(64);
    let rt = tokio::runtime::Runtime::new().unwrap();
    let listener = rt.block_on(tokio::net::TcpListener::bind("127.0.0.1:0")).unwrap();
    let addr = listener.local_addr().unwrap();
    rt.spawn(async move { axum::serve(listener, router(state)).await.unwrap() });

    let c = gsgn_client::Client::new(format!("http://{addr}")).unwrap();
    let h = c.health().unwrap();
    assert_eq!(h.checkpoint_hash.unwrap(), format!("{:016x}", ck.content_hash().unwrap()));
    let names: Vec<String> = c.styles().unwrap().into_iter().map(|s| s.name).collect();
    assert_eq!(names, ck.tasks);
    let input = png(9, 15);
    let out = c.enhance(&input, Some(&gsgn_client::Style::parse("warm")), true).unwrap();
    let e = Enhancer::from_checkpoint(&ck).unwrap();
    assert_eq!(out.png, e.enhance_png(&input, &e.parse_style("warm").unwrap(), None).unwrap());
    assert_eq!(out.metadata.style.name.as_deref(), Some("warm"));
    assert!(out.metadata.metrics.is_some());
    match c.enhance(&input, Some(&gsgn_client::Style::Weights(vec![1.0])), false) {
        Err(gsgn_client::ClientError::Status { status: 400, message }) => assert!(message.contains("weights")),
        other => panic!("{other:?}"),
    }
    match c.enhance(&png(65, 4), None, false) {
        Err(gsgn_client::ClientError::Status { status: 413, .. }) => {}
        other => panic!("{other:?}"),
    }
}
