use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use base64::Engine;
use http_body_util::BodyExt;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tower::ServiceExt;

use gsgn_core::checkpoint::Checkpoint;
use gsgn_core::data::{decode_png, encode_png};
use gsgn_core::inference::Enhancer;
use gsgn_core::models::{Gsgn, ModelConfig, NormMode};
use gsgn_core::Tensor;
use gsgn_service::{router, ServiceState, METADATA_HEADER};

use crate::{Context, CriterionResult, Outcome};

type Check = Result<(), String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Check {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

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
    let (_, p) = Gsgn::build(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).expect("toy model");
    Checkpoint::from_generator(&cfg, vec!["bright".into(), "warm".into(), "cool".into()], &p).expect("toy checkpoint")
}

fn png(h: usize, w: usize) -> Vec<u8> {
    encode_png(&Tensor::from_fn([3, h, w], |k| ((k * 53 % 97) as f32) / 96.0)).expect("png")
}

fn b64(bytes: &[u8]) -> String {
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

struct Reply {
    status: StatusCode,
    content_type: String,
    meta: Option<Value>,
    body: Vec<u8>,
}

impl Reply {
    fn json(&self) -> Value {
        serde_json::from_slice(&self.body).unwrap_or(Value::Null)
    }

    fn model_id(&self) -> String {
        self.meta.as_ref().and_then(|m| m["model_id"].as_str()).unwrap_or_default().to_string()
    }
}

async fn send(state: &Arc<ServiceState>, req: Request<Body>) -> Reply {
    let resp = router(state.clone()).oneshot(req).await.expect("infallible router");
    let status = resp.status();
    let (content_type, meta) = {
        let header = |name: &str| resp.headers().get(name).and_then(|v| v.to_str().ok()).map(str::to_string);
        (header("content-type").unwrap_or_default(), header(METADATA_HEADER).and_then(|v| serde_json::from_str(&v).ok()))
    };
    let body = resp.into_body().collect().await.map(|b| b.to_bytes().to_vec()).unwrap_or_default();
    Reply { status, content_type, meta, body }
}

fn get(path: &str) -> Request<Body> {
    Request::get(path).body(Body::empty()).expect("request")
}

fn enhance(body: Value) -> Request<Body> {
    Request::post("/v1/enhance").header("content-type", "application/json").body(Body::from(body.to_string())).expect("request")
}

fn multipart(parts: &[(&str, &[u8])]) -> Request<Body> {
    let boundary = "acceptanceboundary";
    let mut body = Vec::new();
    for (name, data) in parts {
        body.extend_from_slice(format!("--{boundary}\r\n").as_bytes());
        if *name == "image" {
            body.extend_from_slice(b"Content-Disposition: form-data; name=\"image\"; filename=\"x.png\"\r\nContent-Type: image/png\r\n\r\n");
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
        .expect("request")
}

fn loaded(ck: &Checkpoint, max_edge: usize) -> Arc<ServiceState> {
    let state = Arc::new(ServiceState::new(max_edge));
    state.install_checkpoint(ck).expect("install");
    state
}

async fn health(ck: &Checkpoint) -> Check {
    let r = send(&Arc::new(ServiceState::new(64)), get("/healthz")).await;
    ensure(r.status == StatusCode::SERVICE_UNAVAILABLE, format!("unloaded health gave {}", r.status))?;
    let r = send(&loaded(ck, 64), get("/healthz")).await;
    let hash = format!("{:016x}", ck.content_hash().map_err(|e| e.to_string())?);
    ensure(r.status == StatusCode::OK, format!("loaded health gave {}", r.status))?;
    ensure(r.json()["checkpoint_hash"] == hash.as_str(), "health lacks the 64-bit content hash")
}

async fn styles(ck: &Checkpoint) -> Check {
    let r = send(&loaded(ck, 64), get("/v1/styles")).await;
    let want = json!([{"index": 0, "name": "bright"}, {"index": 1, "name": "warm"}, {"index": 2, "name": "cool"}]);
    ensure(r.status == StatusCode::OK && r.json() == want, format!("styles gave {}", r.json()))?;
    let (_, params) = Gsgn::build(&ck.config, &mut ChaCha8Rng::seed_from_u64(0)).map_err(|e| e.to_string())?;
    let bad = Checkpoint::from_generator(&ck.config, vec!["a".into(), " ".into(), "c".into()], &params)
        .and_then(|c| c.to_bytes());
    ensure(bad.is_err(), "a checkpoint with an empty task name was accepted")?;
    let r = send(&Arc::new(ServiceState::new(64)), get("/v1/styles")).await;
    ensure(r.status == StatusCode::SERVICE_UNAVAILABLE, "unloaded styles not 503")
}

async fn named_style(ck: &Checkpoint) -> Check {
    let input = png(13, 22);
    let r = send(&loaded(ck, 1024), enhance(json!({"image": b64(&input), "style": "warm"}))).await;
    ensure(r.status == StatusCode::OK && r.content_type == "image/png", format!("named style gave {}", r.status))?;
    let out = decode_png(&r.body).map_err(|e| e.to_string())?;
    ensure(out.shape() == [3, 13, 22], format!("output shape {:?}", out.shape()))?;
    let e = Enhancer::from_checkpoint(ck).map_err(|e| e.to_string())?;
    let local = e.enhance_png(&input, &e.parse_style("warm").map_err(|e| e.to_string())?, None).map_err(|e| e.to_string())?;
    ensure(local == r.body, "service bytes differ from local inference")
}

async fn rejections(ck: &Checkpoint) -> Check {
    let state = loaded(ck, 16);
    let input = b64(&png(12, 12));
    let r = send(&state, enhance(json!({"image": input, "style": [0.5, 0.5]}))).await;
    let msg = r.json()["error"].as_str().unwrap_or_default().to_string();
    ensure(r.status == StatusCode::BAD_REQUEST && msg.contains("3 tasks"), format!("wrong-length weights: {} {msg}", r.status))?;
    for body in [json!({"image": input, "style": "sepia"}), json!({"image": b64(b"nope")}), json!({"style": "warm"})] {
        let r = send(&state, enhance(body.clone())).await;
        ensure(r.status == StatusCode::BAD_REQUEST && r.json()["error"].is_string(), format!("{body} gave {}", r.status))?;
    }
    let r = send(&state, enhance(json!({"image": b64(&png(8, 17))}))).await;
    ensure(r.status == StatusCode::PAYLOAD_TOO_LARGE, format!("oversized image gave {}", r.status))?;
    let r = send(&Arc::new(ServiceState::new(64)), enhance(json!({"image": input}))).await;
    ensure(r.status == StatusCode::SERVICE_UNAVAILABLE, format!("unloaded enhance gave {}", r.status))?;
    let req = Request::post("/v1/enhance").header("content-type", "text/plain").body(Body::from("x")).expect("request");
    let r = send(&state, req).await;
    ensure(r.status == StatusCode::UNSUPPORTED_MEDIA_TYPE, format!("text body gave {}", r.status))
}

async fn determinism_and_clamping(ck: &Checkpoint) -> Check {
    let state = loaded(ck, 1024);
    let input = png(16, 20);
    let body = json!({"image": b64(&input), "style": [0.2, 0.3, 0.5]});
    let first = send(&state, enhance(body.clone())).await;
    let handles: Vec<_> = (0..6)
        .map(|_| {
            let (s, b) = (state.clone(), body.clone());
            tokio::spawn(async move { send(&s, enhance(b)).await.body })
        })
        .collect();
    for h in handles {
        ensure(h.await.map_err(|e| e.to_string())? == first.body, "concurrent identical requests differ")?;
    }
    let raw = send(&state, enhance(json!({"image": b64(&input), "style": [2.0, -1.0, 0.5]}))).await;
    let clamped = send(&state, enhance(json!({"image": b64(&input), "style": [1.0, 0.0, 0.5]}))).await;
    ensure(raw.status == StatusCode::OK && raw.body == clamped.body, "weights outside [0, 1] are not clamped")?;
    let m = send(&state, multipart(&[("image", &input), ("style", b"0.2,0.3,0.5")])).await;
    ensure(m.body == first.body, "multipart and JSON bodies differ")
}

async fn hot_swap() -> Check {
    let (a, b) = (toy_checkpoint(1), toy_checkpoint(2));
    let state = loaded(&a, 1024);
    let input = png(12, 12);
    let outputs: Vec<(String, Vec<u8>)> = [&a, &b]
        .iter()
        .map(|ck| {
            let e = Enhancer::from_checkpoint(ck).expect("enhancer");
            let out = e.enhance_png(&input, &e.parse_style("warm").expect("style"), None).expect("enhance");
            (e.model_id(), out)
        })
        .collect();
    ensure(outputs[0].1 != outputs[1].1, "toy checkpoints are indistinguishable")?;
    let pinned = state.current().ok_or("no snapshot")?;
    state.install_checkpoint(&b).map_err(|e| e.to_string())?;
    ensure(pinned.model_id() == outputs[0].0, "a held snapshot changed under a swap")?;
    let body = json!({"image": b64(&input), "style": "warm"});
    ensure(send(&state, enhance(body.clone())).await.model_id() == outputs[1].0, "new requests do not see the new model")?;

    let mut requests = Vec::new();
    for i in 0..16 {
        let (s, req) = (state.clone(), body.clone());
        requests.push(tokio::spawn(async move { send(&s, enhance(req)).await }));
        let (s, next) = (state.clone(), if i % 2 == 0 { a.clone() } else { b.clone() });
        tokio::spawn(async move { s.install_checkpoint(&next) });
    }
    for r in requests {
        let r = r.await.map_err(|e| e.to_string())?;
        let id = r.model_id();
        let expected = outputs.iter().find(|(m, _)| *m == id).ok_or(format!("unknown model id {id}"))?;
        ensure(r.body == expected.1, "response mixes weights from two snapshots")?;
    }
    Ok(())
}

pub fn contract(_: &mut Context) -> CriterionResult {
    let ck = toy_checkpoint(1);
    let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build()?;
    let checks: Vec<(&str, Check)> = rt.block_on(async {
        vec![
            ("health", health(&ck).await),
            ("styles", styles(&ck).await),
            ("named style", named_style(&ck).await),
            ("rejections", rejections(&ck).await),
            ("determinism and clamping", determinism_and_clamping(&ck).await),
            ("hot swap", hot_swap().await),
        ]
    });
    let failed: Vec<String> = checks.iter().filter_map(|(n, c)| c.as_ref().err().map(|e| format!("{n}: {e}"))).collect();
    let detail = if failed.is_empty() {
        format!("{} groups passed: {}", checks.len(), checks.iter().map(|(n, _)| *n).collect::<Vec<_>>().join(", "))
    } else {
        failed.join("; ")
    };
    Ok(Outcome::check(failed.is_empty(), detail))
}
