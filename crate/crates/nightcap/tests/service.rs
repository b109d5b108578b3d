use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use http_body_util::BodyExt;
use nightcap::service::{router, AppState, CaptionResponse, DarkenResponse, ErrorBody};
use nightcap_core::attention::AttentionMode;
use nightcap_core::dataset::{decode_png, encode_png, generate_scene, tensor_to_rgb, SceneSpec, TEMPLATE_WORDS};
use nightcap_core::gradcheck::tiny_config;
use nightcap_core::model::CaptionModel;
use nightcap_core::vocab::Vocabulary;
use serde_json::{json, Value};
use tower::ServiceExt;

fn state() -> Arc<AppState> {
    let vocab = Vocabulary::build(&[TEMPLATE_WORDS.join(" ")], 1).unwrap();
    let model = CaptionModel::init(tiny_config(AttentionMode::Bahdanau), vocab, 3).unwrap();
    Arc::new(AppState {
        model,
        model_id: "0123456789abcdef".into(),
    })
}

fn scene_png(seed: u64) -> Vec<u8> {
    let img = generate_scene(&SceneSpec::from_seed(seed)).unwrap();
    encode_png(&tensor_to_rgb(&img.pixels))
}

fn gradient_png(w: u32, h: u32) -> Vec<u8> {
    let img = image::RgbImage::from_fn(w, h, |x, y| image::Rgb([(x * 6) as u8, (y * 8) as u8, ((x + y) * 3) as u8]));
    encode_png(&img)
}

async fn send(state: &Arc<AppState>, method: &str, uri: &str, body: Option<String>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map(Body::from).unwrap_or_else(Body::empty))
        .unwrap();
    let resp = router(state.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap())
}

async fn post(state: &Arc<AppState>, uri: &str, body: Value) -> (StatusCode, Value) {
    send(state, "POST", uri, Some(body.to_string())).await
}

fn assert_error(status: StatusCode, body: Value, code: &str) {
    assert_eq!(status, StatusCode::BAD_REQUEST, "{body}");
    let err: ErrorBody = serde_json::from_value(body).unwrap();
    assert_eq!(err.code, code);
    assert!(!err.message.is_empty());
}

#[tokio::test]
async fn caption_auto_returns_tokens_and_simplex_grids() {
    let s = state();
    let (status, body) = post(&s, "/api/caption", json!({ "image": BASE64.encode(scene_png(1)) })).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let r: CaptionResponse = serde_json::from_value(body).unwrap();
    assert_eq!(r.model_id, "0123456789abcdef");
    assert_eq!(r.guide_used, None);
    assert!(!r.degraded_guide);
    assert_eq!(r.tokens.len(), r.grids.len());
    assert!(!r.tokens.is_empty());
    for g in &r.grids {
        assert_eq!(g.len(), 8);
        assert!(g.iter().all(|row| row.len() == 8));
        let sum: f64 = g.iter().flatten().sum();
        assert!((sum - 1.0).abs() < 1e-6, "grid sums to {sum}");
    }
}

#[tokio::test]
async fn caption_guided_starts_with_guide() {
    let s = state();
    let png = BASE64.encode(scene_png(2));
    for key in ["guide_word", "guide"] {
        let (status, body) = post(&s, "/api/caption", json!({ "image": png, key: "square" })).await;
        assert_eq!(status, StatusCode::OK, "{body}");
        let r: CaptionResponse = serde_json::from_value(body).unwrap();
        assert_eq!(r.tokens[0], "square");
        assert!(r.caption.starts_with("square"));
        assert_eq!(r.guide_used.as_deref(), Some("square"));
        assert!(!r.degraded_guide);
    }
}

#[tokio::test]
async fn caption_unknown_guide_is_flagged() {
    let s = state();
    let (status, body) = post(
        &s,
        "/api/caption",
        json!({ "image": BASE64.encode(scene_png(2)), "guide_word": "giraffe" }),
    )
    .await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let r: CaptionResponse = serde_json::from_value(body).unwrap();
    assert!(r.degraded_guide);
}

#[tokio::test]
async fn caption_rejects_bad_input() {
    let s = state();
    let (st, b) = send(&s, "POST", "/api/caption", Some("{not json".into())).await;
    assert_error(st, b, "invalid_json");
    let (st, b) = post(&s, "/api/caption", json!({ "guide_word": "square" })).await;
    assert_error(st, b, "invalid_json");
    let (st, b) = post(&s, "/api/caption", json!({ "image": "!!!not base64!!!" })).await;
    assert_error(st, b, "invalid_base64");
    let (st, b) = post(&s, "/api/caption", json!({ "image": BASE64.encode(b"plain text, not a png") })).await;
    assert_error(st, b, "invalid_image");
    let png = BASE64.encode(scene_png(1));
    let (st, b) = post(&s, "/api/caption", json!({ "image": png, "guide_word": "two words" })).await;
    assert_error(st, b, "invalid_parameter");
    let (st, b) = post(&s, "/api/caption", json!({ "image": png, "extra": 1 })).await;
    assert_error(st, b, "invalid_json");
}

#[tokio::test]
async fn darken_identity_at_factor_one() {
    let s = state();
    let png = gradient_png(40, 30);
    let (status, body) = post(&s, "/api/darken", json!({ "image": BASE64.encode(&png), "factor": 1.0 })).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let r: DarkenResponse = serde_json::from_value(body).unwrap();
    let out = decode_png(&BASE64.decode(r.image).unwrap()).unwrap();
    assert_eq!(out, decode_png(&png).unwrap());
}

#[tokio::test]
async fn darken_is_linear_within_quantization() {
    let s = state();
    let png = gradient_png(40, 30);
    let (status, body) = post(&s, "/api/darken", json!({ "image": BASE64.encode(&png), "factor": 0.2 })).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let r: DarkenResponse = serde_json::from_value(body).unwrap();
    let out = decode_png(&BASE64.decode(r.image).unwrap()).unwrap();
    let input = decode_png(&png).unwrap();
    assert_eq!(out.dimensions(), (40, 30));
    for (a, b) in input.as_raw().iter().zip(out.as_raw()) {
        let expected = *a as f64 * 0.2;
        assert!((*b as f64 - expected).abs() <= 1.0, "{a} -> {b}");
    }
}

#[tokio::test]
async fn darken_rejects_bad_factor_and_image() {
    let s = state();
    let png = BASE64.encode(gradient_png(8, 8));
    for f in [0.0, -0.5, 1.5] {
        let (st, b) = post(&s, "/api/darken", json!({ "image": png, "factor": f })).await;
        assert_error(st, b, "invalid_factor");
    }
    let (st, b) = post(&s, "/api/darken", json!({ "image": png })).await;
    assert_error(st, b, "invalid_json");
    let (st, b) = post(&s, "/api/darken", json!({ "image": BASE64.encode(b"nope"), "factor": 0.5 })).await;
    assert_error(st, b, "invalid_image");
}

#[tokio::test]
async fn health_and_vocab() {
    let s = state();
    let (status, body) = send(&s, "GET", "/api/health", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, json!({ "status": "ok", "model_id": "0123456789abcdef" }));
    let (status, body) = send(&s, "GET", "/api/vocab", None).await;
    assert_eq!(status, StatusCode::OK);
    let words: Vec<String> = serde_json::from_value(body["words"].clone()).unwrap();
    assert_eq!(words.len(), TEMPLATE_WORDS.len());
    assert!(words.iter().all(|w| !w.starts_with('<')));
}

#[tokio::test]
async fn unknown_route_is_404() {
    let s = state();
    let (status, body) = send(&s, "GET", "/api/nothing", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["code"], "not_found");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn concurrent_requests_agree() {
    let s = state();
    let png = BASE64.encode(scene_png(5));
    let tasks: Vec<_> = (0..6)
        .map(|i| {
            let s = s.clone();
            let body = if i % 2 == 0 {
                json!({ "image": png })
            } else {
                json!({ "image": png, "guide_word": "circle" })
            };
            tokio::spawn(async move { post(&s, "/api/caption", body).await })
        })
        .collect();
    let mut results = Vec::new();
    for t in tasks {
        let (status, body) = t.await.unwrap();
        assert_eq!(status, StatusCode::OK);
        results.push(body);
    }
    for pair in results.chunks(2) {
        assert_eq!(pair[0], results[0]);
        assert_eq!(pair[1], results[1]);
    }
}
