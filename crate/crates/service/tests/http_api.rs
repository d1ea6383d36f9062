use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use base64::Engine;
use http_body_util::BodyExt;
use imagerep_core::image::encode_png;
use imagerep_core::synthgen::{generate, BooleanSpec};
use imagerep_core::uncertainty::CalibrationModel;
use imagerep_service::{router, AnalysisResponse, AppState, ErrorBody, Health, ServiceConfig};
use serde_json::{json, Value};
use tower::ServiceExt;

fn app(config: ServiceConfig) -> Router {
    router(Arc::new(AppState::new(config).unwrap()))
}

fn circles_png(edge: usize, seed: u64) -> Vec<u8> {
    let img = generate(&BooleanSpec::circles(2, edge, 3.0, 0.4, seed)).unwrap();
    encode_png(&[edge, edge], &img.to_labels(255)).unwrap()
}

fn b64(bytes: &[u8]) -> String {
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, Value) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

async fn post_json(app: &Router, path: &str, body: Value) -> (StatusCode, Value) {
    let req = Request::post(path)
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    send(app, req).await
}

async fn get_health(app: &Router) -> Health {
    let (s, v) = send(app, Request::get("/api/health").body(Body::empty()).unwrap()).await;
    assert_eq!(s, StatusCode::OK);
    serde_json::from_value(v).unwrap()
}

fn without_timings(mut v: Value) -> Value {
    v.as_object_mut().unwrap().remove("timings");
    v
}

fn multipart(parts: &[(&str, &[u8])]) -> Request<Body> {
    let boundary = "XBOUNDARYX";
    let mut body = Vec::new();
    for (name, data) in parts {
        body.extend_from_slice(format!("--{boundary}\r\n").as_bytes());
        if *name == "image" {
            body.extend_from_slice(
                b"Content-Disposition: form-data; name=\"image\"; filename=\"x.png\"\r\nContent-Type: application/octet-stream\r\n\r\n",
            );
        } else {
            body.extend_from_slice(format!("Content-Disposition: form-data; name=\"{name}\"\r\n\r\n").as_bytes());
        }
        body.extend_from_slice(data);
        body.extend_from_slice(b"\r\n");
    }
    body.extend_from_slice(format!("--{boundary}--\r\n").as_bytes());
    Request::post("/api/analyze")
        .header("content-type", format!("multipart/form-data; boundary={boundary}"))
        .body(Body::from(body))
        .unwrap()
}

#[tokio::test]
async fn health_on_fresh_boot() {
    let h = get_health(&app(ServiceConfig::default())).await;
    assert_eq!(h.status, "ok");
    assert_eq!(h.calibrations, vec!["builtin_2d", "builtin_3d"]);
}

#[tokio::test]
async fn all_ones_is_unprocessable() {
    let png = encode_png(&[32, 32], &[1; 1024]).unwrap();
    let (s, v) = post_json(&app(ServiceConfig::default()), "/api/analyze", json!({ "image": b64(&png) })).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let e: ErrorBody = serde_json::from_value(v).unwrap();
    assert_eq!(e.code, "DegeneratePhaseFraction");
}

#[tokio::test]
async fn zero_model_error_gives_normal_half_width() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("flat.json"), CalibrationModel::zero(2).to_json().unwrap()).unwrap();
    let app = app(ServiceConfig { calibration_dir: Some(dir.path().into()), ..Default::default() });
    let body = json!({ "image": b64(&circles_png(128, 1)), "calibration": "flat", "confidence": 0.95 });
    let (s, v) = post_json(&app, "/api/analyze", body).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let r: AnalysisResponse = serde_json::from_value(v).unwrap();
    assert_eq!(r.calibration_id, "flat");
    assert!((r.report.bounds.half_width - 1.959964 * r.report.sigma_tilde).abs() < 1e-6 * r.report.sigma_tilde);
}

#[tokio::test]
async fn identical_requests_give_identical_bodies() {
    let app = app(ServiceConfig::default());
    let body = json!({ "image": b64(&circles_png(100, 2)), "target_pct": 3.0 });
    let (_, a) = post_json(&app, "/api/analyze", body.clone()).await;
    let (_, b) = post_json(&app, "/api/analyze", body).await;
    assert!(a.get("timings").is_some());
    assert_eq!(without_timings(a.clone()), without_timings(b));
    assert!(a["required_size"]["required_edge"].as_u64().unwrap() > 100);
    assert_eq!(a["calibration_id"], "builtin_2d");
}

#[tokio::test]
async fn multipart_matches_json_upload() {
    let app = app(ServiceConfig::default());
    let png = circles_png(96, 3);
    let (s, form) = send(&app, multipart(&[("image", &png), ("confidence", b"0.9"), ("phase", b"255")])).await;
    assert_eq!(s, StatusCode::OK, "{form}");
    let (_, json) = post_json(&app, "/api/analyze", json!({ "image": b64(&png), "confidence": 0.9, "phase": 255 })).await;
    assert_eq!(without_timings(form), without_timings(json));

    let raw: Vec<u8> = generate(&BooleanSpec::circles(3, 24, 2.0, 0.4, 4)).unwrap().bits().to_vec();
    let (s, v) = send(&app, multipart(&[("image", &raw), ("dims", b"24,24,24"), ("format", b"raw")])).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["dims"], json!([24, 24, 24]));
    assert_eq!(v["calibration_id"], "builtin_3d");

    let (s, v) = send(&app, multipart(&[("image", &png), ("image", &png)])).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["code"], "InvalidArgument");
    let (s, _) = send(&app, multipart(&[("confidence", b"0.9")])).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn validation_errors() {
    let app = app(ServiceConfig::default());
    let png = circles_png(64, 5);
    let cases = [
        (json!({ "image": b64(&png), "confidence": 0.4 }), "InvalidConfidence"),
        (json!({ "image": b64(&png), "confidence": 0.99995 }), "InvalidConfidence"),
        (json!({ "image": "***" }), "InvalidArgument"),
        (json!({ "image": b64(&png), "calibration": "missing" }), "InvalidArgument"),
        (json!({ "image": b64(&png), "phase": 9 }), "UnknownPhase"),
        (json!({ "image": b64(&[1, 2, 3]) }), "UnsupportedFormat"),
        (json!({ "image": b64(&[0; 27]), "dims": [3, 3, 3] }), "ImageTooSmall"),
        (json!({ "nothing": 1 }), "InvalidArgument"),
    ];
    for (body, code) in cases {
        let (s, v) = post_json(&app, "/api/analyze", body.clone()).await;
        assert_eq!(s, StatusCode::BAD_REQUEST, "{body}");
        assert_eq!(v["code"], code, "{body}: {v}");
    }
}

#[tokio::test]
async fn oversized_payload_is_rejected() {
    let app = app(ServiceConfig { max_body_bytes: 2048, ..Default::default() });
    let png = circles_png(200, 6);
    assert!(png.len() > 2048);
    let (s, v) = post_json(&app, "/api/analyze", json!({ "image": b64(&png) })).await;
    assert_eq!(s, StatusCode::PAYLOAD_TOO_LARGE);
    assert_eq!(v["code"], "PayloadTooLarge");
    let (s, _) = send(&app, multipart(&[("image", &png)])).await;
    assert_eq!(s, StatusCode::PAYLOAD_TOO_LARGE);
}

#[tokio::test]
async fn reload_makes_new_calibration_visible() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(ServiceConfig { calibration_dir: Some(dir.path().into()), ..Default::default() });
    assert!(!get_health(&app).await.calibrations.contains(&"lab".to_string()));
    let model = CalibrationModel::power(2, 1.5, 0.2, [1e4, 1e6], "lab");
    std::fs::write(dir.path().join("lab.json"), model.to_json().unwrap()).unwrap();
    let (s, v) = post_json(&app, "/api/admin/reload-calibration", json!({})).await;
    assert_eq!(s, StatusCode::OK);
    assert!(v["calibrations"].as_array().unwrap().contains(&json!("lab")));
    assert!(get_health(&app).await.calibrations.contains(&"lab".to_string()));

    std::fs::write(dir.path().join("broken.json"), "{").unwrap();
    let (s, _) = post_json(&app, "/api/admin/reload-calibration", json!({})).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    // A failed reload leaves the previous snapshot in place.
    assert!(get_health(&app).await.calibrations.contains(&"lab".to_string()));
}

#[tokio::test]
async fn default_file_overrides_builtin() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("default_2d.json"), CalibrationModel::zero(2).to_json().unwrap()).unwrap();
    let app = app(ServiceConfig { calibration_dir: Some(dir.path().into()), ..Default::default() });
    let (_, v) = post_json(&app, "/api/analyze", json!({ "image": b64(&circles_png(64, 7)) })).await;
    assert_eq!(v["calibration_id"], "default_2d");
    assert_eq!(v["sigma_mod"], 0.0);
}

#[tokio::test]
async fn required_size_endpoint() {
    let app = app(ServiceConfig::default());
    let flat = |d: f64| json!({ "cls": 10.0, "dims": [100, 100], "phi_obs": 0.5, "target_pct": d, "method": "subdivision" });
    let (s, a) = post_json(&app, "/api/required-size", flat(10.0)).await;
    assert_eq!(s, StatusCode::OK, "{a}");
    let (_, b) = post_json(&app, "/api/required-size", flat(5.0)).await;
    let ratio = b["required_volume"].as_f64().unwrap() / a["required_volume"].as_f64().unwrap();
    assert!((ratio - 4.0).abs() < 0.04);

    let (s, v) = post_json(&app, "/api/required-size", json!({ "cls": 12.0, "dims": [200, 200], "phi_obs": 0.35, "target_pct": 1e-5 })).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["code"], "TargetUnreachable");
    let (s, v) = post_json(&app, "/api/required-size", json!({ "cls": 12.0, "dims": [200, 200], "phi_obs": 0.35, "target_pct": 4.0, "confidence": 1.2 })).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["code"], "InvalidConfidence");
    let (s, _) = post_json(&app, "/api/required-size", json!({ "cls": 12.0, "dims": [200], "phi_obs": 0.35, "target_pct": 4.0 })).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);

    // Agrees with the recommendation embedded in an analysis.
    let (_, r) = post_json(&app, "/api/analyze", json!({ "image": b64(&circles_png(128, 8)), "target_pct": 2.0 })).await;
    let (_, q) = post_json(&app, "/api/required-size", json!({
        "cls": r["cls"], "dims": r["dims"], "phi_obs": r["phi_obs"], "target_pct": 2.0
    }))
    .await;
    assert_eq!(q, r["required_size"]);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn health_stays_fast_under_load() {
    let app = app(ServiceConfig::default());
    let body = json!({ "image": b64(&circles_png(512, 9)) }).to_string();
    let mut jobs = Vec::new();
    for _ in 0..4 {
        let req = Request::post("/api/analyze")
            .header("content-type", "application/json")
            .body(Body::from(body.clone()))
            .unwrap();
        jobs.push(tokio::spawn(app.clone().oneshot(req)));
    }
    tokio::time::sleep(Duration::from_millis(50)).await;
    let mut worst = Duration::ZERO;
    for _ in 0..5 {
        let t = Instant::now();
        get_health(&app).await;
        worst = worst.max(t.elapsed());
    }
    for j in jobs {
        assert_eq!(j.await.unwrap().unwrap().status(), StatusCode::OK);
    }
    assert!(worst < Duration::from_millis(100), "health took {worst:?}");
}
