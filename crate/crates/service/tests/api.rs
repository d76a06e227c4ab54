use std::time::Duration;

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use refsep_core::io::{decode_image, encode_png16, encode_png8, Channel16};
use refsep_core::{GmmPrior, Image};
use refsep_service::{router, AppState, ServiceConfig};
use serde_json::{json, Value};
use tower::ServiceExt;

fn test_prior(k: usize) -> GmmPrior {
    let weights = vec![1.0 / k as f64; k];
    let means = (0..k)
        .map(|c| (0..64).map(|d| 0.2 + 0.05 * c as f64 + 0.002 * ((d * (c + 1)) % 7) as f64).collect())
        .collect();
    let covs = (0..k)
        .map(|c| {
            let mut m = vec![0.0; 64 * 64];
            for r in 0..64 {
                for q in 0..64 {
                    let dist = ((r % 8) as f64 - (q % 8) as f64).abs() + ((r / 8) as f64 - (q / 8) as f64).abs();
                    m[r * 64 + q] = (0.002 + 0.001 * c as f64) * (-dist / (1.0 + c as f64)).exp();
                }
                m[r * 64 + r] += 1e-4;
            }
            m
        })
        .collect();
    GmmPrior::new(weights, means, covs).unwrap()
}

fn app_with(k: usize, config: ServiceConfig) -> (Router, AppState) {
    let state = AppState::new(test_prior(k), config).unwrap();
    (router(state.clone()), state)
}

fn app() -> (Router, AppState) {
    let cfg = ServiceConfig {
        separation: refsep_core::SeparationConfig {
            beta_schedule: Some(vec![0.1, 1.0, 10.0]),
            outer_iters_per_beta: 1,
            clip_to_physical: true,
            ..Default::default()
        },
        ..Default::default()
    };
    app_with(10, cfg)
}

fn test_png(w: usize, h: usize) -> Vec<u8> {
    let img = Image::from_fn(w, h, |x, y| (0.2 + 0.5 * ((x * 7 + y * 13) % 17) as f64 / 17.0).min(1.0));
    encode_png8(&img).unwrap()
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>, axum::http::HeaderMap) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let headers = resp.headers().clone();
    let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, body, headers)
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let builder = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => builder.header(header::CONTENT_TYPE, "application/json").body(Body::from(b.to_string())),
        None => builder.body(Body::empty()),
    }
    .unwrap();
    let (status, bytes, _) = send(app, req).await;
    let v = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap_or(Value::Null) };
    (status, v)
}

async fn upload(app: &Router, bytes: Vec<u8>) -> (StatusCode, Value) {
    let req = Request::post("/v1/sessions").header(header::CONTENT_TYPE, "image/png").body(Body::from(bytes)).unwrap();
    let (status, body, _) = send(app, req).await;
    (status, serde_json::from_slice(&body).unwrap_or(Value::Null))
}

async fn new_session(app: &Router, w: usize, h: usize) -> String {
    let (status, v) = upload(app, test_png(w, h)).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    v["session_id"].as_str().unwrap().to_string()
}

#[tokio::test]
async fn upload_echoes_dimensions_and_rejects_bad_input() {
    let (app, _) = app();
    let (status, v) = upload(&app, test_png(32, 24)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!((v["width"].as_u64(), v["height"].as_u64()), (Some(32), Some(24)));
    assert!(v["session_id"].as_str().is_some());

    assert_eq!(upload(&app, test_png(4, 4)).await.0, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(upload(&app, b"not an image at all".to_vec()).await.0, StatusCode::UNSUPPORTED_MEDIA_TYPE);

    let (small, _) = app_with(2, ServiceConfig { max_upload_bytes: 64, ..Default::default() });
    assert_eq!(upload(&small, test_png(32, 32)).await.0, StatusCode::PAYLOAD_TOO_LARGE);
}

#[tokio::test]
async fn candidates_default_to_one_hundred_and_are_deterministic() {
    let (app, _) = app();
    let id = new_session(&app, 32, 24).await;
    let uri = format!("/v1/sessions/{id}/candidates?x=10&y=12");
    let (status, v) = call(&app, "GET", &uri, None).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    let cands = v["candidates"].as_array().unwrap();
    assert_eq!(cands.len(), 100);
    assert_eq!(v["origin"], json!([6, 8]));
    let y: Vec<f64> = v["y_patch"].as_array().unwrap().iter().map(|e| e.as_f64().unwrap()).collect();
    let mut last = f64::INFINITY;
    for (k, c) in cands.iter().enumerate() {
        assert_eq!(c["rank"].as_u64(), Some(k as u64));
        let lw = c["log_weight"].as_f64().unwrap();
        assert!(lw <= last);
        last = lw;
        let x1 = c["x1"].as_array().unwrap();
        let x2 = c["x2"].as_array().unwrap();
        for d in 0..64 {
            assert_eq!(x1[d].as_f64().unwrap() + x2[d].as_f64().unwrap(), y[d]);
        }
        for t in ["thumb_x1", "thumb_x2"] {
            use base64::Engine as _;
            let png = base64::engine::general_purpose::STANDARD.decode(c[t].as_str().unwrap()).unwrap();
            let img = decode_image(&png).unwrap();
            assert_eq!((img.width(), img.height()), (64, 64));
        }
    }
    let again = call(&app, "GET", &uri, None).await.1;
    assert_eq!(again, v);
    let (_, few) = call(&app, "GET", &format!("/v1/sessions/{id}/candidates?x=10&y=12&n=3"), None).await;
    assert_eq!(few["candidates"].as_array().unwrap().len(), 3);
}

#[tokio::test]
async fn candidate_errors() {
    let (app, _) = app();
    let id = new_session(&app, 32, 24).await;
    assert_eq!(call(&app, "GET", "/v1/sessions/nope/candidates?x=10&y=10", None).await.0, StatusCode::NOT_FOUND);
    for (x, y) in [(3, 10), (29, 10), (10, 21), (100, 100)] {
        let uri = format!("/v1/sessions/{id}/candidates?x={x}&y={y}");
        assert_eq!(call(&app, "GET", &uri, None).await.0, StatusCode::UNPROCESSABLE_ENTITY, "({x}, {y})");
    }
    let uri = format!("/v1/sessions/{id}/candidates?x=10&y=10&n=0");
    assert_eq!(call(&app, "GET", &uri, None).await.0, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(call(&app, "GET", &format!("/v1/sessions/{id}/candidates?x=28&y=20"), None).await.0, StatusCode::OK);
}

#[tokio::test]
async fn annotations_add_delete_and_validate() {
    let (app, _) = app();
    let id = new_session(&app, 32, 24).await;
    let base = format!("/v1/sessions/{id}/annotations");
    let (_, cands) = call(&app, "GET", &format!("/v1/sessions/{id}/candidates?x=10&y=12"), None).await;
    let (status, list) = call(&app, "POST", &base, Some(json!({"x": 10, "y": 12, "rank": 4}))).await;
    assert_eq!(status, StatusCode::OK, "{list}");
    assert_eq!(list[0]["i"], cands["candidates"][4]["i"]);
    assert_eq!(list[0]["j"], cands["candidates"][4]["j"]);

    let (_, list) = call(&app, "POST", &base, Some(json!({"x": 10, "y": 12, "i": 2, "j": 7}))).await;
    assert_eq!(list.as_array().unwrap().len(), 2);
    assert_eq!(list[1], json!({"x": 10, "y": 12, "i": 2, "j": 7}));

    let (_, list) = call(&app, "POST", &base, Some(json!({"x": 20, "y": 8, "i": 1, "j": 1}))).await;
    let (status, after) = call(&app, "DELETE", &format!("{base}/2"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(after, json!(list.as_array().unwrap()[..2]));
    assert_eq!(call(&app, "GET", &base, None).await.1, after);

    for bad in [
        json!({"x": 10, "y": 12, "rank": 100}),
        json!({"x": 10, "y": 12, "rank": 2, "n": 2}),
        json!({"x": 10, "y": 12, "i": 10, "j": 0}),
        json!({"x": 10, "y": 12, "i": 1}),
        json!({"x": 10, "y": 12}),
        json!({"x": 2, "y": 12, "i": 1, "j": 1}),
        json!({"x": 10, "y": 12, "i": 1, "j": 1, "extra": true}),
    ] {
        assert_eq!(call(&app, "POST", &base, Some(bad.clone())).await.0, StatusCode::UNPROCESSABLE_ENTITY, "{bad}");
    }
    assert_eq!(call(&app, "DELETE", &format!("{base}/9"), None).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&app, "GET", &base, None).await.1, after);
}

async fn wait_done(app: &Router, id: &str) -> Value {
    let mut last = 0.0;
    for _ in 0..600 {
        let (status, v) = call(app, "GET", &format!("/v1/sessions/{id}/result"), None).await;
        assert_eq!(status, StatusCode::OK);
        let p = v["progress"].as_f64().unwrap();
        assert!(p >= last, "progress went from {last} to {p}");
        last = p;
        match v["state"].as_str().unwrap() {
            "done" | "failed" => return v,
            _ => tokio::time::sleep(Duration::from_millis(50)).await,
        }
    }
    panic!("separation did not finish");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn separation_job_lifecycle() {
    let (app, state) = app();
    let png = test_png(24, 24);
    let input = decode_image(&png).unwrap();
    let (_, v) = upload(&app, png).await;
    let id = v["session_id"].as_str().unwrap().to_string();
    let anns = format!("/v1/sessions/{id}/annotations");
    call(&app, "POST", &anns, Some(json!({"x": 8, "y": 8, "rank": 0}))).await;

    assert_eq!(call(&app, "GET", &format!("/v1/sessions/{id}/layers/1"), None).await.0, StatusCode::CONFLICT);
    let sep = format!("/v1/sessions/{id}/separate");
    assert_eq!(call(&app, "POST", &sep, Some(json!({"stride": 0}))).await.0, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(call(&app, "POST", &sep, Some(json!({"strid": 2}))).await.0, StatusCode::UNPROCESSABLE_ENTITY);

    let hold = state.workers().acquire_owned().await.unwrap();
    let (status, v) = call(&app, "POST", &sep, None).await;
    assert_eq!(status, StatusCode::ACCEPTED, "{v}");
    assert_eq!(call(&app, "POST", &sep, None).await.0, StatusCode::CONFLICT);
    assert_eq!(call(&app, "POST", &anns, Some(json!({"x": 8, "y": 8, "rank": 1}))).await.0, StatusCode::CONFLICT);
    assert_eq!(call(&app, "DELETE", &format!("{anns}/0"), None).await.0, StatusCode::CONFLICT);
    let (_, info) = call(&app, "GET", &format!("/v1/sessions/{id}"), None).await;
    assert_eq!(info["state"], "separating");
    assert_eq!(info["annotations"].as_array().unwrap().len(), 1);
    drop(hold);

    let done = wait_done(&app, &id).await;
    assert_eq!(done["state"], "done", "{done}");
    assert_eq!(done["progress"].as_f64(), Some(1.0));
    let trace = done["result"]["objective_trace"].as_array().unwrap();
    assert_eq!(trace.len(), 4);

    let mut layers = Vec::new();
    for l in 1..=2 {
        let req = Request::get(format!("/v1/sessions/{id}/layers/{l}")).body(Body::empty()).unwrap();
        let (status, bytes, headers) = send(&app, req).await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(headers[header::CONTENT_TYPE], "image/png");
        layers.push(decode_image(&bytes).unwrap());
    }
    for p in 0..24 * 24 {
        assert_eq!(
            layers[0].channels[0].codes[p] as u32 + layers[1].channels[0].codes[p] as u32,
            input.channels[0].codes[p] as u32
        );
    }
    assert_eq!(call(&app, "POST", &sep, None).await.0, StatusCode::CONFLICT);
    assert_eq!(call(&app, "POST", &anns, Some(json!({"x": 8, "y": 8, "rank": 1}))).await.0, StatusCode::CONFLICT);
    assert_eq!(call(&app, "GET", &format!("/v1/sessions/{id}/layers/3"), None).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn unannotated_color_separation_runs() {
    let (app, _) = app();
    let channel = |c: usize| Channel16 {
        width: 16,
        height: 16,
        codes: (0..256).map(|p| (6000 + 1500 * ((p * (c + 2) + p / 16) % 11)) as u16).collect(),
    };
    let png = encode_png16(&[channel(0), channel(1), channel(2)]).unwrap();
    let input = decode_image(&png).unwrap();
    assert!(input.is_color());
    let (_, v) = upload(&app, png).await;
    assert_eq!(v["channels"], 3);
    let id = v["session_id"].as_str().unwrap().to_string();
    assert_eq!(call(&app, "POST", &format!("/v1/sessions/{id}/separate"), Some(json!({}))).await.0, StatusCode::ACCEPTED);
    let done = wait_done(&app, &id).await;
    assert_eq!(done["state"], "done", "{done}");
    assert_eq!(done["result"]["summary"]["channels"].as_array().unwrap().len(), 3);
    let mut layers = Vec::new();
    for l in 1..=2 {
        let req = Request::get(format!("/v1/sessions/{id}/layers/{l}")).body(Body::empty()).unwrap();
        layers.push(decode_image(&send(&app, req).await.1).unwrap());
    }
    for c in 0..3 {
        for p in 0..256 {
            let sum = layers[0].channels[c].codes[p] as u32 + layers[1].channels[c].codes[p] as u32;
            assert_eq!(sum, input.channels[c].codes[p] as u32);
        }
    }
}

#[tokio::test]
async fn session_file_matches_upload() {
    let (app, state) = app();
    let png = test_png(24, 24);
    let sha = decode_image(&png).unwrap().sha256;
    let (_, v) = upload(&app, png).await;
    let id = v["session_id"].as_str().unwrap();
    call(&app, "POST", &format!("/v1/sessions/{id}/annotations"), Some(json!({"x": 12, "y": 12, "i": 3, "j": 4}))).await;
    let (status, f) = call(&app, "GET", &format!("/v1/sessions/{id}/session-file"), None).await;
    assert_eq!(status, StatusCode::OK);
    let file: refsep_core::session::SessionFile = serde_json::from_value(f).unwrap();
    file.check(&sha, &test_prior(10).id().to_string()).unwrap();
    assert_eq!(file.annotations.len(), 1);
    let _ = state;
}

#[tokio::test]
async fn cors_and_health() {
    let (app, _) = app();
    let req = Request::get("/v1/health").header(header::ORIGIN, "http://localhost:5173").body(Body::empty()).unwrap();
    let (status, body, headers) = send(&app, req).await;
    assert_eq!(status, StatusCode::OK);
    assert!(headers.contains_key(header::ACCESS_CONTROL_ALLOW_ORIGIN));
    let v: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v["k"], 10);
    assert_eq!(call(&app, "GET", "/health", None).await.0, StatusCode::NOT_FOUND);
}
