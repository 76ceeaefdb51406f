//! Drive the HTTP service in-process: open a session on a case, decode at a
//! few lambda values and with a painted half-image map, and run the
//! lambda-map optimizer.
//!
//! `cargo run -p msl-cli --example service_session [checkpoint.mslc]`
//!
//! With no checkpoint an untrained tiny model is used, which is enough to
//! see the request/response shapes.

use axum::body::Body;
use axum::http::Request;
use axum::Router;
use http_body_util::BodyExt;
use msl_cli::{router, AppState, ServerConfig};
use msl_core::model::{ModelConfig, MslModel};
use serde_json::{json, Value};
use tower::ServiceExt;

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> Value {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map(|b| Body::from(b.to_string())).unwrap_or_else(Body::empty))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let mut v: Value = serde_json::from_slice(&bytes).unwrap_or(Value::Null);
    // Images are long base64 strings; show their size instead.
    if let Some(img) = v.get("image").and_then(Value::as_str).map(str::len) {
        v["image"] = json!(format!("<{img} base64 chars>"));
    }
    println!("{method} {uri} -> {status}");
    v
}

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let checkpoint = match std::env::args().nth(1) {
        Some(p) => p.into(),
        None => {
            let p = dir.path().join("tiny.mslc");
            MslModel::new(ModelConfig::tiny(), 0)?.save(&p)?;
            p
        }
    };
    let size = MslModel::load(&checkpoint)?.config.image_size.to_string();
    let data = dir.path().join("data");
    let code = msl_cli::run([
        "msl",
        "gen-data",
        "--out",
        data.to_str().unwrap(),
        "--pairs",
        "1",
        "--size",
        &size,
    ]);
    assert_eq!(code, 0);

    let state = AppState::from_checkpoint(
        &checkpoint,
        ServerConfig {
            data_dir: Some(data),
            ..ServerConfig::default()
        },
    )?;
    let app = router(state);

    println!("{}", call(&app, "GET", "/v1/health", None).await);
    let s = call(&app, "POST", "/v1/session", Some(json!({ "case_id": "pair_000" }))).await;
    println!("{s}");
    let id = s["session_id"].clone();

    for lambda in [0.0, 0.5, 1.0] {
        let v = call(
            &app,
            "POST",
            "/v1/decode",
            Some(json!({ "session_id": id, "lambda": lambda })),
        )
        .await;
        println!("  lambda {lambda}: metrics {}", v["metrics"]);
    }
    let n: usize = size.parse()?;
    let half: Vec<Vec<f32>> = (0..n)
        .map(|_| (0..n).map(|j| if j < n / 2 { 0.0 } else { 1.0 }).collect())
        .collect();
    let v = call(
        &app,
        "POST",
        "/v1/decode",
        Some(json!({ "session_id": id, "lambda_map": half })),
    )
    .await;
    println!("  half map: {}", v["image"]);

    let v = call(
        &app,
        "POST",
        "/v1/decode",
        Some(json!({ "session_id": id, "lambda": 1.5 })),
    )
    .await;
    println!("  {v}");

    let v = call(
        &app,
        "POST",
        "/v1/optimize",
        Some(json!({ "session_id": id, "alpha": 0.001, "iters": 50, "step": 0.05 })),
    )
    .await;
    let trace = v["objective_trace"].as_array().map_or(0, Vec::len);
    println!("  optimize: objective {} after {trace} evaluations", v["objective"]);
    Ok(())
}
