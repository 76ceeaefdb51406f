use std::fs;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use http_body_util::BodyExt;
use msl_cli::{router, AppState, ServerConfig};
use msl_core::lambda_opt::save_lambda_map;
use msl_core::physics::ImageGrid;
use serde_json::{json, Value};
use tower::ServiceExt;

use crate::desk::desk;
use crate::Outcome;

async fn post(app: &Router, uri: &str, body: String) -> Result<(StatusCode, Value), String> {
    let req = Request::builder()
        .method("POST")
        .uri(uri)
        .header("content-type", "application/json")
        .body(Body::from(body))
        .map_err(|e| e.to_string())?;
    let resp = app.clone().oneshot(req).await.map_err(|e| e.to_string())?;
    let status = resp.status();
    let bytes = resp.into_body().collect().await.map_err(|e| e.to_string())?.to_bytes();
    Ok((status, serde_json::from_slice(&bytes).unwrap_or(Value::Null)))
}

fn image(v: &Value) -> Result<Vec<u8>, String> {
    let b64 = v["image"].as_str().ok_or("response has no image")?;
    BASE64.decode(b64).map_err(|e| e.to_string())
}

async fn check() -> Outcome {
    let d = desk()?;
    let scratch = tempfile::tempdir().map_err(|e| e.to_string())?;
    let state = AppState::from_checkpoint(&d.checkpoint, ServerConfig::default()).map_err(|e| e.to_string())?;
    let app = router(state);
    let case = d.data.join("heldout").join("pair_000");
    let s = |p: &std::path::Path| p.to_str().unwrap().to_string();

    let (status, v) = post(&app, "/v1/session", json!({ "case_dir": s(&case) }).to_string()).await?;
    if status != StatusCode::OK {
        return Err(format!("session creation returned {status}: {v}"));
    }
    let id = v["session_id"].as_str().ok_or("no session id")?.to_string();

    let out = scratch.path().join("infer");
    let mut compared = 0;
    for (l, stem) in [(0.0, "msl_ct"), (0.5, "msl_lambda_0.500"), (1.0, "msl_mri")] {
        let code = msl_cli::run([
            "msl",
            "infer",
            "--checkpoint",
            &s(&d.checkpoint),
            "--case",
            &s(&case),
            "--out",
            &s(&out),
            "--lambda",
            &l.to_string(),
        ]);
        if code != 0 {
            return Err(format!("msl infer exited with {code}"));
        }
        for format in ["png", "mgt"] {
            let body = json!({ "session_id": id, "lambda": l }).to_string();
            let (status, v) = post(&app, &format!("/v1/decode?format={format}"), body).await?;
            if status != StatusCode::OK {
                return Err(format!("decode lambda {l} returned {status}: {v}"));
            }
            let cli = fs::read(out.join(format!("{stem}.{format}"))).map_err(|e| e.to_string())?;
            if image(&v)? != cli {
                return Err(format!("API {format} for lambda {l} differs from CLI infer"));
            }
            compared += 1;
        }
    }

    let size = d.model.config.image_size;
    let map = ImageGrid::from_fn(size, size, |_, j| if j < size / 2 { 0.0 } else { 1.0 });
    let map_file = scratch.path().join("half.mgt");
    save_lambda_map(&map_file, &map).map_err(|e| e.to_string())?;
    let code = msl_cli::run([
        "msl",
        "infer",
        "--checkpoint",
        &s(&d.checkpoint),
        "--case",
        &s(&case),
        "--out",
        &s(&out),
        "--lambda-map",
        &s(&map_file),
    ]);
    if code != 0 {
        return Err(format!("msl infer with a map exited with {code}"));
    }
    let rows: Vec<Vec<f32>> = map.values.chunks(size).map(<[f32]>::to_vec).collect();
    let (status, v) = post(
        &app,
        "/v1/decode",
        json!({ "session_id": id, "lambda_map": rows }).to_string(),
    )
    .await?;
    if status != StatusCode::OK || image(&v)? != fs::read(out.join("msl_map.png")).map_err(|e| e.to_string())? {
        return Err("API decode of a half-image map differs from CLI infer".into());
    }
    compared += 1;

    let malformed = [
        json!({ "session_id": id, "lambda": 1.5 }).to_string(),
        json!({ "session_id": id, "lambda": -0.1 }).to_string(),
        json!({ "session_id": id, "lambda": "half" }).to_string(),
        json!({ "session_id": id, "lambda_map": [[0.5, 2.0], [0.5, 0.5]] }).to_string(),
        format!("{{\"session_id\": \"{id}\", \"lambda\": NaN}}"),
        format!("{{\"session_id\": \"{id}\", \"lambda\": "),
    ];
    for body in &malformed {
        let (status, _) = post(&app, "/v1/decode", body.clone()).await?;
        if status != StatusCode::BAD_REQUEST {
            return Err(format!("malformed lambda {body} returned {status}"));
        }
    }
    Ok(format!(
        "{compared} API decodes byte-identical to CLI infer, {} malformed requests rejected with 400",
        malformed.len()
    ))
}

pub fn run() -> Outcome {
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| e.to_string())?;
    rt.block_on(check())
}
