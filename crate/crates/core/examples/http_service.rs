//! The HTTP service driven in-process: register, generate, mix, adapt.
//!
//! Pass `--listen` to serve on 127.0.0.1:8080 with the same registry instead.

use std::time::Duration;

use axum::body::Body;
use axum::http::Request;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use styledomain::arch::{ArchitectureDescriptor, GeneratorWeights};
use styledomain::checkpoint;
use styledomain::directions::StyleDomainDirection;
use styledomain::service::{router, serve, AppState};
use tower::ServiceExt;

async fn call(app: &axum::Router, method: &str, uri: &str, body: Value) -> anyhow::Result<(u16, Value)> {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(if body.is_null() { Body::empty() } else { Body::from(body.to_string()) })?;
    let resp = app.clone().oneshot(req).await?;
    let status = resp.status().as_u16();
    let bytes = resp.into_body().collect().await?.to_bytes();
    Ok((status, serde_json::from_slice(&bytes).unwrap_or(Value::Null)))
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    let root = std::env::temp_dir().join("styledomain-registry-example");
    let _ = std::fs::remove_dir_all(&root);
    let desc = ArchitectureDescriptor::preset("toy8")?;
    let gen_path = std::env::temp_dir().join("example-parent.sdck");
    checkpoint::save(&GeneratorWeights::random(&desc, 0)?, &gen_path)?;
    let dir_path = std::env::temp_dir().join("example-zero.sdir");
    StyleDomainDirection::zeros(&desc, "identity").save(&dir_path)?;

    if std::env::args().any(|a| a == "--listen") {
        return serve("127.0.0.1:8080".parse()?, root).await;
    }

    let app = router(AppState::start(&root)?);
    let (_, g) = call(&app, "POST", "/register", json!({"kind": "generator", "path": gen_path})).await?;
    let (_, d) = call(&app, "POST", "/register", json!({"kind": "direction", "path": dir_path})).await?;
    let (gid, did) = (g["id"].as_str().unwrap_or_default(), d["id"].as_str().unwrap_or_default());
    println!("registered {gid} and {did}");

    let req = json!({"generator_id": gid, "directions": [{"id": did, "coeff": 1.0}], "seeds": [0, 1], "psi": 0.7});
    let (status, body) = call(&app, "POST", "/generate", req).await?;
    println!("/generate -> {status}, content hash {}", body["content_hash"]);

    let (status, body) = call(&app, "POST", "/mix", json!({"directions": [{"id": did, "coeff": 2.0}]})).await?;
    println!("/mix -> {status}, new entry {}", body["id"]);

    let recipe = json!({"generator_id": gid, "kind": "stylespace", "objective": {"type": "mean_color", "target": [0.3, 0.0, -0.3]}, "iterations": 25});
    let (status, job) = call(&app, "POST", "/adapt", recipe).await?;
    println!("/adapt -> {status}, {}", job["job_id"]);
    let uri = format!("/jobs/{}", job["job_id"].as_str().unwrap_or_default());
    loop {
        let (_, s) = call(&app, "GET", &uri, Value::Null).await?;
        if s["state"] == "done" || s["state"] == "failed" {
            println!("job finished: {s}");
            break;
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
    let (_, entries) = call(&app, "GET", "/registry", Value::Null).await?;
    println!("registry holds {} entries", entries.as_array().map_or(0, Vec::len));
    Ok(())
}
