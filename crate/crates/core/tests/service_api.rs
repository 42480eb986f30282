//! HTTP endpoints, error codes and agreement with the command line.

mod common;

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use base64::Engine;
use clap::Parser;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use common::*;
use styledomain::checkpoint;
use styledomain::cli::{run, Cli};
use styledomain::service::{router, AppState, JobState, JobStatus, MorphResponse, JOB_QUEUE_CAPACITY};

struct Fixture {
    dir: tempfile::TempDir,
    state: Arc<AppState>,
    app: axum::Router,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let state = AppState::start(dir.path().join("registry")).unwrap();
        let app = router(state.clone());
        Self { dir, state, app }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    async fn call(&self, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
        let req = Request::builder()
            .method(method)
            .uri(uri)
            .header("content-type", "application/json")
            .body(body.map_or_else(Body::empty, |b| Body::from(b.to_string())))
            .unwrap();
        let resp = self.app.clone().oneshot(req).await.unwrap();
        let status = resp.status();
        (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
    }

    async fn register(&self, kind: &str, path: &Path) -> (StatusCode, String) {
        let (s, body) = self.call("POST", "/register", Some(json!({"kind": kind, "path": path}))).await;
        let id = serde_json::from_slice::<Value>(&body)
            .ok()
            .and_then(|v| v["id"].as_str().map(str::to_string))
            .unwrap_or_default();
        (s, id)
    }

    /// Saves and registers a generator and a direction for `arch`.
    async fn assets(&self, arch: &str, tag: &str) -> (String, String) {
        let (desc, gen) = toy(arch, 0);
        let gen_path = self.path(&format!("{tag}.sdck"));
        checkpoint::save(&gen, &gen_path).unwrap();
        let dir_path = self.path(&format!("{tag}.sdir"));
        random_direction(&desc, Some(8), 3, 0.5).save(&dir_path).unwrap();
        let (s1, g) = self.register("generator", &gen_path).await;
        let (s2, d) = self.register("direction", &dir_path).await;
        assert_eq!((s1, s2), (StatusCode::CREATED, StatusCode::CREATED));
        (g, d)
    }

    async fn wait_for(&self, job: &str) -> JobStatus {
        let start = Instant::now();
        loop {
            let (s, body) = self.call("GET", &format!("/jobs/{job}"), None).await;
            assert_eq!(s, StatusCode::OK);
            let status: JobStatus = serde_json::from_slice(&body).unwrap();
            if status.state.is_terminal() {
                return status;
            }
            assert!(start.elapsed() < Duration::from_secs(120), "job {job} did not finish");
            tokio::time::sleep(Duration::from_millis(20)).await;
        }
    }
}

fn cli(args: &[&str]) -> String {
    let mut out = Vec::new();
    run(Cli::try_parse_from(args).unwrap(), &mut out).unwrap();
    String::from_utf8(out).unwrap()
}

#[tokio::test]
async fn health_and_unknown_ids() {
    let f = Fixture::new();
    let (s, body) = f.call("GET", "/healthz", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(serde_json::from_slice::<Value>(&body).unwrap()["status"], "ok");

    assert_eq!(f.call("GET", "/jobs/job-99", None).await.0, StatusCode::NOT_FOUND);
    let (s, _) = f.call("POST", "/generate", Some(json!({"generator_id": "gen-7", "seeds": [0]}))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (g, _) = f.assets("toy8", "a").await;
    let req = json!({"generator_id": g, "directions": [{"id": "dir-42", "coeff": 1.0}], "seeds": [0]});
    assert_eq!(f.call("POST", "/generate", Some(req)).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn fingerprint_conflicts() {
    let f = Fixture::new();
    // A direction needs a registered generator of the same architecture.
    let (desc32, _) = toy("toy32", 0);
    let orphan = f.path("orphan.sdir");
    random_direction(&desc32, None, 1, 0.1).save(&orphan).unwrap();
    assert_eq!(f.register("direction", &orphan).await.0, StatusCode::CONFLICT);

    let (g8, _) = f.assets("toy8", "a").await;
    let (_, d32) = f.assets("toy32", "b").await;
    let req = json!({"generator_id": g8, "directions": [{"id": d32, "coeff": 1.0}], "seeds": [0]});
    assert_eq!(f.call("POST", "/generate", Some(req)).await.0, StatusCode::CONFLICT);
}

#[tokio::test]
async fn malformed_requests_are_unprocessable() {
    let f = Fixture::new();
    let (g, d) = f.assets("toy8", "a").await;
    let bad_coeff = json!({"generator_id": g, "directions": [{"id": d, "coeff": "lots"}], "seeds": [0]});
    assert_eq!(f.call("POST", "/generate", Some(bad_coeff)).await.0, StatusCode::UNPROCESSABLE_ENTITY);
    let no_seeds = json!({"generator_id": g, "seeds": []});
    assert_eq!(f.call("POST", "/generate", Some(no_seeds)).await.0, StatusCode::UNPROCESSABLE_ENTITY);
    let empty_mix = json!({"directions": []});
    assert_eq!(f.call("POST", "/mix", Some(empty_mix)).await.0, StatusCode::UNPROCESSABLE_ENTITY);
    let bad_recipe = json!({"generator_id": g, "kind": "stylespace", "objective": {"type": "mean_color", "target": [0, 0, 0]}, "learning_rate": -1.0});
    assert_eq!(f.call("POST", "/adapt", Some(bad_recipe)).await.0, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn empty_direction_list_renders_the_base_generator() {
    let f = Fixture::new();
    let (g, _) = f.assets("toy8", "a").await;
    let (_, gen) = toy("toy8", 0);
    let (s, body) = f.call("POST", "/generate", Some(json!({"generator_id": g, "seeds": [3]}))).await;
    assert_eq!(s, StatusCode::OK);
    let resp: Value = serde_json::from_slice(&body).unwrap();
    let png = base64::engine::general_purpose::STANDARD
        .decode(resp["images"][0]["png_base64"].as_str().unwrap())
        .unwrap();
    let base = gen.generate(&styledomain::arch::sample_latent(3, 16), &Default::default()).unwrap();
    assert_eq!(png, styledomain::image_io::encode_png(&base).unwrap());
}

#[tokio::test]
async fn zero_iteration_adaptation_yields_a_zero_direction() {
    let f = Fixture::new();
    let (g, _) = f.assets("toy8", "a").await;
    let before = std::fs::read_dir(f.path("registry/blobs")).unwrap().count();
    let req = json!({"generator_id": g, "kind": "stylespace+8", "objective": {"type": "mean_color", "target": [0.1, 0.2, 0.3]}, "iterations": 0});
    let (s, body) = f.call("POST", "/adapt", Some(req)).await;
    assert_eq!(s, StatusCode::ACCEPTED);
    let queued: JobStatus = serde_json::from_slice(&body).unwrap();
    let done = f.wait_for(&queued.job_id).await;
    assert_eq!(done.state, JobState::Done, "{:?}", done.error);
    let dir = f.state.registry().direction(done.result_id.as_deref().unwrap()).unwrap();
    assert!(dir.flatten().iter().all(|&v| v == 0.0));
    // The output is a new entry; existing blobs are untouched.
    assert_eq!(std::fs::read_dir(f.path("registry/blobs")).unwrap().count(), before + 1);
}

#[tokio::test]
async fn full_adaptation_queue_is_rejected() {
    let f = Fixture::new();
    let (g, _) = f.assets("toy8", "a").await;
    let req = json!({"generator_id": g, "kind": "stylespace", "objective": {"type": "mean_color", "target": [0.1, 0.2, 0.3]}, "iterations": 150});
    let mut codes = Vec::new();
    for _ in 0..JOB_QUEUE_CAPACITY + 2 {
        codes.push(f.call("POST", "/adapt", Some(req.clone())).await.0);
    }
    assert_eq!(codes[0], StatusCode::ACCEPTED);
    assert!(codes.contains(&StatusCode::TOO_MANY_REQUESTS), "{codes:?}");
    assert!(codes.iter().filter(|&&c| c == StatusCode::ACCEPTED).count() >= JOB_QUEUE_CAPACITY);
}

#[tokio::test]
async fn cli_and_service_produce_identical_bytes() {
    let f = Fixture::new();
    let (g, d) = f.assets("toy8", "a").await;
    let grid = f.path("grid.png");
    let gen = f.path("a.sdck");
    let dir = f.path("a.sdir");
    cli(&[
        "styledomain", "dir", "apply", "--gen", gen.to_str().unwrap(), "--dir", dir.to_str().unwrap(),
        "--seeds", "0..5", "--psi", "0.7", "--grid", grid.to_str().unwrap(),
    ]);
    let req = json!({"generator_id": g, "directions": [{"id": d, "coeff": 1.0}], "seeds": [0, 1, 2, 3, 4, 5], "psi": 0.7, "format": "grid"});
    let (s, body) = f.call("POST", "/generate", Some(req)).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(body, std::fs::read(&grid).unwrap());

    // A morph plan file rendered by the CLI matches /morph on registered ids.
    let (desc, _) = toy("toy8", 0);
    let other = f.path("b.sdir");
    random_direction(&desc, None, 4, 0.5).save(&other).unwrap();
    let (_, d2) = f.register("direction", &other).await;
    let stages = json!([
        {"kind": "direction_ramp", "generator": "G", "direction": "A"},
        {"kind": "direction_crossfade", "generator": "G", "from": "A", "to": "B"}
    ]);
    let plan = json!({"frames_per_stage": 3, "stages": stages, "generators": {"G": "a.sdck"}, "directions": {"A": "a.sdir", "B": "b.sdir"}});
    let plan_path = f.path("plan.json");
    std::fs::write(&plan_path, plan.to_string()).unwrap();
    let frames_dir = f.path("frames");
    cli(&["styledomain", "morph", "--plan", plan_path.to_str().unwrap(), "--out", frames_dir.to_str().unwrap(), "--seed", "2"]);

    let by_id = stages.to_string().replace("\"G\"", &format!("\"{g}\"")).replace("\"A\"", &format!("\"{d}\"")).replace("\"B\"", &format!("\"{d2}\""));
    let req = json!({"plan": {"frames_per_stage": 3, "stages": serde_json::from_str::<Value>(&by_id).unwrap()}, "seed": 2});
    let (s, body) = f.call("POST", "/morph", Some(req)).await;
    assert_eq!(s, StatusCode::OK);
    let resp: MorphResponse = serde_json::from_slice(&body).unwrap();
    assert_eq!(resp.frames.len(), 6);
    for (i, frame) in resp.frames.iter().enumerate() {
        let png = std::fs::read(frames_dir.join(format!("frame_{i:05}.png"))).unwrap();
        let api = base64::engine::general_purpose::STANDARD.decode(&frame.png_base64).unwrap();
        assert_eq!(png, api, "frame {i}");
    }
}

#[test]
fn adaptation_through_the_cli_writes_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let gen = dir.path().join("p.sdck");
    let out = dir.path().join("tint.sdir");
    cli(&["styledomain", "init", "--arch", "toy8", "--seed", "1", "--out", gen.to_str().unwrap()]);
    let printed = cli(&[
        "styledomain", "adapt", "--gen", gen.to_str().unwrap(), "--space", "stylespace", "--loss", "mean_color",
        "--color", "0.2,0.1,-0.1", "--iterations", "20", "--out", out.to_str().unwrap(),
    ]);
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("tint.sdir.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest, serde_json::from_str::<Value>(&printed).unwrap());
    assert_eq!(manifest["recipe"]["iterations"], 20);
    let desc = styledomain::arch::ArchitectureDescriptor::preset("toy8").unwrap();
    let d = styledomain::directions::StyleDomainDirection::load_for(&out, &desc).unwrap();
    assert!(d.flatten().iter().any(|&v| v != 0.0));
}
