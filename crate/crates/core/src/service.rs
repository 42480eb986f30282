//! HTTP service over an on-disk registry of generators, directions and
//! adaptation jobs.
//!
//! The registry directory holds `index.jsonl`, an append-only log with one
//! [`RegistryEntry`] per line, and `blobs/<id>.sdck` / `blobs/<id>.sdir`
//! artifact files. Entries are never rewritten; every endpoint that
//! produces something registers a new entry.
//!
//! | method | path         | body                    | result                          |
//! |--------|--------------|-------------------------|---------------------------------|
//! | GET    | `/healthz`   |                         | `{"status": "ok"}`              |
//! | GET    | `/registry`  |                         | list of entries                 |
//! | POST   | `/register`  | [`RegisterRequest`]     | 201 + entry                     |
//! | POST   | `/generate`  | [`GenerateRequest`]     | images (JSON or grid PNG)       |
//! | POST   | `/mix`       | [`MixRequest`]          | 201 + new direction entry       |
//! | POST   | `/morph`     | [`MorphRequest`]        | frame archive (JSON)            |
//! | POST   | `/adapt`     | [`AdaptRequest`]        | 202 + [`JobStatus`]             |
//! | GET    | `/jobs/{id}` |                         | [`JobStatus`]                   |
//!
//! Image responses carry an `X-Content-Hash` header. Unknown ids give 404,
//! fingerprint conflicts 409, invalid parameters 422 and a full adaptation
//! queue 429.

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::mpsc::{sync_channel, Receiver, SyncSender, TrySendError};
use std::sync::{Arc, Mutex, RwLock, Weak};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::{Path as UrlPath, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::apps::{render_morph, MorphAssets, MorphPlan};
use crate::arch::{sample_latent, GeneratorWeights, SamplerConfig};
use crate::checkpoint;
use crate::directions::{mix, render_seeds, StyleDomainDirection};
use crate::error::{Error, Result};
use crate::image_io::{content_hash, encode_png, grid};
use crate::losses::BackendRegistry;
use crate::recipe::AdaptRecipe;
use crate::tensor::Image;

pub const INDEX_FILE: &str = "index.jsonl";
pub const BLOB_DIR: &str = "blobs";
/// Pending adaptation jobs beyond the one running.
pub const JOB_QUEUE_CAPACITY: usize = 4;
pub const MAX_SEEDS: usize = 64;
/// Columns of grid outputs, shared with the command line.
pub const GRID_COLUMNS: usize = 4;
pub const CONTENT_HASH_HEADER: &str = "x-content-hash";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    Generator,
    Direction,
    AdaptationJob,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub id: String,
    pub kind: EntryKind,
    /// Blob path relative to the registry root; absent for job records.
    pub path: Option<String>,
    pub fingerprint: String,
    pub metadata: Value,
    /// Seconds since the Unix epoch.
    pub created_at: u64,
}

/// Artifact index backed by `index.jsonl`.
pub struct Registry {
    root: PathBuf,
    entries: Vec<RegistryEntry>,
    generators: HashMap<String, Arc<GeneratorWeights>>,
    directions: HashMap<String, Arc<StyleDomainDirection>>,
    next_id: u64,
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl Registry {
    /// Opens (or creates) a registry, loading and re-validating every blob.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(root.join(BLOB_DIR))?;
        let mut reg = Self {
            root,
            entries: Vec::new(),
            generators: HashMap::new(),
            directions: HashMap::new(),
            next_id: 1,
        };
        let index = reg.root.join(INDEX_FILE);
        if !index.exists() {
            return Ok(reg);
        }
        for line in BufReader::new(fs::File::open(&index)?).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: RegistryEntry = serde_json::from_str(&line)?;
            let blob = entry.path.as_ref().map(|p| reg.root.join(p));
            match (entry.kind, blob) {
                (EntryKind::Generator, Some(path)) => {
                    let w = checkpoint::load(path)?;
                    check_fp(&entry.fingerprint, w.fingerprint())?;
                    reg.generators.insert(entry.id.clone(), Arc::new(w));
                }
                (EntryKind::Direction, Some(path)) => {
                    let d = StyleDomainDirection::load(path)?;
                    check_fp(&entry.fingerprint, &d.fingerprint)?;
                    if let Some(g) = reg.generators.values().find(|g| g.fingerprint() == d.fingerprint) {
                        d.check(g.descriptor())?;
                    }
                    reg.directions.insert(entry.id.clone(), Arc::new(d));
                }
                (EntryKind::AdaptationJob, _) => {}
                (_, None) => return Err(Error::Format(format!("entry {} has no blob", entry.id))),
            }
            if let Some(n) = entry.id.rsplit('-').next().and_then(|n| n.parse::<u64>().ok()) {
                reg.next_id = reg.next_id.max(n + 1);
            }
            reg.entries.push(entry);
        }
        Ok(reg)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn entries(&self) -> &[RegistryEntry] {
        &self.entries
    }

    pub fn entry(&self, id: &str) -> Option<&RegistryEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn generator(&self, id: &str) -> Option<Arc<GeneratorWeights>> {
        self.generators.get(id).cloned()
    }

    pub fn direction(&self, id: &str) -> Option<Arc<StyleDomainDirection>> {
        self.directions.get(id).cloned()
    }

    /// Reserves a fresh `<prefix>-<n>` id.
    pub fn allocate_id(&mut self, prefix: &str) -> String {
        let id = format!("{prefix}-{}", self.next_id);
        self.next_id += 1;
        id
    }

    fn append(&mut self, entry: RegistryEntry) -> Result<RegistryEntry> {
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.root.join(INDEX_FILE))?;
        let mut line = serde_json::to_string(&entry)?;
        line.push('\n');
        file.write_all(line.as_bytes())?;
        file.sync_data()?;
        self.entries.push(entry.clone());
        Ok(entry)
    }

    fn write_blob(&self, name: &str, bytes: &[u8]) -> Result<String> {
        let rel = format!("{BLOB_DIR}/{name}");
        let tmp = self.root.join(format!("{rel}.tmp"));
        fs::write(&tmp, bytes)?;
        fs::rename(&tmp, self.root.join(&rel))?;
        Ok(rel)
    }

    pub fn add_generator(&mut self, weights: GeneratorWeights, metadata: Value) -> Result<RegistryEntry> {
        let id = self.allocate_id("gen");
        let path = self.write_blob(&format!("{id}.sdck"), &checkpoint::to_bytes(&weights)?)?;
        let entry = RegistryEntry {
            id: id.clone(),
            kind: EntryKind::Generator,
            path: Some(path),
            fingerprint: weights.fingerprint().to_string(),
            metadata,
            created_at: now(),
        };
        let entry = self.append(entry)?;
        self.generators.insert(id, Arc::new(weights));
        Ok(entry)
    }

    /// Registers a direction; a generator with the same fingerprint must
    /// already be registered.
    pub fn add_direction(&mut self, dir: StyleDomainDirection, metadata: Value) -> Result<RegistryEntry> {
        let gen = self
            .generators
            .values()
            .find(|g| g.fingerprint() == dir.fingerprint)
            .ok_or_else(|| Error::Fingerprint {
                expected: "a registered generator fingerprint".into(),
                found: dir.fingerprint.clone(),
            })?;
        dir.check(gen.descriptor())?;
        let id = self.allocate_id("dir");
        let path = self.write_blob(&format!("{id}.sdir"), &dir.to_bytes()?)?;
        let entry = RegistryEntry {
            id: id.clone(),
            kind: EntryKind::Direction,
            path: Some(path),
            fingerprint: dir.fingerprint.clone(),
            metadata,
            created_at: now(),
        };
        let entry = self.append(entry)?;
        self.directions.insert(id, Arc::new(dir));
        Ok(entry)
    }

    /// Records the terminal status of a job.
    pub fn add_job_record(&mut self, status: &JobStatus, fingerprint: &str) -> Result<RegistryEntry> {
        self.append(RegistryEntry {
            id: status.job_id.clone(),
            kind: EntryKind::AdaptationJob,
            path: None,
            fingerprint: fingerprint.to_string(),
            metadata: serde_json::to_value(status)?,
            created_at: now(),
        })
    }
}

fn check_fp(expected: &str, found: &str) -> Result<()> {
    if expected != found {
        return Err(Error::Fingerprint {
            expected: expected.into(),
            found: found.into(),
        });
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Done | JobState::Failed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobProgress {
    pub done: usize,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobStatus {
    pub job_id: String,
    pub state: JobState,
    pub progress: JobProgress,
    pub result_id: Option<String>,
    pub error: Option<String>,
}

struct Job {
    id: String,
    generator_id: String,
    recipe: AdaptRecipe,
}

/// Shared state of a running service.
pub struct AppState {
    registry: RwLock<Registry>,
    jobs: Mutex<HashMap<String, JobStatus>>,
    queue: SyncSender<Job>,
    backends: BackendRegistry,
}

impl AppState {
    /// Opens the registry at `root` and starts the adaptation worker.
    pub fn start(root: impl Into<PathBuf>) -> Result<Arc<Self>> {
        let registry = Registry::open(root)?;
        let (tx, rx) = sync_channel(JOB_QUEUE_CAPACITY);
        let state = Arc::new(Self {
            registry: RwLock::new(registry),
            jobs: Mutex::new(HashMap::new()),
            queue: tx,
            backends: BackendRegistry::with_stubs(),
        });
        let weak = Arc::downgrade(&state);
        std::thread::Builder::new()
            .name("adapt-worker".into())
            .spawn(move || worker(weak, rx))?;
        Ok(state)
    }

    pub fn registry(&self) -> std::sync::RwLockReadGuard<'_, Registry> {
        self.registry.read().unwrap_or_else(|e| e.into_inner())
    }

    fn registry_mut(&self) -> std::sync::RwLockWriteGuard<'_, Registry> {
        self.registry.write().unwrap_or_else(|e| e.into_inner())
    }

    fn jobs(&self) -> std::sync::MutexGuard<'_, HashMap<String, JobStatus>> {
        self.jobs.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Applies `f` to a job unless it already reached a terminal state.
    fn update_job(&self, id: &str, f: impl FnOnce(&mut JobStatus)) -> Option<JobStatus> {
        let mut jobs = self.jobs();
        let status = jobs.get_mut(id)?;
        if !status.state.is_terminal() {
            f(status);
        }
        Some(status.clone())
    }

    pub fn job(&self, id: &str) -> Option<JobStatus> {
        if let Some(s) = self.jobs().get(id) {
            return Some(s.clone());
        }
        let reg = self.registry();
        let entry = reg.entry(id).filter(|e| e.kind == EntryKind::AdaptationJob)?;
        serde_json::from_value(entry.metadata.clone()).ok()
    }
}

fn worker(state: Weak<AppState>, rx: Receiver<Job>) {
    while let Ok(job) = rx.recv() {
        let Some(state) = state.upgrade() else {
            break;
        };
        run_job(&state, job);
    }
}

fn run_job(state: &AppState, job: Job) {
    state.update_job(&job.id, |s| s.state = JobState::Running);
    let (parent, root) = {
        let reg = state.registry();
        (reg.generator(&job.generator_id), reg.root().to_path_buf())
    };
    let outcome = parent
        .ok_or_else(|| Error::Invalid(format!("generator {} disappeared", job.generator_id)))
        .and_then(|parent| {
            let result = job.recipe.run(&parent, &state.backends, &root, |done, total| {
                state.update_job(&job.id, |s| s.progress = JobProgress { done, total });
                true
            })?;
            let meta = json!({
                "job_id": job.id,
                "parent_id": job.generator_id,
                "kind": job.recipe.kind.to_string(),
                "label": job.recipe.label(),
                "iterations": result.hyperparams.iterations,
                "final_loss": result.loss_trace.last(),
            });
            let entry = match &result.direction {
                Some(dir) => state.registry_mut().add_direction(dir.clone(), meta)?,
                None => {
                    let child = result.child(&parent)?;
                    state.registry_mut().add_generator(child, meta)?
                }
            };
            Ok((entry.id, parent.fingerprint().to_string()))
        });
    let status = match outcome {
        Ok((result_id, fp)) => {
            let s = state.update_job(&job.id, |s| {
                s.state = JobState::Done;
                s.progress.done = s.progress.total;
                s.result_id = Some(result_id);
            });
            s.map(|s| (s, fp))
        }
        Err(e) => state
            .update_job(&job.id, |s| {
                s.state = JobState::Failed;
                s.error = Some(e.to_string());
            })
            .map(|s| (s, String::new())),
    };
    if let Some((status, fp)) = status {
        if let Err(e) = state.registry_mut().add_job_record(&status, &fp) {
            log::error!("could not record job {}: {e}", status.job_id);
        }
    }
}

/// JSON error body with an HTTP status.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn not_found(what: &str, id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("unknown {what} '{id}'"))
    }

    fn unprocessable(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, message)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Fingerprint { .. } => StatusCode::CONFLICT,
            Error::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::UNPROCESSABLE_ENTITY,
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionTerm {
    pub id: String,
    pub coeff: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    /// `{"images": [...], "content_hash": ...}` with base64 PNGs.
    #[default]
    Json,
    /// A single PNG grid with [`GRID_COLUMNS`] columns.
    Grid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub generator_id: String,
    #[serde(default)]
    pub directions: Vec<DirectionTerm>,
    #[serde(default = "one")]
    pub strength: f64,
    pub seeds: Vec<u64>,
    #[serde(default = "one")]
    pub psi: f64,
    #[serde(default)]
    pub format: OutputFormat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncodedImage {
    pub seed: u64,
    pub content_hash: String,
    pub png_base64: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub images: Vec<EncodedImage>,
    /// SHA-256 over the concatenated PNG bytes.
    pub content_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixRequest {
    pub directions: Vec<DirectionTerm>,
    #[serde(default)]
    pub label: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MorphRequest {
    /// Asset names in the plan are registry ids.
    pub plan: MorphPlan,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub psi: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MorphFrameOut {
    pub stage: usize,
    pub t: f64,
    pub content_hash: String,
    pub png_base64: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MorphResponse {
    pub frames: Vec<MorphFrameOut>,
    pub content_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptRequest {
    pub generator_id: String,
    #[serde(flatten)]
    pub recipe: AdaptRecipe,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegisterRequest {
    pub kind: EntryKind,
    /// Path of a `.sdck` or `.sdir` file readable by the service.
    pub path: PathBuf,
    #[serde(default)]
    pub metadata: Value,
}

fn b64(bytes: &[u8]) -> String {
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

fn with_hash(hash: &str, resp: impl IntoResponse) -> Response {
    let mut resp = resp.into_response();
    if let Ok(v) = HeaderValue::from_str(hash) {
        resp.headers_mut().insert(CONTENT_HASH_HEADER, v);
    }
    resp
}

fn resolve_mix(reg: &Registry, terms: &[DirectionTerm]) -> ApiResult<Option<StyleDomainDirection>> {
    if terms.is_empty() {
        return Ok(None);
    }
    let dirs = terms
        .iter()
        .map(|t| {
            if !t.coeff.is_finite() {
                return Err(ApiError::unprocessable(format!("coefficient {} is not finite", t.coeff)));
            }
            reg.direction(&t.id).ok_or_else(|| ApiError::not_found("direction", &t.id))
        })
        .collect::<ApiResult<Vec<_>>>()?;
    let weighted: Vec<(&StyleDomainDirection, f64)> =
        dirs.iter().zip(terms).map(|(d, t)| (d.as_ref(), t.coeff)).collect();
    Ok(Some(mix(&weighted)?))
}

/// Renders the images of a generate request; shared with the command line.
pub fn generate_images(
    weights: &GeneratorWeights,
    dir: Option<&StyleDomainDirection>,
    seeds: &[u64],
    strength: f64,
    psi: f64,
) -> Result<Vec<Image>> {
    if seeds.is_empty() || seeds.len() > MAX_SEEDS {
        return Err(Error::Invalid(format!("between 1 and {MAX_SEEDS} seeds required")));
    }
    if !strength.is_finite() {
        return Err(Error::Invalid(format!("strength {strength} is not finite")));
    }
    if let Some(d) = dir {
        d.check(weights.descriptor())?;
    }
    render_seeds(weights, dir, seeds, strength, &SamplerConfig::with_psi(psi))
}

/// PNG of the grid the command line and `/generate` with `format: grid` produce.
pub fn grid_png(images: &[Image]) -> Result<Vec<u8>> {
    encode_png(&grid(images, GRID_COLUMNS)?)
}

async fn healthz() -> Json<Value> {
    Json(json!({ "status": "ok" }))
}

async fn list_registry(State(state): State<Arc<AppState>>) -> Json<Vec<RegistryEntry>> {
    Json(state.registry().entries().to_vec())
}

async fn register(
    State(state): State<Arc<AppState>>,
    Json(req): Json<RegisterRequest>,
) -> ApiResult<(StatusCode, Json<RegistryEntry>)> {
    blocking(move || {
        let entry = match req.kind {
            EntryKind::Generator => {
                let w = checkpoint::load(&req.path)?;
                state.registry_mut().add_generator(w, req.metadata)?
            }
            EntryKind::Direction => {
                let d = StyleDomainDirection::load(&req.path)?;
                state.registry_mut().add_direction(d, req.metadata)?
            }
            EntryKind::AdaptationJob => {
                return Err(ApiError::unprocessable("jobs are created through /adapt"));
            }
        };
        Ok((StatusCode::CREATED, Json(entry)))
    })
    .await
}

async fn generate(State(state): State<Arc<AppState>>, Json(req): Json<GenerateRequest>) -> ApiResult<Response> {
    blocking(move || {
        let (weights, dir) = {
            let reg = state.registry();
            let weights = reg
                .generator(&req.generator_id)
                .ok_or_else(|| ApiError::not_found("generator", &req.generator_id))?;
            (weights, resolve_mix(&reg, &req.directions)?)
        };
        let images = generate_images(&weights, dir.as_ref(), &req.seeds, req.strength, req.psi)?;
        match req.format {
            OutputFormat::Grid => {
                let png = grid_png(&images)?;
                let hash = content_hash(&png);
                Ok(with_hash(&hash, ([(header::CONTENT_TYPE, "image/png")], png)))
            }
            OutputFormat::Json => {
                let pngs = images.iter().map(encode_png).collect::<Result<Vec<_>>>()?;
                let hash = content_hash(&pngs.concat());
                let images = req
                    .seeds
                    .iter()
                    .zip(&pngs)
                    .map(|(&seed, png)| EncodedImage {
                        seed,
                        content_hash: content_hash(png),
                        png_base64: b64(png),
                    })
                    .collect();
                Ok(with_hash(
                    &hash,
                    Json(GenerateResponse {
                        images,
                        content_hash: hash.clone(),
                    }),
                ))
            }
        }
    })
    .await
}

async fn mix_handler(
    State(state): State<Arc<AppState>>,
    Json(req): Json<MixRequest>,
) -> ApiResult<(StatusCode, Json<RegistryEntry>)> {
    blocking(move || {
        if req.directions.is_empty() {
            return Err(ApiError::unprocessable("mix needs at least one direction"));
        }
        let mut mixed = resolve_mix(&state.registry(), &req.directions)?.expect("non-empty terms");
        if let Some(label) = &req.label {
            mixed.domain_label = label.clone();
        }
        let meta = json!({ "mix": req.directions });
        let entry = state.registry_mut().add_direction(mixed, meta)?;
        Ok((StatusCode::CREATED, Json(entry)))
    })
    .await
}

async fn morph_handler(State(state): State<Arc<AppState>>, Json(req): Json<MorphRequest>) -> ApiResult<Response> {
    blocking(move || {
        let mut assets = MorphAssets::default();
        {
            let reg = state.registry();
            for stage in &req.plan.stages {
                for id in stage.generator_names() {
                    let g = reg.generator(id).ok_or_else(|| ApiError::not_found("generator", id))?;
                    assets.generators.insert(id.to_string(), (*g).clone());
                }
                for id in stage.direction_names() {
                    let d = reg.direction(id).ok_or_else(|| ApiError::not_found("direction", id))?;
                    assets.directions.insert(id.to_string(), (*d).clone());
                }
            }
        }
        let dim = assets
            .generators
            .values()
            .next()
            .map(|g| g.descriptor().latent_dim)
            .ok_or_else(|| ApiError::unprocessable("plan has no generators"))?;
        let frames = render_morph(
            &req.plan,
            &assets,
            &sample_latent(req.seed, dim),
            &SamplerConfig::with_psi(req.psi),
        )?;
        let mut all = Vec::new();
        let frames = frames
            .into_iter()
            .map(|f| {
                let png = encode_png(&f.image)?;
                all.extend_from_slice(&png);
                Ok(MorphFrameOut {
                    stage: f.stage,
                    t: f.t,
                    content_hash: content_hash(&png),
                    png_base64: b64(&png),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let hash = content_hash(&all);
        Ok(with_hash(
            &hash,
            Json(MorphResponse {
                frames,
                content_hash: hash.clone(),
            }),
        ))
    })
    .await
}

async fn adapt_handler(
    State(state): State<Arc<AppState>>,
    Json(req): Json<AdaptRequest>,
) -> ApiResult<(StatusCode, Json<JobStatus>)> {
    let hp = req.recipe.hyperparams()?;
    let id = {
        let mut reg = state.registry_mut();
        if reg.generator(&req.generator_id).is_none() {
            return Err(ApiError::not_found("generator", &req.generator_id));
        }
        reg.allocate_id("job")
    };
    let status = JobStatus {
        job_id: id.clone(),
        state: JobState::Queued,
        progress: JobProgress {
            done: 0,
            total: hp.iterations,
        },
        result_id: None,
        error: None,
    };
    state.jobs().insert(id.clone(), status.clone());
    let job = Job {
        id: id.clone(),
        generator_id: req.generator_id,
        recipe: req.recipe,
    };
    match state.queue.try_send(job) {
        Ok(()) => Ok((StatusCode::ACCEPTED, Json(status))),
        Err(e) => {
            state.jobs().remove(&id);
            Err(match e {
                TrySendError::Full(_) => ApiError::new(StatusCode::TOO_MANY_REQUESTS, "adaptation queue is full"),
                TrySendError::Disconnected(_) => {
                    ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "adaptation worker stopped")
                }
            })
        }
    }
}

async fn job_handler(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<JobStatus>> {
    state.job(&id).map(Json).ok_or_else(|| ApiError::not_found("job", &id))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/registry", get(list_registry))
        .route("/register", post(register))
        .route("/generate", post(generate))
        .route("/mix", post(mix_handler))
        .route("/morph", post(morph_handler))
        .route("/adapt", post(adapt_handler))
        .route("/jobs/{id}", get(job_handler))
        .with_state(state)
}

/// Serves the registry at `root` on `addr` until the process exits.
pub async fn serve(addr: SocketAddr, root: PathBuf) -> anyhow::Result<()> {
    let state = AppState::start(root)?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await?;
    Ok(())
}
