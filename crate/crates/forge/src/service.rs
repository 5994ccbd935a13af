//! HTTP service over prepared scenes.
//!
//! | route | response |
//! |---|---|
//! | `GET /scenes/{id}/lights` | light panel JSON |
//! | `POST /scenes/{id}/relight[?distill=true]` | `200 {frame_set}` or `202 {job}` |
//! | `GET /frames/{id}/{k}.png` | tone-mapped frame |
//! | `GET /scenes/{id}/novel-view?yaw&pitch&radius&lighting` | PNG render of a field |
//! | `GET /jobs/{id}` | `JobRecord` |

use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use forge_core::olat::{LightingSpec, OlatError};
use forge_core::scene::LightKind;
use serde::{Deserialize, Serialize};
use serde_json::json;
use serde_path_to_error::Segment;

use crate::jobs::{now_ms, JobRecord, Stage};
use crate::pipeline::{distill_frame_set, load_field, relight, render_views, write_condition, PreparedScene};
use crate::store::{valid_id, write_json, DataRoot, FrameSetManifest};

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
    pub path: Option<String>,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
            path: None,
        }
    }

    fn not_found(what: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, what)
    }

    fn unprocessable(message: impl Into<String>, path: Option<String>) -> Self {
        Self {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            message: message.into(),
            path,
        }
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.message });
        if let Some(p) = self.path {
            body["path"] = json!(p);
        }
        (self.status, Json(body)).into_response()
    }
}

fn spec_error(e: OlatError) -> ApiError {
    match e {
        OlatError::InvalidSpec { path, message } => ApiError::unprocessable(message, Some(path)),
        OlatError::UnknownLight(id) => {
            ApiError::unprocessable(format!("scene has no light {id}"), Some(format!("lights/{id}")))
        }
        OlatError::AllOff => ApiError::unprocessable(e.to_string(), Some("lights".into())),
        other => ApiError::unprocessable(other.to_string(), None),
    }
}

/// Parses and validates a LightingSpec body; the error carries the path of
/// the offending field.
pub fn parse_spec(body: &[u8]) -> Result<LightingSpec, ApiError> {
    let de = &mut serde_json::Deserializer::from_slice(body);
    let spec: LightingSpec = serde_path_to_error::deserialize(de).map_err(|e| {
        let path: Vec<String> = e
            .path()
            .iter()
            .filter_map(|seg| match seg {
                Segment::Seq { index } => Some(index.to_string()),
                Segment::Map { key } => Some(key.clone()),
                Segment::Enum { variant } => Some(variant.clone()),
                Segment::Unknown => None,
            })
            .collect();
        ApiError::unprocessable(e.inner().to_string(), Some(path.join("/")))
    })?;
    spec.validate().map_err(spec_error)?;
    Ok(spec)
}

pub struct AppState {
    root: DataRoot,
    scenes: Mutex<HashMap<String, Arc<PreparedScene>>>,
    jobs: Mutex<HashMap<String, JobRecord>>,
    distilling: Mutex<HashSet<String>>,
    counter: AtomicU64,
}

impl AppState {
    pub fn new(root: DataRoot) -> Arc<Self> {
        Arc::new(Self {
            root,
            scenes: Mutex::default(),
            jobs: Mutex::default(),
            distilling: Mutex::default(),
            counter: AtomicU64::new(0),
        })
    }

    async fn scene(self: &Arc<Self>, id: &str) -> Result<Arc<PreparedScene>, ApiError> {
        if !valid_id(id) || !self.root.scene_dir(id).join("meta.json").exists() {
            return Err(ApiError::not_found(format!("unknown scene {id}")));
        }
        if let Some(s) = self.scenes.lock().unwrap().get(id) {
            return Ok(s.clone());
        }
        let (me, key) = (self.clone(), id.to_string());
        let loaded = tokio::task::spawn_blocking(move || PreparedScene::load(&me.root, &key))
            .await
            .map_err(ApiError::internal)?
            .map_err(ApiError::internal)?;
        let loaded = Arc::new(loaded);
        Ok(self.scenes.lock().unwrap().entry(id.to_string()).or_insert(loaded).clone())
    }

    fn save_job(&self, job: &JobRecord) {
        self.jobs.lock().unwrap().insert(job.id.clone(), job.clone());
        let _ = write_json(&self.root.job_path(&job.id), job);
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/scenes/{id}/lights", get(lights))
        .route("/scenes/{id}/relight", post(relight_handler))
        .route("/scenes/{id}/novel-view", get(novel_view))
        .route("/frames/{id}/{file}", get(frame))
        .route("/jobs/{id}", get(job))
        .with_state(state)
}

#[derive(Serialize)]
struct LightInfo {
    id: u32,
    kind: &'static str,
    position: [f64; 3],
    intensity: f64,
}

async fn lights(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<serde_json::Value>, ApiError> {
    let s = state.scene(&id).await?;
    let lights: Vec<LightInfo> = s
        .scene
        .lights
        .iter()
        .map(|l| LightInfo {
            id: l.id,
            kind: match l.kind {
                LightKind::Point { .. } => "point",
                LightKind::Rect { .. } => "rect",
            },
            position: l.position().to_array(),
            intensity: l.intensity,
        })
        .collect();
    Ok(Json(json!({
        "scene": id,
        "lights": lights,
        "sun": s.scene.sun,
        "input_lighting": s.meta.input_lighting,
        "input_frames": s.meta.input_frames,
        "frames": s.meta.training.len(),
        "resolution": s.meta.resolution,
    })))
}

#[derive(Debug, Default, Deserialize)]
struct RelightQuery {
    #[serde(default)]
    distill: bool,
}

async fn relight_handler(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<RelightQuery>,
    body: Bytes,
) -> Result<Response, ApiError> {
    let scene = state.scene(&id).await?;
    let spec = parse_spec(&body)?;
    scene.check_spec(&spec).map_err(spec_error)?;
    if !q.distill {
        let (st, sc) = (state.clone(), scene.clone());
        let manifest = tokio::task::spawn_blocking(move || relight(&st.root, &sc, &spec))
            .await
            .map_err(ApiError::internal)?
            .map_err(ApiError::internal)?;
        return Ok((StatusCode::OK, Json(frame_set_body(&manifest))).into_response());
    }
    if !state.distilling.lock().unwrap().insert(id.clone()) {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            format!("a distillation job is already running for scene {id}"),
        ));
    }
    let job_id = format!("{id}-{}-{}", now_ms(), state.counter.fetch_add(1, Ordering::Relaxed));
    let job = JobRecord::new(&job_id, &id);
    state.save_job(&job);
    let st = state.clone();
    std::thread::spawn(move || {
        let mut job = job;
        if let Err(e) = run_distill_job(&st, &scene, &spec, &mut job) {
            let _ = job.fail(format!("{e:#}"));
            st.save_job(&job);
        }
        st.distilling.lock().unwrap().remove(&job.scene);
    });
    Ok((StatusCode::ACCEPTED, Json(json!({ "job": job_id }))).into_response())
}

fn frame_set_body(m: &FrameSetManifest) -> serde_json::Value {
    json!({
        "frame_set": m.id,
        "frames": m.frames,
        "urls": m.frames.iter().map(|k| format!("/frames/{}/{k}.png", m.id)).collect::<Vec<_>>(),
    })
}

fn run_distill_job(state: &AppState, scene: &PreparedScene, spec: &LightingSpec, job: &mut JobRecord) -> anyhow::Result<()> {
    job.advance(Stage::Composite)?;
    state.save_job(job);
    let manifest = relight(&state.root, scene, spec)?;
    job.artifacts.insert("frame_set".into(), manifest.id.clone());
    job.advance(Stage::Condition)?;
    state.save_job(job);
    write_condition(&state.root, scene, &manifest)?;
    job.artifacts
        .insert("condition".into(), format!("framesets/{}/condition", manifest.id));
    job.advance(Stage::Distill)?;
    state.save_job(job);
    let (_, log) = distill_frame_set(&state.root, scene, &manifest.id, &scene.meta.distill)?;
    job.artifacts.insert("field".into(), format!("framesets/{}/field.vxf", manifest.id));
    if let Some(l) = log.loss.last() {
        job.artifacts.insert("final_loss".into(), format!("{l:e}"));
    }
    job.advance(Stage::Done)?;
    state.save_job(job);
    Ok(())
}

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

async fn frame(State(state): State<Arc<AppState>>, Path((id, file)): Path<(String, String)>) -> Result<Response, ApiError> {
    let missing = || ApiError::not_found(format!("unknown frame {id}/{file}"));
    let k = file.strip_suffix(".png").ok_or_else(missing)?;
    if !valid_id(&id) || k.is_empty() || !k.bytes().all(|b| b.is_ascii_digit()) {
        return Err(missing());
    }
    let dir = state.root.frame_set_dir(&id);
    if !dir.join("manifest.json").exists() {
        return Err(missing());
    }
    let bytes = tokio::fs::read(dir.join(format!("{}.png", k.parse::<usize>().map_err(|_| missing())?)))
        .await
        .map_err(|_| missing())?;
    Ok(png(bytes))
}

#[derive(Debug, Deserialize)]
struct NovelQuery {
    #[serde(default)]
    yaw: f64,
    #[serde(default)]
    pitch: f64,
    radius: Option<f64>,
    lighting: Option<String>,
}

async fn novel_view(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<NovelQuery>,
) -> Result<Response, ApiError> {
    let scene = state.scene(&id).await?;
    let radius = q.radius.unwrap_or_else(|| {
        scene
            .rig
            .ellipse
            .map(|e| 0.5 * (e.semi_axis_a + e.semi_axis_b))
            .unwrap_or(0.0)
    });
    let camera = scene
        .orbit_camera(q.yaw, q.pitch, radius)
        .map_err(|e| ApiError::unprocessable(e.to_string(), None))?;
    let field_path = match &q.lighting {
        None => state.root.scene_dir(&id).join("field.vxf"),
        Some(fs) => {
            let unknown = || ApiError::not_found(format!("no distilled field for lighting {fs}"));
            if !valid_id(fs) {
                return Err(unknown());
            }
            let dir = state.root.frame_set_dir(fs);
            let manifest: FrameSetManifest = crate::store::read_json(&dir.join("manifest.json")).map_err(|_| unknown())?;
            if manifest.scene != id || manifest.field.is_none() {
                return Err(unknown());
            }
            dir.join("field.vxf")
        }
    };
    let render = scene.meta.render;
    let bytes = tokio::task::spawn_blocking(move || -> anyhow::Result<Vec<u8>> {
        let field = load_field(&field_path)?;
        Ok(render_views(&field, &[camera], &render)?.remove(0).to_png())
    })
    .await
    .map_err(ApiError::internal)?
    .map_err(ApiError::internal)?;
    Ok(png(bytes))
}

async fn job(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<JobRecord>, ApiError> {
    let missing = || ApiError::not_found(format!("unknown job {id}"));
    if let Some(j) = state.jobs.lock().unwrap().get(&id) {
        return Ok(Json(j.clone()));
    }
    if !valid_id(&id) {
        return Err(missing());
    }
    crate::store::read_json(&state.root.job_path(&id)).map(Json).map_err(|_| missing())
}

pub async fn serve(root: DataRoot, port: u16) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(("0.0.0.0", port)).await?;
    eprintln!("serving {} on http://{}", root.path().display(), listener.local_addr()?);
    axum::serve(listener, router(AppState::new(root))).await?;
    Ok(())
}
