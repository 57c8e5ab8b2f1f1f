//! HTTP/JSON API backing the console.
//!
//! The model is loaded once and shared read-only; validation requests run
//! concurrently. One scene is kept in memory and at most one episode executes
//! on it at a time. Episodes run on the blocking pool; clients poll
//! `GET /api/episodes/{id}` and page through the recorded state frames.

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use demonstrate::config::{Config, PlannerKind};
use demonstrate::embedding::{CoverageGate, EmbeddingProvider};
use demonstrate::execute::{EpisodeResult, Pipeline};
use demonstrate::language::{make_planner, LearnedDesigner, PlanRequest, Planner, ScriptedPlanner};
use demonstrate::model::LearnedModel;
use demonstrate::sim::{spawn_scene, Layout, SceneState};
use demonstrate::Error;

#[derive(Clone, Debug, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
enum EpisodeEntry {
    Running { command: String },
    Done { result: Box<EpisodeResult> },
    Error { command: String, message: String },
}

struct SceneSlot {
    layout: Layout,
    seed: u64,
    state: SceneState,
}

pub struct AppState {
    cfg: Config,
    model: LearnedModel,
    embedder: Box<dyn EmbeddingProvider>,
    gate: CoverageGate,
    scene: Mutex<SceneSlot>,
    busy: AtomicBool,
    next_id: AtomicU64,
    episodes: Mutex<HashMap<u64, EpisodeEntry>>,
}

impl AppState {
    pub fn new(cfg: Config, model: LearnedModel, embedder: Box<dyn EmbeddingProvider>) -> demonstrate::Result<Self> {
        let gate = model.coverage_gate()?;
        let layout = cfg.demos.layout;
        let seed = cfg.benchmark.seed;
        let state = spawn_scene(layout, seed, &cfg.sim);
        Ok(Self {
            cfg,
            model,
            embedder,
            gate,
            scene: Mutex::new(SceneSlot { layout, seed, state }),
            busy: AtomicBool::new(false),
            next_id: AtomicU64::new(1),
            episodes: Mutex::new(HashMap::new()),
        })
    }
}

type Shared = Arc<AppState>;

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/api/command", post(command))
        .route("/api/episodes/{id}", get(episode))
        .route("/api/scene", get(scene))
        .route("/api/reset", post(reset))
        .route("/api/model", get(model_info))
        .route("/api/validate", get(validate_text))
        .with_state(state)
}

/// Bind and serve until Ctrl-C.
pub async fn serve(state: AppState, host: &str, port: u16) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind((host, port)).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(Arc::new(state)))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

fn err(status: StatusCode, message: impl std::fmt::Display) -> Response {
    (status, Json(json!({ "error": message.to_string() }))).into_response()
}

fn internal(e: impl std::fmt::Display) -> Response {
    err(StatusCode::INTERNAL_SERVER_ERROR, e)
}

/// Clears the busy flag however the episode task ends.
struct BusyGuard(Shared);

impl Drop for BusyGuard {
    fn drop(&mut self) {
        self.0.busy.store(false, Ordering::SeqCst);
    }
}

#[derive(Deserialize)]
struct CommandBody {
    text: String,
    planner: Option<String>,
    seed: Option<u64>,
}

fn pick_planner(cfg: &Config, name: Option<&str>) -> demonstrate::Result<Box<dyn Planner>> {
    let mut pc = cfg.planner.clone();
    if let Some(n) = name {
        pc.kind = n.parse::<PlannerKind>()?;
    }
    Ok(make_planner(&pc))
}

async fn command(State(st): State<Shared>, Json(body): Json<CommandBody>) -> Response {
    let text = body.text.trim().to_string();
    if text.is_empty() {
        return err(StatusCode::UNPROCESSABLE_ENTITY, "empty command");
    }
    let planner = match pick_planner(&st.cfg, body.planner.as_deref()) {
        Ok(p) => p,
        Err(e) => return err(StatusCode::UNPROCESSABLE_ENTITY, e),
    };
    if st.busy.swap(true, Ordering::SeqCst) {
        return err(StatusCode::CONFLICT, "an episode is already running");
    }
    let guard = BusyGuard(st.clone());

    let scene = {
        let mut slot = st.scene.lock().unwrap();
        if let Some(seed) = body.seed {
            slot.seed = seed;
            slot.state = spawn_scene(slot.layout, seed, &st.cfg.sim);
        }
        slot.state.clone()
    };
    // the rule-based planner is cheap and deterministic: reject commands it
    // has no rule for before starting an episode
    if planner.id() == ScriptedPlanner.id() {
        match ScriptedPlanner.plan(&PlanRequest::new(&text, &scene)) {
            Err(e @ (Error::NoRule(_) | Error::Parse { .. } | Error::Planner(_))) => {
                return err(StatusCode::UNPROCESSABLE_ENTITY, e);
            }
            Err(e) => return internal(e),
            Ok(_) => {}
        }
    }

    let id = st.next_id.fetch_add(1, Ordering::SeqCst);
    st.episodes
        .lock()
        .unwrap()
        .insert(id, EpisodeEntry::Running { command: text.clone() });
    let task_state = st.clone();
    tokio::task::spawn_blocking(move || {
        let _guard = guard;
        let st = task_state;
        let designer = LearnedDesigner {
            model: &st.model,
            embedder: st.embedder.as_ref(),
        };
        let pipe = Pipeline {
            planner: planner.as_ref(),
            designer: &designer,
            embedder: st.embedder.as_ref(),
            gate: &st.gate,
            sim: &st.cfg.sim,
            solver: &st.cfg.solver,
            validation: &st.cfg.validation,
            execution: &st.cfg.execution,
        };
        let entry = match pipe.run(&text, &scene) {
            Ok(result) => {
                st.scene.lock().unwrap().state = result.final_scene().clone();
                EpisodeEntry::Done {
                    result: Box::new(result),
                }
            }
            Err(e) => EpisodeEntry::Error {
                command: text,
                message: e.to_string(),
            },
        };
        st.episodes.lock().unwrap().insert(id, entry);
    });
    (StatusCode::ACCEPTED, Json(json!({ "episode_id": id }))).into_response()
}

#[derive(Deserialize)]
struct PageQuery {
    #[serde(default)]
    page: usize,
}

async fn episode(State(st): State<Shared>, Path(id): Path<u64>, Query(q): Query<PageQuery>) -> Response {
    let entry = match st.episodes.lock().unwrap().get(&id) {
        Some(e) => e.clone(),
        None => return err(StatusCode::NOT_FOUND, format!("no episode {id}")),
    };
    let size = st.cfg.server.frame_page;
    let body = match entry {
        EpisodeEntry::Running { command } => json!({
            "episode_id": id, "status": "running", "command": command,
        }),
        EpisodeEntry::Error { command, message } => json!({
            "episode_id": id, "status": "error", "command": command, "error": message,
        }),
        EpisodeEntry::Done { result } => {
            let total = result.frames.len();
            let pages = total.div_ceil(size);
            let lo = (q.page * size).min(total);
            let hi = ((q.page + 1) * size).min(total);
            let validation: Vec<_> = result
                .planning
                .as_ref()
                .map(|p| p.attempts().to_vec())
                .unwrap_or_default();
            json!({
                "episode_id": id,
                "status": result.status,
                "command": result.command,
                "plan": result.plan(),
                "validation": validation,
                "replans": validation.len(),
                "failure": result.failure,
                "collisions": result.collisions,
                "solves": result.solves,
                "frames": {
                    "page": q.page,
                    "page_size": size,
                    "pages": pages,
                    "total": total,
                    "items": &result.frames[lo..hi],
                },
            })
        }
    };
    Json(body).into_response()
}

fn scene_json(slot: &SceneSlot) -> Value {
    json!({ "layout": slot.layout, "seed": slot.seed, "scene": slot.state })
}

async fn scene(State(st): State<Shared>) -> Response {
    Json(scene_json(&st.scene.lock().unwrap())).into_response()
}

#[derive(Deserialize)]
struct ResetBody {
    layout: Option<String>,
    seed: Option<u64>,
}

async fn reset(State(st): State<Shared>, Json(body): Json<ResetBody>) -> Response {
    if st.busy.load(Ordering::SeqCst) {
        return err(StatusCode::CONFLICT, "an episode is already running");
    }
    let mut slot = st.scene.lock().unwrap();
    let layout = match body.layout.as_deref().map(str::parse::<Layout>) {
        None => slot.layout,
        Some(Ok(l)) => l,
        Some(Err(e)) => return err(StatusCode::UNPROCESSABLE_ENTITY, e),
    };
    slot.layout = layout;
    slot.seed = body.seed.unwrap_or(slot.seed);
    slot.state = spawn_scene(layout, slot.seed, &st.cfg.sim);
    Json(scene_json(&slot)).into_response()
}

async fn model_info(State(st): State<Shared>) -> Response {
    let m = &st.model;
    Json(json!({
        "version": m.version,
        "z": m.z(),
        "s": m.s(),
        "p": m.p(),
        "embedder_id": m.embedder_id,
        "rho": m.rho,
        "dynamics": m.dynamics,
        "provenance": m.provenance,
        "threshold": st.cfg.validation.threshold,
        "residual_threshold": st.cfg.validation.residual,
        "max_replans": st.cfg.validation.max_replans,
        "examples": m.example_texts,
    }))
    .into_response()
}

#[derive(Deserialize)]
struct ValidateQuery {
    text: Option<String>,
}

async fn validate_text(State(st): State<Shared>, Query(q): Query<ValidateQuery>) -> Response {
    let text = match q.text.as_deref().map(str::trim) {
        Some(t) if !t.is_empty() => t.to_string(),
        _ => return err(StatusCode::UNPROCESSABLE_ENTITY, "missing text"),
    };
    let st2 = st.clone();
    let embedded = tokio::task::spawn_blocking(move || st2.embedder.embed_one(&text).map(|e| (text, e))).await;
    let (text, e) = match embedded {
        Ok(Ok(v)) => v,
        Ok(Err(e)) => return err(StatusCode::BAD_GATEWAY, e),
        Err(e) => return internal(e),
    };
    let c = match st.gate.evaluate(&e.values) {
        Ok(c) => c,
        Err(e) => return internal(e),
    };
    let v = &st.cfg.validation;
    let passed = c.coverage <= v.threshold && c.residual <= v.residual;
    Json(json!({
        "text": text,
        "coverage": c.coverage,
        "residual": c.residual,
        "threshold": v.threshold,
        "residual_threshold": v.residual,
        "passed": passed,
        "verdict": if passed { "pass" } else { "fail" },
    }))
    .into_response()
}
