//! JSON HTTP API over a loaded model bundle and coded city graphs.

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use coho_core::autodiff::content_hash;
use coho_core::citygraph::CityGraph;
use coho_core::pipeline::{community_report, CommunityReport};
use coho_core::quantizer::QuantizedCode;
use coho_core::sampler::{apply_super_node, GenerationState, ModelBundle, NodeStatus, ScheduleConfig, ScheduleFamily, SuperNode};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::commands::{strip_super_nodes, write_run, ArtifactHashes, RunManifest};
use crate::render::{render_svg, RenderOptions};

/// A finished generation held for metrics and rendering.
#[derive(Debug)]
pub struct RunRecord {
    pub manifest: RunManifest,
    pub state: GenerationState,
    /// Non-super nodes that were generated rather than held fixed.
    pub generated: Vec<usize>,
}

pub struct AppState {
    pub bundle: ModelBundle,
    pub hashes: ArtifactHashes,
    pub cities: BTreeMap<String, CityGraph>,
    pub default_schedule: ScheduleConfig,
    /// When set, each run is also written to `<dir>/<run_id>/`.
    pub persist_dir: Option<PathBuf>,
    runs: RwLock<HashMap<String, Arc<RunRecord>>>,
}

impl AppState {
    pub fn new(bundle: ModelBundle, hashes: ArtifactHashes, cities: BTreeMap<String, CityGraph>, default_schedule: ScheduleConfig) -> Self {
        Self { bundle, hashes, cities, default_schedule, persist_dir: None, runs: RwLock::new(HashMap::new()) }
    }

    pub fn run(&self, run_id: &str) -> Option<Arc<RunRecord>> {
        self.runs.read().expect("run table poisoned").get(run_id).cloned()
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    stage: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, stage: &'static str, message: impl Into<String>) -> Self {
        Self { status, stage, message: message.into() }
    }

    fn bad_request(stage: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, stage, message)
    }

    fn not_found(stage: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, stage, message)
    }

    fn from_core(stage: &'static str, e: coho_core::Error) -> Self {
        let status = match e {
            coho_core::Error::ContractViolation(_) | coho_core::Error::Validation(_) => StatusCode::BAD_REQUEST,
            coho_core::Error::NoContext => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, stage, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"error": self.message, "stage": self.stage}))).into_response()
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/city/{id}/graph", get(city_graph))
        .route("/api/generate", post(generate))
        .route("/api/metrics", post(metrics))
        .route("/api/render/{file}", get(render))
        .with_state(state)
}

async fn health(State(app): State<Arc<AppState>>) -> Json<Value> {
    let runs = app.runs.read().expect("run table poisoned").len();
    Json(json!({
        "status": "ok",
        "cities": app.cities.keys().collect::<Vec<_>>(),
        "artifacts": app.hashes,
        "runs": runs,
    }))
}

fn ring(graph: &CityGraph, poly: &coho_core::geometry::Polygon) -> Vec<[f64; 2]> {
    let mut pts: Vec<[f64; 2]> = poly
        .vertices()
        .iter()
        .map(|&p| match &graph.projection {
            Some(proj) => {
                let (lon, lat) = proj.unproject(p);
                [lon, lat]
            }
            None => [p.x, p.y],
        })
        .collect();
    pts.push(pts[0]);
    pts
}

async fn city_graph(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<Value>, ApiError> {
    let g = app.cities.get(&id).ok_or_else(|| ApiError::not_found("graph", format!("unknown city `{id}`")))?;
    let nodes: Vec<Value> = g
        .nodes
        .iter()
        .filter(|n| !n.is_super)
        .map(|n| {
            json!({
                "block_id": n.block_id,
                "contour": ring(g, &n.contour),
                "features": n.shape_features,
                "status": "untouched",
                "has_code": n.layout_code.is_some(),
                "buildings": n.buildings.iter().map(|b| json!({"footprint": ring(g, &b.footprint), "height_m": b.height})).collect::<Vec<_>>(),
            })
        })
        .collect();
    let edges: Vec<Value> = g
        .edges
        .iter()
        .map(|e| json!({"source": g.nodes[e.i].block_id, "target": g.nodes[e.j].block_id, "distance_m": e.distance}))
        .collect();
    Ok(Json(json!({
        "city_id": g.city_id,
        "crs": if g.projection.is_some() { "wgs84" } else { "local-meters" },
        "nodes": nodes,
        "edges": edges,
    })))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuperNodeRequest {
    /// Copy the style code of this existing block.
    #[serde(default)]
    pub style_block_id: Option<String>,
    /// Or give the code explicitly.
    #[serde(default)]
    pub style_code: Option<QuantizedCode>,
    pub attach_block_ids: Vec<String>,
    #[serde(default)]
    pub edge_distance_m: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateRequest {
    pub city_id: String,
    /// Blocks pinned to their current layout. Blocks in neither list are
    /// also held fixed; the list exists so clients can state intent.
    #[serde(default)]
    pub prior_block_ids: Vec<String>,
    pub masked_block_ids: Vec<String>,
    #[serde(rename = "T", default)]
    pub iterations: Option<usize>,
    #[serde(default)]
    pub schedule_family: Option<ScheduleFamily>,
    #[serde(default)]
    pub super_nodes: Vec<SuperNodeRequest>,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub run_id: String,
    pub buildings: Value,
    pub trace: Value,
}

fn block_index(g: &CityGraph, id: &str) -> Result<usize, ApiError> {
    g.index_of(id)
        .filter(|&i| !g.nodes[i].is_super)
        .ok_or_else(|| ApiError::bad_request("generate", format!("unknown block `{id}` in city {}", g.city_id)))
}

/// Resolves block ids and super nodes into a graph and prior flags.
fn prepare(app: &AppState, req: &GenerateRequest) -> Result<(CityGraph, Vec<bool>, ScheduleConfig), ApiError> {
    let base = app.cities.get(&req.city_id).ok_or_else(|| ApiError::not_found("generate", format!("unknown city `{}`", req.city_id)))?;
    let mut masked = vec![false; base.nodes.len()];
    for id in &req.masked_block_ids {
        masked[block_index(base, id)?] = true;
    }
    for id in &req.prior_block_ids {
        if masked[block_index(base, id)?] {
            return Err(ApiError::bad_request("generate", format!("block `{id}` is both prior and masked")));
        }
    }
    let mut graph = base.clone();
    for sn in &req.super_nodes {
        let style_code = match (&sn.style_block_id, &sn.style_code) {
            (Some(id), None) => base.nodes[block_index(base, id)?]
                .layout_code
                .clone()
                .ok_or_else(|| ApiError::bad_request("generate", format!("block `{id}` has no layout code")))?,
            (None, Some(code)) => {
                app.bundle.codebook.check_code(code).map_err(|e| ApiError::from_core("generate", e))?;
                code.clone()
            }
            _ => return Err(ApiError::bad_request("generate", "a super node needs exactly one of style_block_id, style_code")),
        };
        let attach_to = sn.attach_block_ids.iter().map(|id| block_index(base, id)).collect::<Result<Vec<_>, _>>()?;
        let node = SuperNode { style_code, attach_to, edge_distance_m: sn.edge_distance_m.unwrap_or(100.0) };
        graph = apply_super_node(&graph, &node).map_err(|e| ApiError::from_core("generate", e))?;
    }
    let priors: Vec<bool> = (0..graph.nodes.len()).map(|i| i >= masked.len() || !masked[i]).collect();
    let schedule = ScheduleConfig {
        iterations: req.iterations.unwrap_or(app.default_schedule.iterations),
        family: req.schedule_family.unwrap_or(app.default_schedule.family),
        seed: req.seed.unwrap_or(app.default_schedule.seed),
    };
    if schedule.iterations == 0 {
        return Err(ApiError::bad_request("generate", "T must be at least 1"));
    }
    Ok((graph, priors, schedule))
}

/// Identical requests map to the same run id.
fn run_id_for(req: &GenerateRequest, hashes: &ArtifactHashes) -> String {
    let body = serde_json::to_vec(&(req, hashes)).expect("request serializes");
    content_hash(&body)[..16].to_string()
}

async fn generate(State(app): State<Arc<AppState>>, Json(req): Json<GenerateRequest>) -> Result<Json<GenerateResponse>, ApiError> {
    let run_id = run_id_for(&req, &app.hashes);
    let record = match app.run(&run_id) {
        Some(r) => r,
        None => {
            let (graph, priors, schedule) = prepare(&app, &req)?;
            let worker = app.clone();
            let id = run_id.clone();
            let record = tokio::task::spawn_blocking(move || -> Result<RunRecord, ApiError> {
                let state = worker.bundle.generate(&graph, &priors, &schedule).map_err(|e| ApiError::from_core("generate", e))?;
                let generated = (0..state.status.len())
                    .filter(|&i| !state.graph.nodes[i].is_super && matches!(state.status[i], NodeStatus::Accepted(_)))
                    .collect();
                let manifest = RunManifest::new(&id, &state, schedule, worker.hashes.clone());
                if let Some(dir) = &worker.persist_dir {
                    write_run(&dir.join(&id), &state, &manifest)
                        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "persist", format!("{e:#}")))?;
                }
                Ok(RunRecord { manifest, state, generated })
            })
            .await
            .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "generate", e.to_string()))??;
            let record = Arc::new(record);
            app.runs.write().expect("run table poisoned").insert(run_id.clone(), record.clone());
            record
        }
    };
    Ok(Json(GenerateResponse { run_id, buildings: record.state.buildings_geojson(), trace: record.state.trace_json() }))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRequest {
    pub city_id: String,
    /// Run id returned by `/api/generate`.
    pub generated_ref: String,
}

/// Scores the generated blocks of a run, or the whole city when the run generated none.
async fn metrics(State(app): State<Arc<AppState>>, Json(req): Json<MetricsRequest>) -> Result<Json<CommunityReport>, ApiError> {
    let real = app.cities.get(&req.city_id).ok_or_else(|| ApiError::not_found("metrics", format!("unknown city `{}`", req.city_id)))?;
    let run = app.run(&req.generated_ref).ok_or_else(|| ApiError::not_found("metrics", format!("unknown run `{}`", req.generated_ref)))?;
    if run.manifest.city_id != req.city_id {
        return Err(ApiError::bad_request("metrics", format!("run {} belongs to city {}", req.generated_ref, run.manifest.city_id)));
    }
    let members: Vec<usize> = if run.generated.is_empty() { (0..real.nodes.len()).collect() } else { run.generated.clone() };
    let worker = app.clone();
    let name = req.generated_ref.clone();
    let city = req.city_id.clone();
    tokio::task::spawn_blocking(move || {
        let real = &worker.cities[&city];
        let gen = strip_super_nodes(&run.state.graph);
        community_report(&name, &gen, real, &members).map_err(|e| ApiError::from_core("metrics", e))
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "metrics", e.to_string()))?
    .map(Json)
}

async fn render(State(app): State<Arc<AppState>>, Path(file): Path<String>) -> Result<Response, ApiError> {
    let run_id = file.strip_suffix(".svg").ok_or_else(|| ApiError::not_found("render", "renders are served as <run_id>.svg"))?;
    let run = app.run(run_id).ok_or_else(|| ApiError::not_found("render", format!("unknown run `{run_id}`")))?;
    let opts = RenderOptions { max_height_m: app.bundle.bvae.hyper().h_max, highlight: run.generated.clone(), ..RenderOptions::default() };
    let svg = render_svg(&run.state.graph, &opts);
    Ok(([(header::CONTENT_TYPE, "image/svg+xml")], svg).into_response())
}
