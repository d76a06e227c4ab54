//! HTTP API over annotation sessions, candidate ranking and separation jobs.
//! Every route lives under `/v1`.

mod error;
mod session;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use refsep_core::io::{decode_image, encode_png16, encode_png8, sha256_hex};
use refsep_core::patch::{origin_for_point, PATCH_SIDE};
use refsep_core::pipeline::separate_image;
use refsep_core::posterior::{posterior_components, top_candidates, CandidateRecord, CandidateSet, PairCaching, PairTable};
use refsep_core::render::{thumbnail, THUMB_SCALE};
use refsep_core::separation::{Annotations, SeparationConfig};
use refsep_core::session::{to_component, PointAnnotation, SessionFile};
use refsep_core::GmmPrior;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::Semaphore;
use tower_http::cors::{AllowOrigin, CorsLayer};

pub use error::{ApiError, ApiResult};
pub use session::{Layers, ProgressCell, Session, SessionState};

pub const DEFAULT_PORT: u16 = 8080;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub max_upload_bytes: usize,
    /// Separation jobs allowed to run at once.
    pub workers: usize,
    /// Allowed browser origin; `None` allows any.
    pub cors_origin: Option<String>,
    /// Base configuration that per-job overrides are applied to.
    pub separation: SeparationConfig,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            max_upload_bytes: 64 << 20,
            workers: 1,
            cors_origin: None,
            separation: SeparationConfig { clip_to_physical: true, ..Default::default() },
        }
    }
}

struct Inner {
    prior: Arc<GmmPrior>,
    table: Arc<PairTable>,
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
    next_id: AtomicU64,
    workers: Arc<Semaphore>,
    config: ServiceConfig,
}

#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    pub fn new(prior: GmmPrior, config: ServiceConfig) -> refsep_core::Result<Self> {
        let table = PairTable::build(&prior, PairCaching::Auto)?;
        Ok(Self::with_table(Arc::new(prior), Arc::new(table), config))
    }

    pub fn with_table(prior: Arc<GmmPrior>, table: Arc<PairTable>, config: ServiceConfig) -> Self {
        let workers = Arc::new(Semaphore::new(config.workers.max(1)));
        AppState(Arc::new(Inner {
            prior,
            table,
            sessions: Mutex::new(HashMap::new()),
            next_id: AtomicU64::new(0),
            workers,
            config,
        }))
    }

    /// Job slots; a separation starts only after acquiring one.
    pub fn workers(&self) -> Arc<Semaphore> {
        self.0.workers.clone()
    }

    fn session(&self, id: &str) -> ApiResult<Arc<Mutex<Session>>> {
        self.0
            .sessions
            .lock()
            .expect("session map poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("unknown session {id}")))
    }
}

pub fn router(state: AppState) -> Router {
    let cors = match &state.0.config.cors_origin {
        Some(o) => match HeaderValue::from_str(o) {
            Ok(v) => CorsLayer::new().allow_origin(AllowOrigin::exact(v)),
            Err(_) => CorsLayer::new(),
        },
        None => CorsLayer::new().allow_origin(AllowOrigin::any()),
    }
    .allow_methods([axum::http::Method::GET, axum::http::Method::POST, axum::http::Method::DELETE])
    .allow_headers([header::CONTENT_TYPE]);
    let limit = state.0.config.max_upload_bytes;
    let v1 = Router::new()
        .route("/health", get(health))
        .route("/sessions", post(create_session).layer(DefaultBodyLimit::max(limit)))
        .route("/sessions/{id}", get(session_info))
        .route("/sessions/{id}/candidates", get(candidates))
        .route("/sessions/{id}/annotations", get(list_annotations).post(add_annotation))
        .route("/sessions/{id}/annotations/{index}", delete(delete_annotation))
        .route("/sessions/{id}/separate", post(start_separation))
        .route("/sessions/{id}/result", get(result))
        .route("/sessions/{id}/layers/{layer}", get(layer_png))
        .route("/sessions/{id}/session-file", get(session_file));
    Router::new().nest("/v1", v1).layer(cors).with_state(state)
}

pub async fn serve(addr: SocketAddr, state: AppState) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}

async fn health(State(s): State<AppState>) -> Json<Value> {
    let sessions = s.0.sessions.lock().expect("session map poisoned").len();
    Json(json!({ "prior_id": s.0.prior.id(), "k": s.0.prior.k(), "sessions": sessions }))
}

async fn create_session(State(s): State<AppState>, body: Bytes) -> ApiResult<Json<Value>> {
    let decoded = tokio::task::spawn_blocking(move || decode_image(&body))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
        .map_err(|e| ApiError::new(StatusCode::UNSUPPORTED_MEDIA_TYPE, e.to_string()))?;
    let (w, h) = (decoded.width(), decoded.height());
    if w < PATCH_SIDE || h < PATCH_SIDE {
        return Err(ApiError::unprocessable(format!("{w}x{h} image is smaller than one 8x8 patch")));
    }
    let n = s.0.next_id.fetch_add(1, Ordering::Relaxed);
    let id = sha256_hex(format!("{}:{n}", decoded.sha256).as_bytes())[..24].to_string();
    let info = json!({
        "session_id": id,
        "width": w,
        "height": h,
        "channels": decoded.channels.len(),
        "image_sha256": decoded.sha256,
        "prior_id": s.0.prior.id(),
    });
    let gray = Arc::new(decoded.gray());
    let session = Session {
        id: id.clone(),
        decoded: Arc::new(decoded),
        gray,
        annotations: Vec::new(),
        state: SessionState::Annotating,
        progress: Arc::new(ProgressCell::default()),
        result: None,
        error: None,
    };
    s.0.sessions.lock().expect("session map poisoned").insert(id, Arc::new(Mutex::new(session)));
    Ok(Json(info))
}

fn status_json(sess: &Session) -> Value {
    json!({
        "session_id": sess.id,
        "width": sess.width(),
        "height": sess.height(),
        "channels": sess.decoded.channels.len(),
        "image_sha256": sess.decoded.sha256,
        "state": sess.state,
        "progress": sess.progress.get(),
        "annotations": sess.annotations,
    })
}

async fn session_info(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let sess = s.session(&id)?;
    let g = sess.lock().expect("session poisoned");
    Ok(Json(status_json(&g)))
}

#[derive(Deserialize)]
struct CandidateQuery {
    x: usize,
    y: usize,
    n: Option<usize>,
}

#[derive(Serialize)]
struct CandidateView {
    #[serde(flatten)]
    record: CandidateRecord,
    /// Base64 PNG of the clipped, upscaled `x1` patch.
    thumb_x1: String,
    thumb_x2: String,
}

fn thumb_b64(p: &refsep_core::Patch) -> refsep_core::Result<String> {
    Ok(BASE64.encode(encode_png8(&thumbnail(p, THUMB_SCALE))?))
}

/// Top-`n` candidates at the patch around point `(x, y)`, computed off the
/// async executor.
async fn rank_candidates(
    s: &AppState,
    sess: &Arc<Mutex<Session>>,
    x: usize,
    y: usize,
    n: usize,
) -> ApiResult<((usize, usize), CandidateSet)> {
    if n == 0 {
        return Err(ApiError::unprocessable("n must be at least 1"));
    }
    let gray = sess.lock().expect("session poisoned").gray.clone();
    let (ox, oy) = origin_for_point(gray.width(), gray.height(), x, y).ok_or_else(|| {
        ApiError::unprocessable(format!(
            "point ({x}, {y}) has no 8x8 patch inside the {}x{} image",
            gray.width(),
            gray.height()
        ))
    })?;
    let (prior, table) = (s.0.prior.clone(), s.0.table.clone());
    let cands = tokio::task::spawn_blocking(move || {
        let post = posterior_components(&gray.patch(ox, oy), &prior, &table)?;
        top_candidates(&post, n)
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))??;
    Ok(((ox, oy), cands))
}

async fn candidates(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<CandidateQuery>,
) -> ApiResult<Json<Value>> {
    let sess = s.session(&id)?;
    let n = q.n.unwrap_or(s.0.config.separation.n_candidates);
    let (origin, cands) = rank_candidates(&s, &sess, q.x, q.y, n).await?;
    let views = cands
        .entries
        .iter()
        .map(|c| {
            Ok(CandidateView { record: CandidateRecord::from(c), thumb_x1: thumb_b64(&c.x1)?, thumb_x2: thumb_b64(&c.x2)? })
        })
        .collect::<refsep_core::Result<Vec<_>>>()?;
    Ok(Json(json!({
        "x": q.x,
        "y": q.y,
        "origin": [origin.0, origin.1],
        "n": views.len(),
        "y_patch": cands.y.to_vec(),
        "candidates": views,
    })))
}

async fn list_annotations(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Vec<PointAnnotation>>> {
    let sess = s.session(&id)?;
    let g = sess.lock().expect("session poisoned");
    Ok(Json(g.annotations.clone()))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationRequest {
    x: usize,
    y: usize,
    rank: Option<usize>,
    /// Candidate count the rank refers to.
    n: Option<usize>,
    i: Option<usize>,
    j: Option<usize>,
}

fn ensure_annotating(sess: &Session) -> ApiResult<()> {
    match sess.state {
        SessionState::Annotating => Ok(()),
        SessionState::Separating => Err(ApiError::conflict("annotations are locked while separating")),
        _ => Err(ApiError::conflict("session has already been separated")),
    }
}

fn parse_json<T: serde::de::DeserializeOwned>(body: &[u8]) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::unprocessable(format!("invalid request body: {e}")))
}

async fn add_annotation(
    State(s): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Json<Vec<PointAnnotation>>> {
    let req: AnnotationRequest = parse_json(&body)?;
    let sess = s.session(&id)?;
    ensure_annotating(&sess.lock().expect("session poisoned"))?;
    let (i, j) = match (req.rank, req.i, req.j) {
        (Some(rank), None, None) => {
            let n = req.n.unwrap_or(s.0.config.separation.n_candidates);
            let (_, cands) = rank_candidates(&s, &sess, req.x, req.y, n).await?;
            let c = cands
                .entries
                .get(rank)
                .ok_or_else(|| ApiError::unprocessable(format!("rank {rank} is outside [0, {})", cands.len())))?;
            (c.i, c.j)
        }
        (None, Some(i), Some(j)) => {
            s.0.table.check_index(i, j)?;
            (i, j)
        }
        _ => return Err(ApiError::unprocessable("give either rank or both i and j")),
    };
    let ann = PointAnnotation { x: req.x, y: req.y, i, j };
    let mut g = sess.lock().expect("session poisoned");
    ensure_annotating(&g)?;
    to_component(&ann, g.width(), g.height())?;
    g.annotations.push(ann);
    Ok(Json(g.annotations.clone()))
}

async fn delete_annotation(
    State(s): State<AppState>,
    Path((id, index)): Path<(String, usize)>,
) -> ApiResult<Json<Vec<PointAnnotation>>> {
    let sess = s.session(&id)?;
    let mut g = sess.lock().expect("session poisoned");
    ensure_annotating(&g)?;
    if index >= g.annotations.len() {
        return Err(ApiError::not_found(format!("no annotation {index}")));
    }
    g.annotations.remove(index);
    Ok(Json(g.annotations.clone()))
}

/// Applies JSON overrides on top of the service's base configuration.
fn job_config(base: &SeparationConfig, body: &[u8]) -> ApiResult<SeparationConfig> {
    let mut merged = serde_json::to_value(base).map_err(|e| ApiError::internal(e.to_string()))?;
    if !body.iter().all(u8::is_ascii_whitespace) {
        let overrides: Value = parse_json(body)?;
        let Value::Object(map) = overrides else {
            return Err(ApiError::unprocessable("config overrides must be a JSON object"));
        };
        for (k, v) in map {
            merged[k] = v;
        }
    }
    let cfg: SeparationConfig = serde_json::from_value(merged).map_err(|e| ApiError::unprocessable(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

async fn start_separation(
    State(s): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Response> {
    let cfg = job_config(&s.0.config.separation, &body)?;
    let sess = s.session(&id)?;
    let (decoded, annotations, progress) = {
        let mut g = sess.lock().expect("session poisoned");
        match g.state {
            SessionState::Annotating => {}
            SessionState::Separating => return Err(ApiError::conflict("separation already running")),
            _ => return Err(ApiError::conflict("session has already been separated")),
        }
        let (w, h) = (g.width(), g.height());
        let components =
            g.annotations.iter().map(|a| to_component(a, w, h)).collect::<refsep_core::Result<Vec<_>>>()?;
        g.state = SessionState::Separating;
        (g.decoded.clone(), Annotations { components, filters: vec![] }, g.progress.clone())
    };
    let (prior, table, workers) = (s.0.prior.clone(), s.0.table.clone(), s.0.workers.clone());
    let job = sess.clone();
    tokio::spawn(async move {
        let permit = workers.acquire_owned().await;
        let outcome = tokio::task::spawn_blocking(move || {
            let _permit = permit;
            let started = Instant::now();
            let report = |f: f64| progress.raise(f);
            let out = separate_image(&decoded, &annotations, &prior, &table, &cfg, Some(&report))?;
            Ok::<_, refsep_core::Error>(Layers {
                x1_png: encode_png16(&out.x1)?,
                x2_png: encode_png16(&out.x2)?,
                summary: out.summary,
                seconds: started.elapsed().as_secs_f64(),
            })
        })
        .await;
        let mut g = job.lock().expect("session poisoned");
        match outcome {
            Ok(Ok(layers)) => {
                g.progress.raise(1.0);
                g.result = Some(Arc::new(layers));
                g.state = SessionState::Done;
            }
            Ok(Err(e)) => {
                log::warn!("session {}: separation failed: {e}", g.id);
                g.error = Some(e.to_string());
                g.state = SessionState::Failed;
            }
            Err(e) => {
                g.error = Some(format!("separation worker crashed: {e}"));
                g.state = SessionState::Failed;
            }
        }
    });
    Ok((StatusCode::ACCEPTED, Json(json!({ "session_id": id, "state": SessionState::Separating }))).into_response())
}

async fn result(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let sess = s.session(&id)?;
    let g = sess.lock().expect("session poisoned");
    let mut v = json!({
        "session_id": g.id,
        "state": g.state,
        "progress": g.progress.get(),
        "error": g.error,
    });
    if let Some(r) = &g.result {
        v["result"] = json!({
            "seconds": r.seconds,
            "objective_trace": r.summary.primary.objective_trace,
            "summary": r.summary,
            "layers": {
                "x1": format!("/v1/sessions/{}/layers/1", g.id),
                "x2": format!("/v1/sessions/{}/layers/2", g.id),
            },
        });
    }
    Ok(Json(v))
}

async fn layer_png(State(s): State<AppState>, Path((id, layer)): Path<(String, u8)>) -> ApiResult<Response> {
    let sess = s.session(&id)?;
    let r = sess
        .lock()
        .expect("session poisoned")
        .result
        .clone()
        .ok_or_else(|| ApiError::conflict("separation has not finished"))?;
    let bytes = match layer {
        1 => r.x1_png.clone(),
        2 => r.x2_png.clone(),
        _ => return Err(ApiError::not_found("layer must be 1 or 2")),
    };
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

async fn session_file(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<SessionFile>> {
    let sess = s.session(&id)?;
    let g = sess.lock().expect("session poisoned");
    Ok(Json(SessionFile {
        image_sha256: g.decoded.sha256.clone(),
        prior_id: s.0.prior.id().to_string(),
        annotations: g.annotations.clone(),
        config: s.0.config.separation.clone(),
    }))
}
