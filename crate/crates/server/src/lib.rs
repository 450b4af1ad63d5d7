//! HTTP front end for the inference loop: render a view, pick the labels
//! under a region, extract those labels and render the extraction from any
//! pose.
//!
//! The scene is immutable for the lifetime of the process. Extraction
//! sessions are the only state; ids are handed out sequentially, so replaying
//! the same requests against a fresh process yields the same ids and images.

mod error;

use std::collections::BTreeSet;
use std::sync::{Arc, Mutex};

use axum::body::Body;
use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Query, State};
use axum::http::header;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use labelgs_core::io::bundle::{encode_label_png, encode_rgb_png, SceneBundle};
use labelgs_core::lifting::{count_labels, extract, pixel_list_mask, polygon_mask};
use labelgs_core::render::render;
use labelgs_core::{Camera, GaussianScene, Image, Label};
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;

pub use error::ApiError;

pub const DEFAULT_PORT: u16 = 7878;

#[derive(Clone, Debug, Serialize)]
pub struct ViewInfo {
    pub id: String,
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World-to-camera rotation, row-major.
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
    pub split: labelgs_core::io::Split,
}

struct Session {
    scene: GaussianScene,
}

struct Inner {
    scene: GaussianScene,
    labels: BTreeSet<Label>,
    views: Vec<(ViewInfo, Camera)>,
    sessions: Mutex<Vec<Arc<Session>>>,
}

/// Shared, cheaply clonable service state.
#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    /// Serves `scene` with the cameras of `bundle`. Only camera data of the
    /// bundle is kept.
    pub fn new(scene: GaussianScene, bundle: &SceneBundle) -> Self {
        let views = bundle
            .views
            .iter()
            .map(|bv| {
                let c = &bv.view.camera;
                let info = ViewInfo {
                    id: bv.view.id.clone(),
                    width: c.width,
                    height: c.height,
                    fx: c.fx,
                    fy: c.fy,
                    cx: c.cx,
                    cy: c.cy,
                    rotation: std::array::from_fn(|i| c.rotation[(i / 3, i % 3)]),
                    translation: [c.translation.x, c.translation.y, c.translation.z],
                    split: bv.split,
                };
                (info, c.clone())
            })
            .collect();
        let labels = scene.gaussians.iter().map(|g| g.label).collect();
        Self(Arc::new(Inner { scene, labels, views, sessions: Mutex::new(Vec::new()) }))
    }

    fn camera(&self, id: &str) -> Result<&Camera, ApiError> {
        self.0
            .views
            .iter()
            .find(|(v, _)| v.id == id)
            .map(|(_, c)| c)
            .ok_or_else(|| ApiError::not_found("unknown_view", format!("no view {id:?}")))
    }

    fn check_labels(&self, labels: &BTreeSet<Label>) -> Result<(), ApiError> {
        match labels.iter().find(|k| !self.0.labels.contains(k)) {
            Some(k) => Err(ApiError::not_found("unknown_label", format!("no Gaussian carries label {k}"))),
            None => Ok(()),
        }
    }

    fn session(&self, id: u64) -> Result<Arc<Session>, ApiError> {
        let sessions = self.0.sessions.lock().expect("session lock poisoned");
        usize::try_from(id)
            .ok()
            .and_then(|i| sessions.get(i).cloned())
            .ok_or_else(|| ApiError::not_found("unknown_object", format!("no extraction {id}")))
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/views", get(views))
        .route("/render", get(render_view))
        .route("/labelmap", get(labelmap))
        .route("/pick", post(pick))
        .route("/extract", post(extract_labels))
        .route("/render_extracted", get(render_extracted))
        .route("/health", get(health))
        .fallback(|| async { ApiError::not_found("not_found", "no such endpoint") })
        .with_state(state)
}

/// Serves on an already bound listener until the process stops.
pub async fn serve(state: AppState, listener: TcpListener) -> std::io::Result<()> {
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], Body::from(bytes)).into_response()
}

fn rgb_png(img: &Image) -> Result<Response, ApiError> {
    Ok(png(encode_rgb_png(img).map_err(ApiError::internal)?))
}

/// Runs a render off the async workers.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(ApiError::internal)
}

/// Comma-separated list, e.g. `1,2,5`.
pub fn parse_csv<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>, ApiError> {
    s.split(',')
        .map(|p| p.trim().parse().map_err(|_| ApiError::bad_request(format!("{what}: cannot parse {p:?}"))))
        .collect()
}

#[derive(Serialize)]
struct ViewList {
    views: Vec<ViewInfo>,
}

async fn views(State(s): State<AppState>) -> Json<ViewList> {
    Json(ViewList { views: s.0.views.iter().map(|(v, _)| v.clone()).collect() })
}

#[derive(Deserialize)]
struct RenderQuery {
    view: String,
    labels: Option<String>,
}

async fn render_view(
    State(s): State<AppState>,
    q: Result<Query<RenderQuery>, QueryRejection>,
) -> Result<Response, ApiError> {
    let Query(q) = q?;
    let cam = s.camera(&q.view)?.clone();
    let subset = match q.labels.as_deref() {
        Some(csv) => {
            let set: BTreeSet<Label> = parse_csv(csv, "labels")?.into_iter().collect();
            s.check_labels(&set)?;
            Some(set)
        }
        None => None,
    };
    let img = blocking(move || render(&s.0.scene, &cam, subset.as_ref()).image).await?;
    rgb_png(&img)
}

#[derive(Deserialize)]
struct ViewQuery {
    view: String,
}

async fn labelmap(
    State(s): State<AppState>,
    q: Result<Query<ViewQuery>, QueryRejection>,
) -> Result<Response, ApiError> {
    let Query(q) = q?;
    let cam = s.camera(&q.view)?.clone();
    let labels = blocking(move || render(&s.0.scene, &cam, None).labels).await?;
    Ok(png(encode_label_png(&labels).map_err(ApiError::internal)?))
}

/// Exactly one of `polygon` (vertices in pixel coordinates) or `pixels`.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PickRequest {
    pub view: String,
    pub polygon: Option<Vec<[f64; 2]>>,
    pub pixels: Option<Vec<[usize; 2]>>,
}

#[derive(Debug, Deserialize, Serialize, PartialEq)]
pub struct PickedLabel {
    pub id: Label,
    pub pixel_count: usize,
}

#[derive(Debug, Deserialize, Serialize, PartialEq)]
pub struct PickResponse {
    /// Largest pixel count first.
    pub labels: Vec<PickedLabel>,
}

async fn pick(
    State(s): State<AppState>,
    body: Result<Json<PickRequest>, JsonRejection>,
) -> Result<Json<PickResponse>, ApiError> {
    let Json(req) = body?;
    let cam = s.camera(&req.view)?.clone();
    let (w, h) = cam.dims();
    let region = match (&req.polygon, &req.pixels) {
        (Some(poly), None) => {
            if poly.len() < 3 || poly.iter().flatten().any(|v| !v.is_finite()) {
                return Err(ApiError::bad_request("polygon needs at least 3 finite vertices"));
            }
            polygon_mask(w, h, &poly.iter().map(|p| (p[0], p[1])).collect::<Vec<_>>())
        }
        (None, Some(px)) => pixel_list_mask(w, h, &px.iter().map(|p| (p[0], p[1])).collect::<Vec<_>>()),
        _ => return Err(ApiError::bad_request("give exactly one of polygon or pixels")),
    };
    let labels = blocking(move || render(&s.0.scene, &cam, None).labels).await?;
    let mut picked: Vec<PickedLabel> =
        count_labels(&labels, &region).into_iter().map(|(id, pixel_count)| PickedLabel { id, pixel_count }).collect();
    picked.sort_by(|a, b| b.pixel_count.cmp(&a.pixel_count).then(a.id.cmp(&b.id)));
    Ok(Json(PickResponse { labels: picked }))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractRequest {
    pub labels: Vec<Label>,
}

#[derive(Debug, Deserialize, Serialize, PartialEq)]
pub struct ExtractResponse {
    pub object_id: u64,
    pub labels: Vec<Label>,
    pub gaussians: usize,
}

async fn extract_labels(
    State(s): State<AppState>,
    body: Result<Json<ExtractRequest>, JsonRejection>,
) -> Result<Json<ExtractResponse>, ApiError> {
    let Json(req) = body?;
    if req.labels.is_empty() {
        return Err(ApiError::bad_request("labels must not be empty"));
    }
    let labels: BTreeSet<Label> = req.labels.into_iter().collect();
    s.check_labels(&labels)?;
    let scene = extract(&s.0.scene, &labels);
    let gaussians = scene.len();
    let mut sessions = s.0.sessions.lock().expect("session lock poisoned");
    let object_id = sessions.len() as u64;
    sessions.push(Arc::new(Session { scene }));
    Ok(Json(ExtractResponse { object_id, labels: labels.into_iter().collect(), gaussians }))
}

/// Either `view`, or `rotation` (9 row-major world-to-camera entries) with
/// `translation` (3 entries). With an explicit pose, `view` optionally picks
/// the intrinsics; otherwise the first view's are used.
#[derive(Deserialize)]
struct ExtractedQuery {
    object_id: u64,
    view: Option<String>,
    rotation: Option<String>,
    translation: Option<String>,
}

fn pose_camera(s: &AppState, q: &ExtractedQuery) -> Result<Camera, ApiError> {
    let base = match &q.view {
        Some(id) => s.camera(id)?,
        None => {
            s.0.views
                .first()
                .map(|(_, c)| c)
                .ok_or_else(|| ApiError::not_found("unknown_view", "service has no views"))?
        }
    };
    match (&q.rotation, &q.translation) {
        (None, None) if q.view.is_some() => Ok(base.clone()),
        (None, None) => Err(ApiError::bad_request("give view or rotation and translation")),
        (Some(r), Some(t)) => {
            let r: Vec<f64> = parse_csv(r, "rotation")?;
            let t: Vec<f64> = parse_csv(t, "translation")?;
            if r.len() != 9 || t.len() != 3 {
                return Err(ApiError::bad_request("rotation needs 9 values and translation 3"));
            }
            base.with_pose(Matrix3::from_row_slice(&r), Vector3::from_column_slice(&t))
                .map_err(|e| ApiError::bad_request(e.to_string()))
        }
        _ => Err(ApiError::bad_request("rotation and translation go together")),
    }
}

async fn render_extracted(
    State(s): State<AppState>,
    q: Result<Query<ExtractedQuery>, QueryRejection>,
) -> Result<Response, ApiError> {
    let Query(q) = q?;
    let session = s.session(q.object_id)?;
    let cam = pose_camera(&s, &q)?;
    let img = blocking(move || render(&session.scene, &cam, None).image).await?;
    rgb_png(&img)
}

#[derive(Debug, Deserialize, Serialize, PartialEq)]
pub struct Health {
    pub status: String,
    pub version: String,
    pub gaussians: usize,
    pub labels: Vec<Label>,
    pub views: usize,
    pub extractions: usize,
}

async fn health(State(s): State<AppState>) -> Json<Health> {
    let extractions = s.0.sessions.lock().expect("session lock poisoned").len();
    Json(Health {
        status: "ok".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        gaussians: s.0.scene.len(),
        labels: s.0.labels.iter().copied().collect(),
        views: s.0.views.len(),
        extractions,
    })
}
