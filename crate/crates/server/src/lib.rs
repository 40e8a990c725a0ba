//! HTTP API for the patch-tagging annotator.
//!
//! Tag writes use optimistic versioning: every slice carries a version,
//! exposed as an `ETag`, and `PUT` must send it back in `If-Match`. A stale
//! version gets `412` with the current state; a missing header gets `428`.

mod render;
pub mod store;

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::{Path, Query, Request, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

pub use store::{Precondition, SliceTagsView, Store};

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("{0}")]
    Invalid(String),
    #[error("missing or invalid bearer token")]
    Unauthorized,
    #[error("If-Match header required")]
    PreconditionRequired,
    #[error("version conflict")]
    VersionConflict(Box<SliceTagsView>),
    #[error(transparent)]
    Core(#[from] vcaptcha_core::Error),
    #[error("internal error: {0}")]
    Internal(String),
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, code) = match &self {
            ApiError::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            ApiError::Invalid(_) => (StatusCode::BAD_REQUEST, "invalid"),
            ApiError::Unauthorized => (StatusCode::UNAUTHORIZED, "unauthorized"),
            ApiError::PreconditionRequired => (StatusCode::PRECONDITION_REQUIRED, "precondition_required"),
            ApiError::VersionConflict(_) => (StatusCode::PRECONDITION_FAILED, "version_conflict"),
            ApiError::Core(vcaptcha_core::Error::Io { .. }) | ApiError::Internal(_) => {
                (StatusCode::INTERNAL_SERVER_ERROR, "internal")
            }
            ApiError::Core(_) => (StatusCode::BAD_REQUEST, "invalid"),
        };
        let mut body = json!({ "error": { "code": code, "message": self.to_string() } });
        let mut headers = HeaderMap::new();
        if let ApiError::VersionConflict(current) = &self {
            body["current"] = serde_json::to_value(current).expect("serializable");
            headers.insert(header::ETAG, etag(current.version));
        }
        if let ApiError::Unauthorized = self {
            headers.insert(header::WWW_AUTHENTICATE, HeaderValue::from_static("Bearer"));
        }
        (status, headers, Json(body)).into_response()
    }
}

#[derive(Clone)]
pub struct AppState {
    pub store: Arc<Store>,
    pub token: Option<Arc<str>>,
}

impl AppState {
    pub fn new(store: Store, token: Option<String>) -> Self {
        Self {
            store: Arc::new(store),
            token: token.map(Into::into),
        }
    }
}

fn etag(version: u64) -> HeaderValue {
    HeaderValue::from_str(&format!("\"{version}\"")).expect("ascii")
}

fn parse_if_match(headers: &HeaderMap) -> Result<Precondition, ApiError> {
    let raw = headers
        .get(header::IF_MATCH)
        .ok_or(ApiError::PreconditionRequired)?
        .to_str()
        .map_err(|_| ApiError::Invalid("If-Match is not ASCII".into()))?
        .trim();
    if raw == "*" {
        return Ok(Precondition::Any);
    }
    let v = raw.trim_start_matches("W/").trim_matches('"');
    v.parse()
        .map(Precondition::Version)
        // an unknown tag can never match the current version
        .or(Ok(Precondition::Version(u64::MAX)))
}

fn parse_slice(s: &str) -> Result<usize, ApiError> {
    s.parse().map_err(|_| ApiError::NotFound(format!("slice {s}")))
}

async fn require_token(State(state): State<AppState>, req: Request, next: Next) -> Response {
    if let Some(token) = &state.token {
        let ok = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|h| h.to_str().ok())
            .and_then(|h| h.strip_prefix("Bearer "))
            .is_some_and(|t| t == &**token);
        if !ok {
            return ApiError::Unauthorized.into_response();
        }
    }
    next.run(req).await
}

#[derive(Serialize)]
struct VolumeInfo {
    id: String,
    shape: [usize; 3],
    spacing: [f64; 3],
    intensity_range: [f32; 2],
    patch_size: usize,
    annotatable_slices: Vec<usize>,
    tagged_vessel_cells: usize,
}

async fn list_volumes(State(st): State<AppState>) -> Json<Vec<VolumeInfo>> {
    let out = st
        .store
        .volumes()
        .map(|e| {
            let (h, w, s) = e.volume.shape();
            let id = e.volume.id().to_string();
            let (cells, _) = st.store.tag_summary(&id);
            VolumeInfo {
                shape: [h, w, s],
                spacing: e.volume.spacing(),
                intensity_range: [e.range.0, e.range.1],
                patch_size: st.store.patch_size,
                annotatable_slices: e.grids.keys().copied().collect(),
                tagged_vessel_cells: cells,
                id,
            }
        })
        .collect();
    Json(out)
}

#[derive(Deserialize)]
struct Window {
    min: Option<f32>,
    max: Option<f32>,
}

async fn slice_png(
    State(st): State<AppState>,
    Path((id, file)): Path<(String, String)>,
    Query(w): Query<Window>,
) -> Result<Response, ApiError> {
    let s = file
        .strip_suffix(".png")
        .ok_or_else(|| ApiError::NotFound(format!("{file} (expected <slice>.png)")))?;
    let s = parse_slice(s)?;
    let entry = st.store.volume(&id)?;
    if s >= entry.volume.num_slices() {
        return Err(ApiError::NotFound(format!("slice {s} of {id}")));
    }
    let lo = w.min.unwrap_or(entry.range.0);
    let hi = w.max.unwrap_or(entry.range.1);
    if !(lo.is_finite() && hi.is_finite()) || (hi < lo) {
        return Err(ApiError::Invalid(format!("invalid window [{lo}, {hi}]")));
    }
    let bytes = render::slice_png(entry.volume.slice(s), lo, hi).map_err(|e| ApiError::Internal(e.to_string()))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

#[derive(Serialize)]
struct CellInfo {
    index: usize,
    row: usize,
    col: usize,
    /// Set on the final row/column tile when it overlaps its predecessor.
    overlaps_row: bool,
    overlaps_col: bool,
}

async fn slice_grid(
    State(st): State<AppState>,
    Path((id, s)): Path<(String, String)>,
) -> Result<Json<serde_json::Value>, ApiError> {
    let s = parse_slice(&s)?;
    let g = st.store.grid(&id, s)?;
    let p = g.patch_size;
    let overlapping = |offs: &[usize], i: usize| i > 0 && offs[i] - offs[i - 1] < p;
    let cells: Vec<CellInfo> = (0..g.num_cells())
        .map(|k| {
            let (i, j) = (k / g.num_cols(), k % g.num_cols());
            CellInfo {
                index: k,
                row: g.row_offsets[i],
                col: g.col_offsets[j],
                overlaps_row: overlapping(&g.row_offsets, i),
                overlaps_col: overlapping(&g.col_offsets, j),
            }
        })
        .collect();
    Ok(Json(json!({
        "volume_id": id,
        "slice": s,
        "slice_shape": [g.slice_shape.0, g.slice_shape.1],
        "patch_size": p,
        "bbox": [g.window.r0, g.window.c0, g.window.r1, g.window.c1],
        "row_offsets": g.row_offsets,
        "col_offsets": g.col_offsets,
        "num_cells": g.num_cells(),
        "cells": cells,
    })))
}

fn tags_response(status: StatusCode, view: SliceTagsView) -> Response {
    let tag = etag(view.version);
    (status, [(header::ETAG, tag)], Json(view)).into_response()
}

async fn get_tags(State(st): State<AppState>, Path((id, s)): Path<(String, String)>) -> Result<Response, ApiError> {
    let view = st.store.tags(&id, parse_slice(&s)?)?;
    Ok(tags_response(StatusCode::OK, view))
}

/// Either a full bit vector or the list of vessel cells.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TagUpdate {
    tags: Option<Vec<bool>>,
    vessel_cells: Option<Vec<usize>>,
    session_id: Option<String>,
}

async fn put_tags(
    State(st): State<AppState>,
    Path((id, s)): Path<(String, String)>,
    headers: HeaderMap,
    Json(body): Json<TagUpdate>,
) -> Result<Response, ApiError> {
    let s = parse_slice(&s)?;
    let pre = parse_if_match(&headers)?;
    let n = st.store.grid(&id, s)?.num_cells();
    let tags = match (body.tags, body.vessel_cells) {
        (Some(t), None) => t,
        (None, Some(cells)) => {
            let mut t = vec![false; n];
            for c in cells {
                *t.get_mut(c)
                    .ok_or_else(|| ApiError::Invalid(format!("cell {c} out of range for {n} cells")))? = true;
            }
            t
        }
        _ => return Err(ApiError::Invalid("send exactly one of `tags` or `vessel_cells`".into())),
    };
    let view = st.store.put_tags(&id, s, tags, pre, body.session_id.as_deref())?;
    Ok(tags_response(StatusCode::OK, view))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NewSession {
    volume_id: String,
    rater_id: String,
}

async fn create_session(State(st): State<AppState>, Json(body): Json<NewSession>) -> Result<Response, ApiError> {
    let s = st.store.create_session(&body.volume_id, &body.rater_id)?;
    Ok((StatusCode::CREATED, Json(s)).into_response())
}

async fn get_session(State(st): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    Ok(Json(st.store.session(&id)?).into_response())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Cursor {
    slice: usize,
}

async fn move_cursor(
    State(st): State<AppState>,
    Path(id): Path<String>,
    Json(c): Json<Cursor>,
) -> Result<Response, ApiError> {
    Ok(Json(st.store.move_session(&id, c.slice)?).into_response())
}

async fn session_progress(State(st): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let s = st.store.session(&id)?;
    let total = st.store.volume(&s.volume_id)?.grids.len();
    Ok(Json(json!({
        "session_id": s.session_id,
        "volume_id": s.volume_id,
        "rater_id": s.rater_id,
        "cursor": s.cursor,
        "submitted": s.submitted_slices.len(),
        "total": total,
        "progress": s.progress(total),
        "completed": s.completed,
        "updated_ms": s.updated_ms,
    }))
    .into_response())
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/volumes", get(list_volumes))
        .route("/api/volumes/{id}/slices/{slice}", get(slice_png))
        .route("/api/volumes/{id}/slices/{slice}/grid", get(slice_grid))
        .route("/api/volumes/{id}/slices/{slice}/tags", get(get_tags).put(put_tags))
        .route("/api/sessions", post(create_session))
        .route("/api/sessions/{id}", get(get_session))
        .route("/api/sessions/{id}/cursor", put(move_cursor))
        .route("/api/sessions/{id}/progress", get(session_progress))
        .layer(middleware::from_fn_with_state(state.clone(), require_token))
        .with_state(state)
}

/// Serves until Ctrl-C.
pub async fn serve(state: AppState, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "annotation service listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
