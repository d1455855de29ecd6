//! HTTP query service.
//!
//! | route | |
//! |---|---|
//! | `GET /health` | `ok` |
//! | `GET /views` | view list with camera intrinsics |
//! | `GET /render?view=ID&channel=color\|instance\|hier[&format=png\|sgfi]` | preview PNG or raw SGFI |
//! | `POST /query/click` | `{view, u, v, mode}` |
//! | `POST /query/text` | `{label[, view, top_m]}` |
//!
//! Masks are run-length encoded row-major, alternating and starting with a
//! run of unselected pixels.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use supergseg::dataset::Split;
use supergseg::formats::encode_feature_image;
use supergseg::raster::Channel;
use supergseg::session::{mask_rle, Session};
use supergseg::supergaussian::QueryMode;

use crate::preview::preview_png;

pub fn router(session: Session) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/views", get(views))
        .route("/render", get(render))
        .route("/query/click", post(click))
        .route("/query/text", post(text))
        .with_state(Arc::new(session))
}

type Shared = State<Arc<Session>>;

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

/// Internal failures are 500; anything caused by the request is 400.
fn engine_error(e: supergseg::Error) -> Response {
    use supergseg::Error as E;
    match e {
        E::Query(m) | E::Config(m) => error(StatusCode::BAD_REQUEST, m),
        other => error(StatusCode::INTERNAL_SERVER_ERROR, other.to_string()),
    }
}

fn parse_body<T: serde::de::DeserializeOwned>(body: &Bytes) -> Result<T, Response> {
    serde_json::from_slice(body).map_err(|e| error(StatusCode::BAD_REQUEST, format!("malformed request: {e}")))
}

fn known_view(session: &Session, view: u32) -> Result<(), Response> {
    if session.dataset.view(view).is_some() {
        Ok(())
    } else {
        Err(error(StatusCode::NOT_FOUND, format!("unknown view {view}")))
    }
}

async fn health() -> &'static str {
    "ok"
}

#[derive(Serialize)]
struct ViewInfo {
    id: u32,
    split: Split,
    width: u32,
    height: u32,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    center: [f64; 3],
}

async fn views(State(s): Shared) -> Json<Vec<ViewInfo>> {
    let list = s
        .dataset
        .views
        .iter()
        .map(|v| {
            let cam = &s.scene.cameras[v.camera];
            let c = cam.center();
            ViewInfo { id: v.id, split: v.split, width: cam.width, height: cam.height, fx: cam.fx, fy: cam.fy, cx: cam.cx, cy: cam.cy, center: [c.x, c.y, c.z] }
        })
        .collect();
    Json(list)
}

#[derive(Deserialize)]
struct RenderQuery {
    view: u32,
    #[serde(default = "default_channel")]
    channel: String,
    #[serde(default)]
    format: Option<String>,
}

fn default_channel() -> String {
    "color".into()
}

async fn render(State(s): Shared, q: Result<Query<RenderQuery>, axum::extract::rejection::QueryRejection>) -> Response {
    let Ok(Query(q)) = q else {
        return error(StatusCode::BAD_REQUEST, "expected ?view=ID&channel=color|instance|hier");
    };
    let channel = match Channel::parse(&q.channel) {
        Some(c) if c != Channel::Language || s.has_language() => c,
        _ => return error(StatusCode::BAD_REQUEST, format!("unknown channel '{}'", q.channel)),
    };
    if let Err(r) = known_view(&s, q.view) {
        return r;
    }
    let img = match s.render(q.view, channel) {
        Ok(i) => i,
        Err(e) => return engine_error(e),
    };
    match q.format.as_deref() {
        None | Some("png") => ([(header::CONTENT_TYPE, "image/png")], preview_png(&img, channel)).into_response(),
        Some("sgfi") | Some("raw") => ([(header::CONTENT_TYPE, "application/octet-stream")], encode_feature_image(&img)).into_response(),
        Some(f) => error(StatusCode::BAD_REQUEST, format!("unknown format '{f}'")),
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ClickRequest {
    view: u32,
    u: u32,
    v: u32,
    mode: String,
}

async fn click(State(s): Shared, body: Bytes) -> Response {
    let req: ClickRequest = match parse_body(&body) {
        Ok(r) => r,
        Err(r) => return r,
    };
    let mode = match req.mode.as_str() {
        "part" => QueryMode::Part,
        "instance" => QueryMode::Instance,
        m => return error(StatusCode::BAD_REQUEST, format!("unknown mode '{m}'")),
    };
    if let Err(r) = known_view(&s, req.view) {
        return r;
    }
    match s.click(req.view, req.u, req.v, mode) {
        Ok(r) => Json(json!({
            "status": r.status,
            "selected_supergs": r.selected_supergs,
            "instance": r.instance,
            "mask_rle": mask_rle(&r.mask),
        }))
        .into_response(),
        Err(e) => engine_error(e),
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TextRequest {
    label: String,
    #[serde(default)]
    view: Option<u32>,
    #[serde(default)]
    top_m: Option<usize>,
}

async fn text(State(s): Shared, body: Bytes) -> Response {
    let req: TextRequest = match parse_body(&body) {
        Ok(r) => r,
        Err(r) => return r,
    };
    if !s.has_language() {
        return error(StatusCode::SERVICE_UNAVAILABLE, "no language field loaded");
    }
    if s.dataset.vocabulary.get(&req.label).is_none() {
        return error(StatusCode::NOT_FOUND, format!("label '{}' is not in the vocabulary", req.label));
    }
    let view = match req.view {
        Some(v) => v,
        None => match s.dataset.test_views().next().or_else(|| s.dataset.views.first()) {
            Some(v) => v.id,
            None => return error(StatusCode::NOT_FOUND, "no views"),
        },
    };
    if let Err(r) = known_view(&s, view) {
        return r;
    }
    match s.text(&req.label, view, req.top_m) {
        Ok(r) => Json(json!({
            "winner_instance": r.query.winner,
            "relevancy_per_instance": r.query.relevancy.iter().map(|(l, v)| json!({"instance": l, "relevancy": v})).collect::<Vec<_>>(),
            "selected_supergs": r.query.selected,
            "view": view,
            "mask_rle": mask_rle(&r.mask),
        }))
        .into_response(),
        Err(e) => engine_error(e),
    }
}
