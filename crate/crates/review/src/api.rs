use std::io::SeekFrom;
use std::path::Path;
use std::sync::Arc;

use axum::body::{Body, Bytes};
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use broadsound::dataset::Confidence;
use broadsound::{Level, Taxonomy};
use chrono::{DateTime, Utc};
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::io::{AsyncReadExt, AsyncSeekExt};
use tower_http::services::ServeDir;

use crate::journal::{error_report, ClassAnnotation, ErrorAnnotation, ErrorCategory};
use crate::range::{self, ByteRange};
use crate::{ReviewState, ServiceError};

const DEFAULT_PAGE: usize = 50;
const MAX_PAGE: usize = 1000;

type AppState = Arc<ReviewState>;

pub(crate) fn router(state: AppState, ui_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/taxonomy", get(taxonomy))
        .route("/enums", get(enums))
        .route("/errors", get(list_errors))
        .route("/errors/{sound_id}/annotation", get(get_error_annotation).post(post_error_annotation))
        .route("/report/errors", get(report))
        .route("/annotations", axum::routing::post(post_class_annotation))
        .route("/annotations/{sound_id}", get(get_class_annotation))
        .route("/audio/{sound_id}", get(audio))
        .with_state(state);
    match ui_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        log::error!("{e}");
        ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

fn not_found(what: &str, id: &str) -> ApiError {
    ApiError(StatusCode::NOT_FOUND, format!("unknown {what} `{id}`"))
}

fn invalid(msg: impl Into<String>) -> ApiError {
    ApiError(StatusCode::UNPROCESSABLE_ENTITY, msg.into())
}

fn class_json(tax: &Taxonomy, code: &str) -> Value {
    let node = tax.node(code).expect("queue codes are validated on load");
    let top = tax.label_at(code, Level::Top).ok().and_then(|t| tax.node(t));
    json!({
        "code": node.code,
        "name": node.name,
        "level": node.level,
        "top_code": top.map(|t| t.code.as_str()),
        "top_name": top.map(|t| t.name.as_str()),
    })
}

async fn taxonomy(State(state): State<AppState>) -> Json<Value> {
    let tax = &state.taxonomy;
    let tops: Vec<Value> = tax
        .top_codes()
        .map(|top| {
            let node = tax.node(top).expect("top code");
            let children: Vec<Value> = tax
                .children_of(top)
                .map(|c| json!({ "code": c.code, "name": c.name, "abbrev": c.abbrev }))
                .collect();
            json!({ "code": node.code, "name": node.name, "abbrev": node.abbrev, "children": children })
        })
        .collect();
    Json(json!({ "version": tax.version(), "classes": tops }))
}

async fn enums() -> Json<Value> {
    let categories: Vec<Value> = ErrorCategory::ALL
        .iter()
        .map(|c| json!({ "code": c.as_str(), "label": c.label() }))
        .collect();
    let confidence: Vec<&str> = Confidence::ALL.iter().map(|c| c.as_str()).collect();
    Json(json!({ "error_categories": categories, "confidence_levels": confidence }))
}

#[derive(Deserialize)]
struct Page {
    offset: Option<usize>,
    limit: Option<usize>,
}

async fn list_errors(State(state): State<AppState>, Query(page): Query<Page>) -> Result<Json<Value>, ApiError> {
    let offset = page.offset.unwrap_or(0);
    let limit = page.limit.unwrap_or(DEFAULT_PAGE);
    if limit == 0 || limit > MAX_PAGE {
        return Err(invalid(format!("limit must be in 1..={MAX_PAGE}")));
    }
    let total = state.queue.len();
    let window = state.queue.iter().skip(offset).take(limit);
    let annotations = state.lock();
    let items: Vec<Value> = window
        .map(|item| {
            json!({
                "sound_id": item.sound_id,
                "true": class_json(&state.taxonomy, &item.true_code),
                "predicted": class_json(&state.taxonomy, &item.predicted_code),
                "audio_url": format!("/audio/{}", item.sound_id),
                "annotations": annotations.store().errors_for(&item.sound_id),
            })
        })
        .collect();
    Ok(Json(json!({ "total": total, "offset": offset, "limit": limit, "items": items })))
}

fn parse_body<T: serde::de::DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError(StatusCode::BAD_REQUEST, format!("invalid body: {e}")))
}

fn required(value: String, field: &str) -> Result<String, ApiError> {
    if value.trim().is_empty() {
        Err(invalid(format!("`{field}` must not be empty")))
    } else {
        Ok(value)
    }
}

#[derive(Deserialize)]
struct ErrorBody {
    category: String,
    #[serde(default)]
    note: Option<String>,
    reviewer: String,
    #[serde(default)]
    timestamp: Option<DateTime<Utc>>,
}

async fn post_error_annotation(
    State(state): State<AppState>,
    UrlPath(sound_id): UrlPath<String>,
    body: Bytes,
) -> Result<(StatusCode, Json<Value>), ApiError> {
    let body: ErrorBody = parse_body(&body)?;
    if state.queue_item(&sound_id).is_none() {
        return Err(not_found("queued sound", &sound_id));
    }
    let category: ErrorCategory = body.category.parse().map_err(invalid)?;
    let annotation = ErrorAnnotation {
        sound_id,
        category,
        note: body.note.filter(|n| !n.is_empty()),
        reviewer: required(body.reviewer, "reviewer")?,
        timestamp: body.timestamp.unwrap_or_else(Utc::now),
    };
    let rev = write(state, move |s| s.lock().record_error(annotation)).await?;
    Ok((StatusCode::CREATED, Json(json!({ "revision": rev }))))
}

async fn get_error_annotation(
    State(state): State<AppState>,
    UrlPath(sound_id): UrlPath<String>,
) -> Result<Json<Value>, ApiError> {
    if state.queue_item(&sound_id).is_none() {
        return Err(not_found("queued sound", &sound_id));
    }
    let annotations = state.lock();
    Ok(Json(json!({
        "sound_id": sound_id,
        "annotations": annotations.store().errors_for(&sound_id),
    })))
}

#[derive(Deserialize)]
struct ReportQuery {
    reviewer: Option<String>,
}

async fn report(State(state): State<AppState>, Query(q): Query<ReportQuery>) -> Json<Value> {
    let annotations = state.lock();
    let report = error_report(annotations.store(), q.reviewer.as_deref());
    Json(serde_json::to_value(report).expect("report serializes"))
}

#[derive(Deserialize)]
struct ClassBody {
    sound_id: String,
    class_code: String,
    confidence: String,
    annotator: String,
    #[serde(default)]
    timestamp: Option<DateTime<Utc>>,
}

async fn post_class_annotation(State(state): State<AppState>, body: Bytes) -> Result<(StatusCode, Json<Value>), ApiError> {
    let body: ClassBody = parse_body(&body)?;
    if !state.knows_sound(&body.sound_id) {
        return Err(not_found("sound", &body.sound_id));
    }
    let class_code = state
        .taxonomy
        .resolve(&body.class_code)
        .filter(|n| n.level == Level::Second)
        .map(|n| n.code.clone())
        .ok_or_else(|| invalid(format!("`{}` is not a second-level class", body.class_code)))?;
    let confidence = Confidence::ALL
        .into_iter()
        .find(|c| c.as_str() == body.confidence)
        .ok_or_else(|| invalid(format!("unknown confidence `{}`", body.confidence)))?;
    let annotation = ClassAnnotation {
        sound_id: body.sound_id,
        class_code,
        confidence,
        annotator: required(body.annotator, "annotator")?,
        timestamp: body.timestamp.unwrap_or_else(Utc::now),
    };
    let rev = write(state, move |s| s.lock().record_class(annotation)).await?;
    Ok((StatusCode::CREATED, Json(json!({ "revision": rev }))))
}

async fn get_class_annotation(
    State(state): State<AppState>,
    UrlPath(sound_id): UrlPath<String>,
) -> Result<Json<Value>, ApiError> {
    if !state.knows_sound(&sound_id) {
        return Err(not_found("sound", &sound_id));
    }
    let annotations = state.lock();
    Ok(Json(json!({
        "sound_id": sound_id,
        "annotations": annotations.store().classes_for(&sound_id),
    })))
}

/// Runs a journal write off the async workers; fsync blocks.
async fn write<F>(state: AppState, f: F) -> Result<u64, ApiError>
where
    F: FnOnce(&crate::ReviewState) -> Result<u64, ServiceError> + Send + 'static,
{
    tokio::task::spawn_blocking(move || f(&state))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map_err(ApiError::from)
}

async fn audio(
    State(state): State<AppState>,
    UrlPath(sound_id): UrlPath<String>,
    headers: HeaderMap,
) -> Result<Response, ApiError> {
    let path = state.audio_path(&sound_id).ok_or_else(|| not_found("audio for sound", &sound_id))?;
    let mut file = match tokio::fs::File::open(&path).await {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(not_found("audio file for sound", &sound_id));
        }
        Err(e) => return Err(ServiceError::Io(e).into()),
    };
    let len = file.metadata().await.map_err(ServiceError::Io)?.len();
    let requested = headers.get(header::RANGE).and_then(|v| v.to_str().ok());

    let mut response = match range::resolve(requested, len) {
        ByteRange::Full => {
            let mut bytes = Vec::with_capacity(len as usize);
            file.read_to_end(&mut bytes).await.map_err(ServiceError::Io)?;
            Response::new(Body::from(bytes))
        }
        ByteRange::Partial { start, end } => {
            let mut bytes = vec![0u8; (end - start + 1) as usize];
            file.seek(SeekFrom::Start(start)).await.map_err(ServiceError::Io)?;
            file.read_exact(&mut bytes).await.map_err(ServiceError::Io)?;
            let mut r = Response::new(Body::from(bytes));
            *r.status_mut() = StatusCode::PARTIAL_CONTENT;
            r.headers_mut().insert(
                header::CONTENT_RANGE,
                HeaderValue::from_str(&format!("bytes {start}-{end}/{len}")).expect("ascii"),
            );
            r
        }
        ByteRange::Unsatisfiable => {
            let mut r = Response::new(Body::empty());
            *r.status_mut() = StatusCode::RANGE_NOT_SATISFIABLE;
            r.headers_mut().insert(
                header::CONTENT_RANGE,
                HeaderValue::from_str(&format!("bytes */{len}")).expect("ascii"),
            );
            return Ok(r);
        }
    };
    let h = response.headers_mut();
    h.insert(header::CONTENT_TYPE, HeaderValue::from_static("audio/wav"));
    h.insert(header::ACCEPT_RANGES, HeaderValue::from_static("bytes"));
    Ok(response)
}
