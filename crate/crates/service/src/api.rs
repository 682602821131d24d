//! HTTP routes and server-sent events.

use std::convert::Infallible;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, patch, post, put};
use axum::{Json, Router};
use futures::stream::{self, Stream, StreamExt};
use qcollab_core::codebook::{AnnotationId, CodeEntry, CodebookError};
use qcollab_core::corpus::{CorpusError, DocId};
use qcollab_core::metrics::reports_to_csv;
use qcollab_core::session::{
    AcceptPayload, AnnotatePayload, Effect, EventBody, SessionError, SuggestPayload,
};
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::broadcast::error::RecvError;

use crate::state::{ApiError, AppState, CreateSession, Role, ServerEvent, SessionHandle};

impl ApiError {
    pub fn status(&self) -> StatusCode {
        match self {
            ApiError::Unauthorized => StatusCode::UNAUTHORIZED,
            ApiError::OperatorOnly => StatusCode::FORBIDDEN,
            ApiError::NotFound(_) => StatusCode::NOT_FOUND,
            ApiError::Invalid(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ApiError::Metrics(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ApiError::Store(_) => StatusCode::INTERNAL_SERVER_ERROR,
            ApiError::Session(e) => match e {
                SessionError::OrderingViolation | SessionError::MissingCodebook => {
                    StatusCode::CONFLICT
                }
                SessionError::PhaseViolation(_)
                | SessionError::NotOwner(_)
                | SessionError::MissingCoder
                | SessionError::UnknownCoder(_)
                | SessionError::AnnotationDeleted(_) => StatusCode::FORBIDDEN,
                SessionError::UnknownAnnotation(_)
                | SessionError::Corpus(CorpusError::UnknownDocument(_)) => StatusCode::NOT_FOUND,
                SessionError::Corpus(_)
                | SessionError::Codebook(_)
                | SessionError::InvalidConfig(_) => StatusCode::UNPROCESSABLE_ENTITY,
                SessionError::NonMonotonicTimestamp { .. } | SessionError::Serving(_) => {
                    StatusCode::INTERNAL_SERVER_ERROR
                }
            },
        }
    }

    fn code(&self) -> &'static str {
        match self {
            ApiError::Unauthorized => "unauthorized",
            ApiError::OperatorOnly => "operator_only",
            ApiError::NotFound(_) => "not_found",
            ApiError::Invalid(_) => "invalid_request",
            ApiError::Metrics(_) => "metrics_error",
            ApiError::Store(_) => "storage_error",
            ApiError::Session(e) => match e {
                SessionError::OrderingViolation => "ordering_violation",
                SessionError::MissingCodebook => "missing_codebook",
                SessionError::PhaseViolation(_) => "phase_violation",
                SessionError::NotOwner(_) => "not_owner",
                SessionError::MissingCoder => "coder_required",
                SessionError::UnknownCoder(_) => "unknown_coder",
                SessionError::AnnotationDeleted(_) => "annotation_deleted",
                SessionError::UnknownAnnotation(_) => "unknown_annotation",
                SessionError::Corpus(CorpusError::UnknownDocument(_)) => "unknown_document",
                SessionError::Corpus(_) => "invalid_span",
                SessionError::Codebook(CodebookError::EmptyLabel) => "invalid_label",
                SessionError::Codebook(_) => "invalid_codebook",
                SessionError::InvalidConfig(_) => "invalid_config",
                SessionError::NonMonotonicTimestamp { .. } | SessionError::Serving(_) => "internal",
            },
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = self.status();
        if status.is_server_error() {
            tracing::error!(error = %self, "request failed");
        }
        let body = Json(json!({ "error": self.code(), "message": self.to_string() }));
        (status, body).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Debug, Default, Deserialize)]
struct TokenQuery {
    token: Option<String>,
}

fn token_from<'a>(q: &'a TokenQuery, headers: &'a HeaderMap) -> Option<&'a str> {
    q.token.as_deref().or_else(|| {
        headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
    })
}

fn authorize(
    state: &AppState,
    id: &str,
    q: &TokenQuery,
    headers: &HeaderMap,
) -> ApiResult<(Arc<SessionHandle>, Role)> {
    let handle = state.get(id)?;
    let role = handle.authorize(token_from(q, headers))?;
    Ok((handle, role))
}

fn operator(
    state: &AppState,
    id: &str,
    q: &TokenQuery,
    headers: &HeaderMap,
) -> ApiResult<Arc<SessionHandle>> {
    match authorize(state, id, q, headers)? {
        (h, Role::Operator) => Ok(h),
        _ => Err(ApiError::OperatorOnly),
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(|| async { "ok" }))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/state", get(get_state))
        .route("/sessions/{id}/annotations", post(create_annotation))
        .route(
            "/sessions/{id}/annotations/{aid}",
            patch(edit_annotation).delete(delete_annotation),
        )
        .route("/sessions/{id}/suggestions", get(suggestions))
        .route("/sessions/{id}/phase/advance", post(advance))
        .route("/sessions/{id}/codebook", put(commit_codebook))
        .route("/sessions/{id}/metrics", get(metrics))
        .route("/sessions/{id}/log", get(export_log))
        .route("/sessions/{id}/events", get(events))
        .with_state(state)
}

async fn create_session(
    State(state): State<Arc<AppState>>,
    Json(req): Json<CreateSession>,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let created = state.create_session(req)?;
    tracing::info!(session = %created.session_id, "created");
    Ok((StatusCode::CREATED, Json(json!(created))))
}

async fn get_state(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<TokenQuery>,
    headers: HeaderMap,
) -> ApiResult<Json<Value>> {
    let (h, role) = authorize(&state, &id, &q, &headers)?;
    Ok(Json(h.state(&role)?))
}

#[derive(Debug, Deserialize)]
struct NewAnnotation {
    doc: DocId,
    start: i64,
    end: i64,
    code: String,
    /// Set when the code was picked from the suggestion list.
    #[serde(default)]
    from_suggestion: bool,
    #[serde(default)]
    confidence: Option<f64>,
}

fn saved(effects: &[Effect]) -> Value {
    effects
        .iter()
        .find_map(|e| match e {
            Effect::AnnotationSaved { annotation, .. }
            | Effect::AnnotationUpdated { annotation, .. } => {
                Some(json!({ "annotation_id": annotation.id, "annotation": annotation }))
            }
            _ => None,
        })
        .unwrap_or(Value::Null)
}

async fn create_annotation(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<TokenQuery>,
    headers: HeaderMap,
    Json(body): Json<NewAnnotation>,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let (h, role) = authorize(&state, &id, &q, &headers)?;
    let event = if body.from_suggestion {
        EventBody::AcceptSuggestion(AcceptPayload {
            doc: body.doc,
            start: body.start,
            end: body.end,
            code: body.code,
            confidence: body.confidence,
        })
    } else {
        EventBody::Annotate(AnnotatePayload {
            doc: body.doc,
            start: body.start,
            end: body.end,
            code: body.code,
        })
    };
    let effects = h.submit(&role, event)?;
    Ok((StatusCode::CREATED, Json(saved(&effects))))
}

#[derive(Debug, Deserialize)]
struct EditBody {
    code: String,
}

async fn edit_annotation(
    State(state): State<Arc<AppState>>,
    Path((id, aid)): Path<(String, u64)>,
    Query(q): Query<TokenQuery>,
    headers: HeaderMap,
    Json(body): Json<EditBody>,
) -> ApiResult<Json<Value>> {
    let (h, role) = authorize(&state, &id, &q, &headers)?;
    let effects = h.submit(
        &role,
        EventBody::EditCode {
            annotation: AnnotationId(aid),
            code: body.code,
        },
    )?;
    Ok(Json(saved(&effects)))
}

async fn delete_annotation(
    State(state): State<Arc<AppState>>,
    Path((id, aid)): Path<(String, u64)>,
    Query(q): Query<TokenQuery>,
    headers: HeaderMap,
) -> ApiResult<Json<Value>> {
    let (h, role) = authorize(&state, &id, &q, &headers)?;
    let effects = h.submit(
        &role,
        EventBody::DeleteCode {
            annotation: AnnotationId(aid),
        },
    )?;
    Ok(Json(saved(&effects)))
}

#[derive(Debug, Deserialize)]
struct SuggestQuery {
    token: Option<String>,
    doc: DocId,
    start: i64,
    end: i64,
    k: Option<usize>,
}

async fn suggestions(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<SuggestQuery>,
    headers: HeaderMap,
) -> ApiResult<Json<Value>> {
    let tq = TokenQuery { token: q.token };
    let (h, role) = authorize(&state, &id, &tq, &headers)?;
    if q.k == Some(0) {
        return Err(ApiError::Invalid("k must be positive".into()));
    }
    let effects = h.submit(
        &role,
        EventBody::RequestSuggestions(SuggestPayload {
            doc: q.doc,
            start: q.start,
            end: q.end,
            k: q.k,
        }),
    )?;
    let body = effects
        .into_iter()
        .find_map(|e| match e {
            Effect::Suggestions {
                suggestions,
                disabled,
                origin,
                ..
            } => Some(json!({
                "items": suggestions.items,
                "model_version": suggestions.model_version,
                "disabled": disabled,
                "origin": origin,
            })),
            _ => None,
        })
        .unwrap_or(Value::Null);
    Ok(Json(body))
}

async fn advance(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<TokenQuery>,
    headers: HeaderMap,
) -> ApiResult<Json<Value>> {
    let (h, role) = authorize(&state, &id, &q, &headers)?;
    let next = h
        .with_session(|s| s.phase().next())
        .ok_or_else(|| SessionError::PhaseViolation("session is done".into()))?;
    let effects = h.submit(&role, EventBody::PhaseAdvance { to: next })?;
    let changed = effects
        .iter()
        .any(|e| matches!(e, Effect::PhaseChanged { .. }));
    Ok(Json(json!({
        "phase": h.with_session(|s| s.phase()),
        "changed": changed,
    })))
}

#[derive(Debug, Deserialize)]
struct CodebookBody {
    entries: Vec<CodeEntry>,
}

async fn commit_codebook(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<TokenQuery>,
    headers: HeaderMap,
    Json(body): Json<CodebookBody>,
) -> ApiResult<Json<Value>> {
    let (h, role) = authorize(&state, &id, &q, &headers)?;
    h.submit(
        &role,
        EventBody::CodebookCommit {
            entries: body.entries,
        },
    )?;
    Ok(Json(
        json!({ "codebook": h.with_session(|s| s.codebook().cloned()) }),
    ))
}

#[derive(Debug, Deserialize)]
struct MetricsQuery {
    token: Option<String>,
    format: Option<String>,
}

async fn metrics(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<MetricsQuery>,
    headers: HeaderMap,
) -> ApiResult<Response> {
    let tq = TokenQuery { token: q.token };
    let h = operator(&state, &id, &tq, &headers)?;
    let report = h.report()?;
    Ok(match q.format.as_deref() {
        Some("csv") => (
            [(header::CONTENT_TYPE, "text/csv")],
            reports_to_csv(&[report]),
        )
            .into_response(),
        None | Some("json") => Json(report).into_response(),
        Some(other) => return Err(ApiError::Invalid(format!("unknown format `{other}`"))),
    })
}

async fn export_log(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<TokenQuery>,
    headers: HeaderMap,
) -> ApiResult<Response> {
    let h = operator(&state, &id, &q, &headers)?;
    Ok((
        [(header::CONTENT_TYPE, "application/x-ndjson")],
        h.script().to_jsonl(),
    )
        .into_response())
}

fn sse_event(e: &ServerEvent) -> Event {
    Event::default()
        .id(e.id.to_string())
        .event(e.kind.clone())
        .data(e.data.to_string())
}

async fn events(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<TokenQuery>,
    headers: HeaderMap,
) -> ApiResult<Sse<impl Stream<Item = Result<Event, Infallible>>>> {
    let (h, role) = authorize(&state, &id, &q, &headers)?;
    let last_id = headers
        .get("last-event-id")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.parse().ok());
    let (backlog, rx) = h.publisher().subscribe(last_id);
    let seen = backlog.last().map(|e| e.id).or(last_id).unwrap_or(0);
    let r = role.clone();
    let backlog = stream::iter(
        backlog
            .into_iter()
            .filter(move |e| r.sees(&e.audience))
            .map(|e| Ok(sse_event(&e))),
    );
    let live = stream::unfold((rx, role, seen), |(mut rx, role, seen)| async move {
        loop {
            match rx.recv().await {
                Ok(e) if e.id > seen && role.sees(&e.audience) => {
                    let ev = sse_event(&e);
                    return Some((Ok(ev), (rx, role, e.id)));
                }
                Ok(_) | Err(RecvError::Lagged(_)) => continue,
                Err(RecvError::Closed) => return None,
            }
        }
    });
    Ok(
        Sse::new(backlog.chain(live))
            .keep_alive(KeepAlive::new().interval(Duration::from_secs(15))),
    )
}
