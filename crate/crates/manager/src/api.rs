//! HTTP surface: catalog CRUD, batches, runs, record replay and event streams.

use std::collections::BTreeMap;
use std::convert::Infallible;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use asa_core::analysis::{self, MetricAccumulator, MetricSpec, RunRow};
use asa_core::canonical;
use asa_core::datastore::{CatalogEntry, Kind, StepRange, StoreError};
use asa_core::protocol::{ControlCommand, RunStatus};
use asa_core::scenario::{self, BindingSet, DoeSpec, ScenarioSpec, ScenarioTemplate};
use asa_core::StepRecord;
use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::{broadcast, mpsc};
use tokio_stream::wrappers::ReceiverStream;
use tower_http::services::ServeDir;

use crate::cluster::{Batch, ControlError};
use crate::service::{now_ms, BusEvent, Manager, RunView, STREAM_TAGS};

/// How long a control request waits for the node to confirm the new state.
const CONTROL_WAIT: Duration = Duration::from_secs(2);

type Shared = Arc<Manager>;

pub fn router(manager: Shared, ui_dir: Option<PathBuf>) -> Router {
    let mut app = Router::new()
        .route("/health", get(health))
        .route("/models", get(models))
        .route("/scenarios", get(list_scenarios).post(create_scenario))
        .route("/scenarios/{id}", get(get_scenario).put(put_scenario).delete(delete_scenario))
        .route("/templates", get(list_templates).post(create_template))
        .route("/templates/{id}", get(get_template).put(put_template).delete(delete_template))
        .route("/batches", get(list_batches).post(submit_batch))
        .route("/batches/{id}", get(get_batch))
        .route("/batches/{id}/analyze", post(analyze_batch))
        .route("/analyses/{id}", get(get_analysis))
        .route("/runs", get(list_runs))
        .route("/runs/{id}", get(get_run))
        .route("/runs/{id}/control", post(control_run))
        .route("/runs/{id}/records", get(run_records))
        .route("/runs/{id}/stream", get(run_stream))
        .route("/events", get(events))
        .route("/nodes", get(nodes))
        .route("/transitions", get(transitions));
    if let Some(dir) = ui_dir {
        app = app.nest_service("/ui", ServeDir::new(dir));
    }
    app.with_state(manager)
}

// ---- responses ----

fn canonical_json<T: Serialize>(status: StatusCode, body: &T) -> Response {
    let mut res = (status, canonical::to_vec(body)).into_response();
    res.headers_mut().insert(header::CONTENT_TYPE, HeaderValue::from_static("application/json"));
    res
}

fn ok<T: Serialize>(body: &T) -> Response {
    canonical_json(StatusCode::OK, body)
}

fn with_etag(mut res: Response, revision: u64) -> Response {
    if let Ok(v) = HeaderValue::from_str(&format!("\"{revision}\"")) {
        res.headers_mut().insert(header::ETAG, v);
    }
    res
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
    violations: Vec<Value>,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self { status, code, message: message.into(), violations: Vec::new() }
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    /// 422 carrying every violation, each with its message alongside the
    /// structured fields.
    fn invalid<E: Serialize + std::fmt::Display>(message: impl Into<String>, errors: &[E]) -> Self {
        let violations = errors.iter().map(|e| violation(e, None)).collect();
        Self {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            code: "validation_failed",
            message: message.into(),
            violations,
        }
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

fn violation<E: Serialize + std::fmt::Display>(e: &E, index: Option<usize>) -> Value {
    let mut v = match serde_json::to_value(e) {
        Ok(Value::Object(m)) => m,
        _ => serde_json::Map::new(),
    };
    v.insert("message".into(), Value::String(e.to_string()));
    if let Some(i) = index {
        v.insert("index".into(), json!(i));
    }
    Value::Object(v)
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({"error": self.code, "message": self.message, "violations": self.violations});
        canonical_json(self.status, &body)
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let status = match &e {
            StoreError::UnknownRun(_) | StoreError::UnknownId { .. } => StatusCode::NOT_FOUND,
            StoreError::AlreadyExists { .. } | StoreError::RevisionConflict { .. } => StatusCode::CONFLICT,
            StoreError::InvalidId(_) => StatusCode::UNPROCESSABLE_ENTITY,
            StoreError::StorageFull => StatusCode::INSUFFICIENT_STORAGE,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let code = match status {
            StatusCode::NOT_FOUND => "not_found",
            StatusCode::CONFLICT => "conflict",
            StatusCode::UNPROCESSABLE_ENTITY => "validation_failed",
            _ => "store_failed",
        };
        Self::new(status, code, e.to_string())
    }
}

impl From<ControlError> for ApiError {
    fn from(e: ControlError) -> Self {
        let (status, code) = match e {
            ControlError::UnknownRun(_) => (StatusCode::NOT_FOUND, "not_found"),
            ControlError::IllegalTransition { .. } => (StatusCode::CONFLICT, "illegal_transition"),
            ControlError::NotRoutable(_) => (StatusCode::CONFLICT, "not_routable"),
            ControlError::BadFactor => (StatusCode::UNPROCESSABLE_ENTITY, "validation_failed"),
        };
        Self::new(status, code, e.to_string())
    }
}

type ApiResult = Result<Response, ApiError>;

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| {
        let mut err = ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "validation_failed", "malformed request body");
        err.violations.push(json!({"kind": "malformed", "message": e.to_string()}));
        err
    })
}

/// `If-Match: "<revision>"` (quotes optional).
fn if_match(headers: &HeaderMap) -> Result<Option<u64>, ApiError> {
    let Some(v) = headers.get(header::IF_MATCH) else { return Ok(None) };
    let s = v.to_str().map_err(|_| ApiError::bad_request("unreadable If-Match header"))?;
    s.trim()
        .trim_matches('"')
        .parse()
        .map(Some)
        .map_err(|_| ApiError::bad_request("If-Match must be a revision number"))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::internal(e.to_string()))
}

// ---- misc ----

async fn health() -> Response {
    ok(&json!({"status": "ok"}))
}

async fn models(State(m): State<Shared>) -> Response {
    let manifests: Vec<_> = m.registry.manifests().collect();
    ok(&manifests)
}

async fn nodes(State(m): State<Shared>) -> Response {
    let nodes: Vec<_> = m.read(|c| c.nodes().cloned().collect());
    ok(&nodes)
}

#[derive(Deserialize)]
struct SinceQuery {
    #[serde(default)]
    since: u64,
}

async fn transitions(State(m): State<Shared>, Query(q): Query<SinceQuery>) -> Response {
    let log: Vec<_> = m.read(|c| c.log_since(q.since).to_vec());
    ok(&log)
}

// ---- catalog CRUD ----

#[derive(Deserialize)]
struct CreateQuery {
    id: Option<String>,
}

#[derive(Deserialize)]
struct ListQuery {
    #[serde(default)]
    prefix: String,
}

/// Parses and validates a catalog body of `kind`; returns the canonical
/// value to store and the id implied by the body.
fn checked_body(m: &Manager, kind: Kind, body: &Bytes) -> Result<(Value, String), ApiError> {
    match kind {
        Kind::Scenario => {
            let spec: ScenarioSpec = parse_body(body)?;
            scenario::validate(&spec, &m.registry).map_err(|e| ApiError::invalid("invalid scenario", &e))?;
            let name = spec.name.clone();
            Ok((canonical::to_value(&spec), name))
        }
        Kind::Template => {
            let t: ScenarioTemplate = parse_body(body)?;
            let mut violations: Vec<Value> = Vec::new();
            if let Err(errs) = t.check() {
                violations.extend(errs.iter().map(|e| violation(e, None)));
            }
            if let Err(errs) = scenario::validate(&t.base, &m.registry) {
                violations.extend(errs.iter().map(|e| violation(e, None)));
            }
            if !violations.is_empty() {
                let mut err = ApiError::invalid::<String>("invalid template", &[]);
                err.violations = violations;
                return Err(err);
            }
            let name = t.base.name.clone();
            Ok((canonical::to_value(&t), name))
        }
        _ => unreachable!("only scenarios and templates are edited over HTTP"),
    }
}

async fn create_entry(m: Shared, kind: Kind, id: Option<String>, body: Bytes) -> ApiResult {
    let (value, name) = checked_body(&m, kind, &body)?;
    let id = id.unwrap_or(name);
    let entry = blocking(move || m.store.catalog.create(kind, &id, value)).await??;
    let rev = entry.revision;
    Ok(with_etag(canonical_json(StatusCode::CREATED, &entry), rev))
}

async fn put_entry(m: Shared, kind: Kind, id: String, headers: HeaderMap, body: Bytes) -> ApiResult {
    let expected = if_match(&headers)?;
    let (value, _) = checked_body(&m, kind, &body)?;
    let entry = blocking(move || m.store.catalog.put(kind, &id, value, expected)).await??;
    let rev = entry.revision;
    Ok(with_etag(ok(&entry), rev))
}

async fn get_entry(m: Shared, kind: Kind, id: String) -> ApiResult {
    let entry = blocking(move || m.store.catalog.get(kind, &id)).await??;
    let rev = entry.revision;
    Ok(with_etag(ok(&entry), rev))
}

async fn delete_entry(m: Shared, kind: Kind, id: String, headers: HeaderMap) -> ApiResult {
    let expected = if_match(&headers)?;
    let entry = blocking(move || m.store.catalog.delete(kind, &id, expected)).await??;
    Ok(ok(&entry))
}

async fn list_entries(m: Shared, kind: Kind, prefix: String) -> ApiResult {
    let entries: Vec<CatalogEntry> = blocking(move || m.store.catalog.list(kind, &prefix)).await??;
    Ok(ok(&entries))
}

async fn create_scenario(State(m): State<Shared>, Query(q): Query<CreateQuery>, body: Bytes) -> ApiResult {
    create_entry(m, Kind::Scenario, q.id, body).await
}
async fn put_scenario(State(m): State<Shared>, Path(id): Path<String>, h: HeaderMap, body: Bytes) -> ApiResult {
    put_entry(m, Kind::Scenario, id, h, body).await
}
async fn get_scenario(State(m): State<Shared>, Path(id): Path<String>) -> ApiResult {
    get_entry(m, Kind::Scenario, id).await
}
async fn delete_scenario(State(m): State<Shared>, Path(id): Path<String>, h: HeaderMap) -> ApiResult {
    delete_entry(m, Kind::Scenario, id, h).await
}
async fn list_scenarios(State(m): State<Shared>, Query(q): Query<ListQuery>) -> ApiResult {
    list_entries(m, Kind::Scenario, q.prefix).await
}
async fn create_template(State(m): State<Shared>, Query(q): Query<CreateQuery>, body: Bytes) -> ApiResult {
    create_entry(m, Kind::Template, q.id, body).await
}
async fn put_template(State(m): State<Shared>, Path(id): Path<String>, h: HeaderMap, body: Bytes) -> ApiResult {
    put_entry(m, Kind::Template, id, h, body).await
}
async fn get_template(State(m): State<Shared>, Path(id): Path<String>) -> ApiResult {
    get_entry(m, Kind::Template, id).await
}
async fn delete_template(State(m): State<Shared>, Path(id): Path<String>, h: HeaderMap) -> ApiResult {
    delete_entry(m, Kind::Template, id, h).await
}
async fn list_templates(State(m): State<Shared>, Query(q): Query<ListQuery>) -> ApiResult {
    list_entries(m, Kind::Template, q.prefix).await
}

// ---- batches ----

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SubmitBatch {
    template_id: String,
    seed: u64,
    #[serde(default)]
    bindings: Option<Vec<BindingSet>>,
    #[serde(default)]
    doe: Option<DoeSpec>,
    /// Initial pacing of every run; 0 runs unpaced.
    #[serde(default)]
    speed_factor: f64,
}

async fn submit_batch(State(m): State<Shared>, body: Bytes) -> ApiResult {
    let req: SubmitBatch = parse_body(&body)?;
    if !(req.speed_factor.is_finite() && req.speed_factor >= 0.0) {
        return Err(ApiError::from(ControlError::BadFactor));
    }
    let bindings = match (req.bindings, &req.doe) {
        (Some(b), None) => b,
        (None, Some(doe)) => doe.generate().map_err(|e| ApiError::invalid("invalid design", &[e]))?,
        _ => {
            let mut err = ApiError::invalid::<String>("exactly one of `bindings` and `doe` is required", &[]);
            err.violations
                .push(json!({"kind": "bindings_or_doe", "message": "exactly one of `bindings` and `doe` is required"}));
            return Err(err);
        }
    };
    let store = m.clone();
    let tid = req.template_id.clone();
    let entry = blocking(move || store.store.catalog.get(Kind::Template, &tid)).await?.map_err(|e| match e {
        StoreError::UnknownId { .. } => ApiError::new(StatusCode::NOT_FOUND, "unknown_template", e.to_string()),
        other => other.into(),
    })?;
    let template: ScenarioTemplate = serde_json::from_value(entry.body)
        .map_err(|e| ApiError::internal(format!("stored template unreadable: {e}")))?;
    let batch_id = format!("b-{}", &uuid::Uuid::new_v4().simple().to_string()[..12]);
    let requests = scenario::expand_batch(&template, &bindings, req.seed, &batch_id).map_err(|errs| {
        let mut err = ApiError::invalid::<String>("invalid bindings", &[]);
        err.violations = errs.iter().map(|e| violation(&e.error, Some(e.index))).collect();
        err
    })?;
    let mut violations = Vec::new();
    for (i, r) in requests.iter().enumerate() {
        if let Err(errs) = scenario::validate(&r.scenario, &m.registry) {
            violations.extend(errs.iter().map(|e| violation(e, Some(i))));
        }
    }
    if !violations.is_empty() {
        let mut err = ApiError::invalid::<String>("bindings produce invalid scenarios", &[]);
        err.violations = violations;
        return Err(err);
    }
    let batch = Batch {
        batch_id,
        template_id: req.template_id,
        template_revision: entry.revision,
        batch_seed: req.seed,
        bindings,
        run_ids: requests.iter().map(|r| r.request_id.clone()).collect(),
        submitted_ms: now_ms(),
        speed_factor: req.speed_factor,
    };
    let view = blocking(move || m.submit(batch, requests)).await??;
    Ok(canonical_json(StatusCode::CREATED, &view))
}

async fn list_batches(State(m): State<Shared>) -> Response {
    ok(&m.batch_views())
}

async fn get_batch(State(m): State<Shared>, Path(id): Path<String>) -> ApiResult {
    let view = m.batch_view(&id).ok_or_else(|| ApiError::not_found(format!("unknown batch `{id}`")))?;
    Ok(ok(&view))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnalyzeRequest {
    metrics: Vec<MetricSpec>,
}

/// Computes metrics for every run of a batch from the stored records.
/// Runs that did not complete get undefined metrics and a warning.
async fn analyze_batch(State(m): State<Shared>, Path(id): Path<String>, body: Bytes) -> ApiResult {
    let req: AnalyzeRequest = parse_body(&body)?;
    let problems = analysis::check_metrics(&req.metrics, m.registry.manifests());
    if !problems.is_empty() {
        return Err(ApiError::invalid("invalid metrics", &problems));
    }
    let batch =
        m.read(|c| c.batch(&id).cloned()).ok_or_else(|| ApiError::not_found(format!("unknown batch `{id}`")))?;
    let states: Vec<(String, RunStatus)> =
        m.read(|c| batch.run_ids.iter().filter_map(|r| c.run(r).map(|run| (r.clone(), run.state))).collect());
    let summary = blocking(move || -> Result<_, StoreError> {
        let mut rows = Vec::with_capacity(states.len());
        let mut warnings = Vec::new();
        for (index, (run_id, state)) in states.iter().enumerate() {
            let mut metrics: BTreeMap<String, Option<f64>> =
                req.metrics.iter().map(|s| (s.name.clone(), None)).collect();
            if *state == RunStatus::Completed {
                let mut accs: Vec<MetricAccumulator> = req.metrics.iter().map(MetricAccumulator::new).collect();
                m.store.records.scan(run_id, None, StepRange::ALL, |r| accs.iter_mut().for_each(|a| a.feed(&r)))?;
                for (spec, acc) in req.metrics.iter().zip(accs) {
                    metrics.insert(spec.name.clone(), acc.finish());
                }
            } else {
                warnings.push(format!("run `{run_id}` is {state}; its metrics are undefined"));
            }
            rows.push(RunRow {
                run_index: index as u64,
                run_id: run_id.clone(),
                bindings: batch.bindings.get(index).cloned().unwrap_or_default(),
                metrics,
            });
        }
        let summary = analysis::summarize(&batch.batch_id, &req.metrics, rows, warnings);
        let aid = analysis::analysis_id(&batch.batch_id, &req.metrics);
        m.store.catalog.put(Kind::Analysis, &aid, canonical::to_value(&summary), None)?;
        Ok((aid, summary))
    })
    .await??;
    let (aid, summary) = summary;
    let mut body = canonical::to_value(&summary);
    if let Value::Object(o) = &mut body {
        o.insert("analysis_id".into(), Value::String(aid));
    }
    Ok(ok(&body))
}

async fn get_analysis(State(m): State<Shared>, Path(id): Path<String>) -> ApiResult {
    get_entry(m, Kind::Analysis, id).await
}

// ---- runs ----

#[derive(Deserialize)]
struct RunsQuery {
    batch_id: Option<String>,
    state: Option<RunStatus>,
}

async fn list_runs(State(m): State<Shared>, Query(q): Query<RunsQuery>) -> Response {
    let views =
        m.run_views(|r| q.batch_id.as_deref().is_none_or(|b| r.batch_id == b) && q.state.is_none_or(|s| r.state == s));
    ok(&views)
}

async fn get_run(State(m): State<Shared>, Path(id): Path<String>) -> ApiResult {
    let view = m.run_view(&id, true).ok_or_else(|| ApiError::not_found(format!("unknown run `{id}`")))?;
    Ok(ok(&view))
}

/// States that confirm a command took effect.
fn confirms(cmd: &ControlCommand, state: RunStatus) -> Option<bool> {
    let done = match cmd {
        ControlCommand::Play | ControlCommand::Resume => state == RunStatus::Running || state.is_terminal(),
        ControlCommand::Pause => state == RunStatus::Paused || state.is_terminal(),
        ControlCommand::Stop => state.is_terminal(),
        ControlCommand::SetSpeed { .. } | ControlCommand::SetParam(_) => return None,
    };
    Some(done)
}

/// Routes a command, then waits briefly for the node to confirm it. A
/// refusal from the node surfaces as 409.
async fn control_run(State(m): State<Shared>, Path(id): Path<String>, body: Bytes) -> ApiResult {
    let cmd: ControlCommand = parse_body(&body)?;
    let mut bus = m.subscribe();
    m.with_cluster(|c, now| c.control(&id, cmd.clone(), now))?;
    let rejected_prefix = format!("run `{id}`");
    let deadline = tokio::time::Instant::now() + CONTROL_WAIT;
    loop {
        let view = m.run_view(&id, false).ok_or_else(|| ApiError::not_found(format!("unknown run `{id}`")))?;
        if confirms(&cmd, view.state).unwrap_or(true) {
            return Ok(ok(&view));
        }
        match tokio::time::timeout_at(deadline, bus.recv()).await {
            Err(_) => break,
            Ok(Ok(BusEvent::Rejected { text })) if text.starts_with(&rejected_prefix) => {
                return Err(ApiError::new(StatusCode::CONFLICT, "illegal_transition", text.to_string()));
            }
            Ok(Err(broadcast::error::RecvError::Closed)) => break,
            Ok(_) => {}
        }
    }
    let view = m.run_view(&id, false).ok_or_else(|| ApiError::not_found(format!("unknown run `{id}`")))?;
    Ok(canonical_json(StatusCode::ACCEPTED, &view))
}

#[derive(Deserialize)]
struct RecordsQuery {
    from_step: Option<u64>,
    to_step: Option<u64>,
    tag: Option<String>,
    attempt: Option<u32>,
}

#[derive(Serialize)]
struct RecordsPage {
    run_id: String,
    attempt: Option<u32>,
    records: Vec<StepRecord>,
}

/// Replay straight from the record log; never touches the engine.
async fn run_records(State(m): State<Shared>, Path(id): Path<String>, Query(q): Query<RecordsQuery>) -> ApiResult {
    if m.run_view(&id, false).is_none() {
        return Err(ApiError::not_found(format!("unknown run `{id}`")));
    }
    let page = blocking(move || -> Result<RecordsPage, StoreError> {
        let attempt = match q.attempt {
            Some(a) => Some(a),
            None => m.store.records.default_attempt(&id)?,
        };
        let records = match attempt {
            Some(a) => m.store.records.read(&id, Some(a), StepRange::new(q.from_step, q.to_step), q.tag.as_deref())?,
            None => Vec::new(),
        };
        Ok(RecordsPage { run_id: id, attempt, records })
    })
    .await??;
    Ok(ok(&page))
}

// ---- streams ----

#[derive(Deserialize)]
struct StreamQuery {
    #[serde(default)]
    from_step: u64,
}

fn event(kind: &str, data: &impl Serialize) -> Event {
    Event::default().event(kind).data(canonical::to_string(data))
}

type SseTx = mpsc::Sender<Result<Event, Infallible>>;

fn sse(rx: mpsc::Receiver<Result<Event, Infallible>>) -> impl IntoResponse {
    Sse::new(ReceiverStream::new(rx)).keep_alive(KeepAlive::new().interval(Duration::from_secs(15)))
}

/// Live run stream: `state` events for run changes, one `step` event per
/// simulation step carrying its status and weapon records, `reset` when a
/// retry starts a new attempt, and `end` once the run is terminal. Steps
/// are delivered in order without gaps, from `from_step` on.
async fn run_stream(State(m): State<Shared>, Path(id): Path<String>, Query(q): Query<StreamQuery>) -> ApiResult {
    // Subscribe before the first disk read so nothing falls between.
    let bus = m.subscribe();
    let view = m.run_view(&id, false).ok_or_else(|| ApiError::not_found(format!("unknown run `{id}`")))?;
    let (tx, rx) = mpsc::channel(64);
    tokio::spawn(async move {
        let mut s = RunStreamer { m, run_id: id, tx, attempt: view.attempts, next_step: q.from_step };
        let _ = s.run(bus, view).await;
    });
    Ok(sse(rx).into_response())
}

struct RunStreamer {
    m: Shared,
    run_id: String,
    tx: SseTx,
    attempt: u32,
    next_step: u64,
}

#[derive(Serialize)]
struct StepEvent<'a> {
    run_id: &'a str,
    attempt: u32,
    step: u64,
    sim_time: f64,
    records: &'a [StepRecord],
}

/// The stream's consumer went away.
struct Gone;

impl RunStreamer {
    async fn send(&self, e: Event) -> Result<(), Gone> {
        self.tx.send(Ok(e)).await.map_err(|_| Gone)
    }

    /// Emits records (already filtered and in step order) from `next_step` on.
    async fn emit(&mut self, records: &[StepRecord]) -> Result<(), Gone> {
        let mut i = 0;
        while i < records.len() {
            let step = records[i].step;
            let end = i + records[i..].iter().take_while(|r| r.step == step).count();
            if step >= self.next_step {
                let sim_time = records[i].sim_time;
                let ev = StepEvent {
                    run_id: &self.run_id,
                    attempt: self.attempt,
                    step,
                    sim_time,
                    records: &records[i..end],
                };
                self.send(event("step", &ev).id(step.to_string())).await?;
                self.next_step = step + 1;
            }
            i = end;
        }
        Ok(())
    }

    /// Reads whatever the log holds past `next_step` for the current attempt.
    async fn catch_up(&mut self) -> Result<(), Gone> {
        if self.attempt == 0 {
            return Ok(());
        }
        let (m, id, attempt, from) = (self.m.clone(), self.run_id.clone(), self.attempt, self.next_step);
        let records = tokio::task::spawn_blocking(move || {
            let mut out = Vec::new();
            let res = m.store.records.scan(&id, Some(attempt), StepRange::new(Some(from), None), |r| {
                if STREAM_TAGS.contains(&r.tag.as_str()) {
                    out.push(r);
                }
            });
            match res {
                Ok(()) | Err(StoreError::UnknownRun(_)) => out,
                Err(e) => {
                    tracing::warn!(run_id = %id, error = %e, "stream catch-up failed");
                    out
                }
            }
        })
        .await
        .unwrap_or_default();
        self.emit(&records).await
    }

    async fn reset(&mut self, attempt: u32) -> Result<(), Gone> {
        self.attempt = attempt;
        self.next_step = 0;
        let body = json!({"run_id": self.run_id, "attempt": attempt});
        self.send(event("reset", &body)).await
    }

    async fn end(&self, view: &RunView) -> Result<(), Gone> {
        self.send(event("end", view)).await
    }

    async fn run(&mut self, mut bus: broadcast::Receiver<BusEvent>, view: RunView) -> Result<(), Gone> {
        self.send(event("state", &view)).await?;
        if view.state.is_terminal() {
            // Replay the attempt the log would serve.
            let (m, id) = (self.m.clone(), self.run_id.clone());
            if let Ok(Ok(Some(a))) = tokio::task::spawn_blocking(move || m.store.records.default_attempt(&id)).await {
                self.attempt = a;
            }
            self.catch_up().await?;
            return self.end(&view).await;
        }
        self.catch_up().await?;
        loop {
            match bus.recv().await {
                Ok(BusEvent::Run(v)) if v.run_id == self.run_id => {
                    if v.attempts != self.attempt {
                        self.reset(v.attempts).await?;
                    }
                    self.send(event("state", &*v)).await?;
                    if v.state.is_terminal() {
                        self.catch_up().await?;
                        return self.end(&v).await;
                    }
                }
                Ok(BusEvent::Records { run_id, attempt, records }) if *run_id == *self.run_id => {
                    if attempt != self.attempt {
                        if attempt < self.attempt {
                            continue;
                        }
                        self.reset(attempt).await?;
                    }
                    let contiguous = records.first().is_none_or(|r| r.step <= self.next_step);
                    if contiguous {
                        self.emit(&records).await?;
                    } else {
                        self.catch_up().await?;
                    }
                }
                Ok(_) => {}
                Err(broadcast::error::RecvError::Lagged(_)) => {
                    let Some(v) = self.m.run_view(&self.run_id, false) else { return Ok(()) };
                    if v.attempts != self.attempt {
                        self.reset(v.attempts).await?;
                    }
                    self.catch_up().await?;
                    if v.state.is_terminal() {
                        return self.end(&v).await;
                    }
                }
                Err(broadcast::error::RecvError::Closed) => return Ok(()),
            }
        }
    }
}

/// Cluster-wide stream of run and node changes. A `lagged` event tells
/// the client to refetch.
async fn events(State(m): State<Shared>) -> Response {
    let mut bus = m.subscribe();
    let (tx, rx) = mpsc::channel(256);
    tokio::spawn(async move {
        loop {
            let ev = match bus.recv().await {
                Ok(BusEvent::Run(v)) => event("run", &*v),
                Ok(BusEvent::Nodes(n)) => event("nodes", &*n),
                Ok(BusEvent::Rejected { text }) => event("rejected", &json!({"text": &*text})),
                Ok(BusEvent::Records { .. }) => continue,
                Err(broadcast::error::RecvError::Lagged(n)) => event("lagged", &json!({"missed": n})),
                Err(broadcast::error::RecvError::Closed) => return,
            };
            if tx.send(Ok(ev)).await.is_err() {
                return;
            }
        }
    });
    sse(rx).into_response()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn if_match_accepts_quoted_and_bare_revisions() {
        let mut h = HeaderMap::new();
        assert_eq!(if_match(&h).unwrap(), None);
        h.insert(header::IF_MATCH, HeaderValue::from_static("\"7\""));
        assert_eq!(if_match(&h).unwrap(), Some(7));
        h.insert(header::IF_MATCH, HeaderValue::from_static("3"));
        assert_eq!(if_match(&h).unwrap(), Some(3));
        h.insert(header::IF_MATCH, HeaderValue::from_static("abc"));
        assert!(if_match(&h).is_err());
    }

    #[test]
    fn store_errors_map_to_http_statuses() {
        let unknown: ApiError = StoreError::UnknownId { kind: Kind::Scenario, id: "x".into() }.into();
        assert_eq!(unknown.status, StatusCode::NOT_FOUND);
        let conflict: ApiError = StoreError::RevisionConflict { expected: 1, current: 2 }.into();
        assert_eq!(conflict.status, StatusCode::CONFLICT);
        let illegal: ApiError =
            ControlError::IllegalTransition { command: "set_speed", state: RunStatus::Completed }.into();
        assert_eq!(illegal.status, StatusCode::CONFLICT);
    }

    #[test]
    fn only_state_commands_wait_for_confirmation() {
        assert_eq!(confirms(&ControlCommand::Pause, RunStatus::Running), Some(false));
        assert_eq!(confirms(&ControlCommand::Pause, RunStatus::Paused), Some(true));
        assert_eq!(confirms(&ControlCommand::Stop, RunStatus::Stopped), Some(true));
        assert_eq!(confirms(&ControlCommand::SetSpeed { factor: 2.0 }, RunStatus::Running), None);
    }
}
