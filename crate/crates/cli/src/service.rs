//! HTTP service for interactive staged planning.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use aqueduct_core::economy::LedgerYear;
use aqueduct_core::engine::{EventRecord, MuniYear, SourceYear};
use aqueduct_core::instance::InstanceSummary;
use aqueduct_core::{
    run_stage, validate_plan, History, Instance, KpiReport, Masterplan, Progress, RunConfig, RunOutput,
    ScenarioTrace, SimMode, Violation, WorldState,
};
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

/// Stages the service can play before the trace runs out.
pub const MAX_STAGES: u32 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Running,
    Done,
    Failed,
}

struct Job {
    status: JobStatus,
    progress: Option<Progress>,
    /// Revision of the committed state the job started from.
    base_revision: u64,
    plan: Masterplan,
    output: Option<Arc<RunOutput>>,
    error: Option<String>,
}

struct Inner {
    instance: Arc<Instance>,
    trace: Arc<ScenarioTrace>,
    state: WorldState,
    history: History,
    revision: u64,
    committed: Vec<CommittedStage>,
    jobs: BTreeMap<u64, Job>,
    next_job: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CommittedStage {
    pub start_year: i32,
    pub end_year: i32,
    pub plan: String,
    pub kpi: KpiReport,
}

#[derive(Clone)]
pub struct AppState(Arc<Mutex<Inner>>);

impl AppState {
    pub fn new(instance: Instance, master_seed: u64) -> anyhow::Result<Self> {
        let trace = instance.trace(master_seed, MAX_STAGES * aqueduct_core::engine::STAGE_YEARS)?;
        let state = instance.initial_state(&trace);
        let history = History { up_to_year: state.year, ..Default::default() };
        Ok(Self(Arc::new(Mutex::new(Inner {
            instance: Arc::new(instance),
            trace: Arc::new(trace),
            state,
            history,
            revision: 0,
            committed: Vec::new(),
            jobs: BTreeMap::new(),
            next_job: 1,
        }))))
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.0.lock().unwrap_or_else(|e| e.into_inner())
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/instance", get(instance))
        .route("/network", get(network))
        .route("/plan/validate", post(validate))
        .route("/stages/run", post(run))
        .route("/stages/advance", post(advance))
        .route("/jobs/{id}", get(job))
        .route("/jobs/{id}/results", get(results))
        .route("/whatif", post(whatif))
        .with_state(state)
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

fn invalid(violations: Vec<Violation>) -> Response {
    let list: Vec<_> = violations.iter().map(|v| json!({ "kind": v.kind, "intervention": v.intervention, "message": v.message })).collect();
    (StatusCode::UNPROCESSABLE_ENTITY, Json(json!({ "error": "plan is invalid", "violations": list }))).into_response()
}

#[derive(Serialize)]
struct InstanceView {
    summary: InstanceSummary,
    current_year: i32,
    revision: u64,
    stages: Vec<CommittedStage>,
}

async fn instance(State(app): State<AppState>) -> Json<InstanceView> {
    let g = app.lock();
    Json(InstanceView {
        summary: g.instance.summary(),
        current_year: g.state.year,
        revision: g.revision,
        stages: g.committed.clone(),
    })
}

async fn network(State(app): State<AppState>) -> Response {
    let g = app.lock();
    let date = chrono::NaiveDate::from_ymd_opt(g.state.year, 1, 1).expect("valid year");
    Json(json!({ "date": date, "network": g.state.visible_network(date) })).into_response()
}

#[derive(Serialize)]
struct ValidationView {
    valid: bool,
    violations: Vec<Violation>,
}

async fn validate(State(app): State<AppState>, Json(plan): Json<Masterplan>) -> Json<ValidationView> {
    let g = app.lock();
    let violations = validate_plan(&plan, &g.instance, &g.state);
    Json(ValidationView { valid: violations.is_empty(), violations })
}

#[derive(Debug, Deserialize)]
pub struct RunRequest {
    pub plan: Masterplan,
    #[serde(default = "default_mode")]
    pub mode: SimMode,
    #[serde(default)]
    pub years: Option<u32>,
}

fn default_mode() -> SimMode {
    SimMode::Representative
}

async fn run(State(app): State<AppState>, Json(req): Json<RunRequest>) -> Response {
    let (id, instance, trace, state, cfg) = {
        let mut g = app.lock();
        let violations = validate_plan(&req.plan, &g.instance, &g.state);
        if !violations.is_empty() {
            return invalid(violations);
        }
        let cfg = RunConfig { mode: req.mode, years: req.years.unwrap_or(aqueduct_core::engine::STAGE_YEARS), ..Default::default() };
        if g.state.year + cfg.years as i32 > g.trace.end_year() {
            return error(StatusCode::UNPROCESSABLE_ENTITY, format!("no scenario data beyond {}", g.trace.end_year()));
        }
        let id = g.next_job;
        g.next_job += 1;
        let revision = g.revision;
        g.jobs.insert(
            id,
            Job { status: JobStatus::Running, progress: None, base_revision: revision, plan: req.plan.clone(), output: None, error: None },
        );
        (id, g.instance.clone(), g.trace.clone(), g.state.clone(), cfg)
    };
    let worker = app.clone();
    tokio::task::spawn_blocking(move || {
        let plan = worker.lock().jobs[&id].plan.clone();
        let progress_app = worker.clone();
        let mut progress = move |p: Progress| {
            if let Some(j) = progress_app.lock().jobs.get_mut(&id) {
                j.progress = Some(p);
            }
        };
        let result = run_stage(&instance, state, &plan, &trace, &cfg, &mut progress);
        let mut g = worker.lock();
        let job = g.jobs.get_mut(&id).expect("job registered");
        match result {
            Ok(out) => {
                job.status = JobStatus::Done;
                job.output = Some(Arc::new(out));
            }
            Err(e) => {
                job.status = JobStatus::Failed;
                job.error = Some(e.to_string());
            }
        }
    });
    (StatusCode::ACCEPTED, Json(json!({ "job_id": id }))).into_response()
}

#[derive(Serialize)]
struct JobView {
    id: u64,
    status: JobStatus,
    progress: Option<Progress>,
    base_revision: u64,
    error: Option<String>,
}

async fn job(State(app): State<AppState>, Path(id): Path<u64>) -> Response {
    let g = app.lock();
    match g.jobs.get(&id) {
        None => error(StatusCode::NOT_FOUND, format!("no job {id}")),
        Some(j) => Json(JobView { id, status: j.status, progress: j.progress, base_revision: j.base_revision, error: j.error.clone() })
            .into_response(),
    }
}

/// Result payload of a finished stage run.
#[derive(Serialize)]
pub struct StageResults<'a> {
    pub start_year: i32,
    pub end_year: i32,
    pub kpi: &'a KpiReport,
    pub ledgers: &'a [LedgerYear],
    pub municipalities: &'a [MuniYear],
    pub sources: &'a [SourceYear],
    pub events: &'a [EventRecord],
    pub nonconverged: usize,
}

impl<'a> From<&'a RunOutput> for StageResults<'a> {
    fn from(o: &'a RunOutput) -> Self {
        Self {
            start_year: o.start_year,
            end_year: o.end_year,
            kpi: &o.kpi,
            ledgers: &o.ledgers,
            municipalities: &o.muni_years,
            sources: &o.source_years,
            events: &o.events,
            nonconverged: o.nonconverged,
        }
    }
}

async fn results(State(app): State<AppState>, Path(id): Path<u64>) -> Response {
    let g = app.lock();
    let Some(j) = g.jobs.get(&id) else { return error(StatusCode::NOT_FOUND, format!("no job {id}")) };
    match (&j.status, &j.output) {
        (JobStatus::Done, Some(out)) => Json(StageResults::from(out.as_ref())).into_response(),
        (JobStatus::Failed, _) => error(StatusCode::UNPROCESSABLE_ENTITY, j.error.clone().unwrap_or_default()),
        _ => error(StatusCode::CONFLICT, format!("job {id} is still running")),
    }
}

#[derive(Debug, Deserialize)]
pub struct AdvanceRequest {
    pub job_id: u64,
}

async fn advance(State(app): State<AppState>, Json(req): Json<AdvanceRequest>) -> Response {
    let mut g = app.lock();
    let revision = g.revision;
    let Some(j) = g.jobs.get(&req.job_id) else { return error(StatusCode::NOT_FOUND, format!("no job {}", req.job_id)) };
    if j.base_revision != revision {
        return error(
            StatusCode::CONFLICT,
            format!("job {} ran from revision {} but the committed state is at revision {revision}", req.job_id, j.base_revision),
        );
    }
    let Some(out) = j.output.clone() else {
        return error(StatusCode::CONFLICT, format!("job {} has no result to commit", req.job_id));
    };
    let plan = j.plan.name.clone();
    g.state = out.final_state.clone();
    g.history = out.history.clone();
    g.revision += 1;
    g.committed.push(CommittedStage { start_year: out.start_year, end_year: out.end_year, plan, kpi: out.kpi.clone() });
    Json(json!({ "revision": g.revision, "current_year": g.state.year, "history": g.history })).into_response()
}

async fn whatif(State(app): State<AppState>, Json(req): Json<RunRequest>) -> Response {
    let (instance, trace, state) = {
        let g = app.lock();
        let violations = validate_plan(&req.plan, &g.instance, &g.state);
        if !violations.is_empty() {
            return invalid(violations);
        }
        (g.instance.clone(), g.trace.clone(), g.state.clone())
    };
    let cfg = RunConfig {
        mode: req.mode,
        years: req.years.unwrap_or(aqueduct_core::engine::STAGE_YEARS),
        record_hours: false,
        ..Default::default()
    };
    let plan = req.plan;
    let joined = tokio::task::spawn_blocking(move || run_stage(&instance, state, &plan, &trace, &cfg, &mut |_| {})).await;
    match joined {
        Ok(Ok(out)) => Json(json!({ "kpi": out.kpi, "ledgers": out.ledgers })).into_response(),
        Ok(Err(e)) => error(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}
