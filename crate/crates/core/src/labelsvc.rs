//! HTTP labeling service for human labelers.
//!
//! A round published by [`HumanLabeler`] becomes a queue of tasks ordered by
//! descending confidence. Labelers lease tasks one at a time and post a
//! `tp`/`fp` verdict, which is appended to the shared decision log. The
//! bootstrap loop resumes once every task of the round has a decision.
//!
//! | method | path | result |
//! |---|---|---|
//! | GET | `/api/round` | round metadata, 409 without an active round |
//! | GET | `/api/tasks/next?labeler=ID` | next task, 204 when none remain |
//! | POST | `/api/tasks/{id}/decision` | `{"verdict": "tp"|"fp", "labeler": ID}` |
//! | GET | `/api/categories/{i}/exemplars` | exemplar samples of a category |

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::bootstrap::{
    now_timestamp, AppendOutcome, DecisionRecord, Labeler, RoundContext, SharedDecisionLog, Verdict,
};
use crate::embednet::Sample;
use crate::{Error, Result};

pub const DEFAULT_LEASE: Duration = Duration::from_secs(600);
pub const DEFAULT_PORT: u16 = 8080;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePayload {
    pub id: String,
    pub features: Vec<f64>,
}

impl From<&Sample> for SamplePayload {
    fn from(s: &Sample) -> Self {
        Self { id: s.id.clone(), features: s.features.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelTask {
    pub task_id: String,
    pub round: usize,
    pub candidate: SamplePayload,
    pub display_url: Option<String>,
    pub assigned_category: usize,
    pub assigned_category_name: String,
    pub confidence: f64,
    pub exemplar_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundInfo {
    pub round: usize,
    pub total: usize,
    pub pending: usize,
    pub labeled: usize,
    pub leased: usize,
    pub category_names: Vec<String>,
}

#[derive(Debug)]
struct TaskSlot {
    lease: Option<(String, Instant)>,
    decided: bool,
}

#[derive(Debug)]
struct ActiveRound {
    ctx: RoundContext,
    slots: Vec<TaskSlot>,
    by_id: HashMap<String, usize>,
}

impl ActiveRound {
    fn labeled(&self) -> usize {
        self.slots.iter().filter(|s| s.decided).count()
    }

    fn task(&self, i: usize) -> LabelTask {
        let r = &self.ctx.requests[i];
        LabelTask {
            task_id: r.candidate.id.clone(),
            round: self.ctx.round,
            candidate: (&r.candidate).into(),
            display_url: None,
            assigned_category: r.assigned,
            assigned_category_name: self.ctx.category_names.get(r.assigned).cloned().unwrap_or_default(),
            confidence: r.confidence,
            exemplar_ids: r.exemplars.iter().map(|e| e.id.clone()).collect(),
        }
    }
}

#[derive(Debug)]
struct Shared {
    queue: Mutex<Option<ActiveRound>>,
    drained: Condvar,
    log: SharedDecisionLog,
    lease: Duration,
}

/// Queue state shared between the HTTP handlers and the bootstrap loop.
#[derive(Debug, Clone)]
pub struct LabelService {
    shared: Arc<Shared>,
}

impl LabelService {
    pub fn new(log: SharedDecisionLog, lease: Duration) -> Self {
        Self { shared: Arc::new(Shared { queue: Mutex::new(None), drained: Condvar::new(), log, lease }) }
    }

    fn queue(&self) -> MutexGuard<'_, Option<ActiveRound>> {
        self.shared.queue.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Makes a round available. Requests already decided in the log count
    /// as labeled.
    pub fn publish(&self, ctx: RoundContext) -> Result<()> {
        let log = self.shared.log.lock().map_err(|_| Error::State("decision log poisoned".into()))?;
        let mut by_id = HashMap::new();
        let mut slots = Vec::with_capacity(ctx.requests.len());
        let mut order: Vec<usize> = (0..ctx.requests.len()).collect();
        order.sort_by(|&a, &b| {
            let (ra, rb) = (&ctx.requests[a], &ctx.requests[b]);
            rb.confidence.total_cmp(&ra.confidence).then_with(|| ra.candidate.id.cmp(&rb.candidate.id))
        });
        let requests: Vec<_> = order.into_iter().map(|i| ctx.requests[i].clone()).collect();
        for (i, r) in requests.iter().enumerate() {
            if by_id.insert(r.candidate.id.clone(), i).is_some() {
                return Err(Error::input(format!("duplicate task id {}", r.candidate.id)));
            }
            slots.push(TaskSlot { lease: None, decided: log.get(ctx.round, &r.candidate.id).is_some() });
        }
        drop(log);
        *self.queue() = Some(ActiveRound { ctx: RoundContext { requests, ..ctx }, slots, by_id });
        self.shared.drained.notify_all();
        Ok(())
    }

    pub fn close_round(&self) {
        *self.queue() = None;
    }

    pub fn round_info(&self) -> Option<RoundInfo> {
        let q = self.queue();
        let r = q.as_ref()?;
        let now = Instant::now();
        let labeled = r.labeled();
        Some(RoundInfo {
            round: r.ctx.round,
            total: r.slots.len(),
            pending: r.slots.len() - labeled,
            labeled,
            leased: r.slots.iter().filter(|s| !s.decided && s.lease.as_ref().is_some_and(|l| l.1 > now)).count(),
            category_names: r.ctx.category_names.clone(),
        })
    }

    /// Blocks until every task of the active round has a decision.
    pub fn wait_drained(&self) {
        let mut q = self.queue();
        while q.as_ref().is_some_and(|r| r.labeled() < r.slots.len()) {
            q = self.shared.drained.wait(q).unwrap_or_else(|e| e.into_inner());
        }
    }

    pub fn next_task(&self, labeler: &str) -> Option<LabelTask> {
        let mut q = self.queue();
        let r = q.as_mut()?;
        let now = Instant::now();
        let i = r.slots.iter().position(|s| !s.decided && s.lease.as_ref().is_none_or(|l| l.1 <= now))?;
        r.slots[i].lease = Some((labeler.to_string(), now + self.shared.lease));
        Some(r.task(i))
    }

    pub fn decide(&self, task_id: &str, verdict: Verdict, labeler: &str) -> DecideOutcome {
        let mut q = self.queue();
        let Some(r) = q.as_mut() else { return DecideOutcome::NoRound };
        let Some(&i) = r.by_id.get(task_id) else { return DecideOutcome::UnknownTask };
        let now = Instant::now();
        if !r.slots[i].decided {
            if let Some((holder, until)) = &r.slots[i].lease {
                if holder != labeler && *until > now {
                    return DecideOutcome::LeasedElsewhere;
                }
            }
        }
        let req = &r.ctx.requests[i];
        let record = DecisionRecord {
            round: r.ctx.round,
            candidate_id: req.candidate.id.clone(),
            assigned_category: req.assigned,
            confidence: req.confidence,
            decision: verdict,
            labeler: labeler.to_string(),
            timestamp: now_timestamp(),
        };
        let outcome = match self.shared.log.lock() {
            Ok(mut log) => log.append(record),
            Err(_) => Err(Error::State("decision log poisoned".into())),
        };
        match outcome {
            Ok(AppendOutcome::Recorded) => {
                r.slots[i].decided = true;
                r.slots[i].lease = None;
                let done = r.labeled() == r.slots.len();
                drop(q);
                if done {
                    self.shared.drained.notify_all();
                }
                DecideOutcome::Recorded
            }
            Ok(AppendOutcome::Duplicate(v)) => {
                r.slots[i].decided = true;
                DecideOutcome::Duplicate(v)
            }
            Err(e) => DecideOutcome::Failed(e.to_string()),
        }
    }

    pub fn category_exemplars(&self, category: usize) -> Option<(String, Vec<Sample>)> {
        let q = self.queue();
        let r = q.as_ref()?;
        let ex = r.ctx.category_exemplars.get(category)?;
        Some((r.ctx.category_names.get(category).cloned().unwrap_or_default(), ex.clone()))
    }

    pub fn router(&self, static_dir: Option<PathBuf>) -> Router {
        let api = Router::new()
            .route("/api/round", get(get_round))
            .route("/api/tasks/next", get(get_next))
            .route("/api/tasks/{id}/decision", post(post_decision))
            .route("/api/categories/{i}/exemplars", get(get_exemplars))
            .with_state(self.clone());
        match static_dir {
            Some(dir) => api.fallback_service(tower_http::services::ServeDir::new(dir)),
            None => api,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DecideOutcome {
    Recorded,
    Duplicate(Verdict),
    UnknownTask,
    NoRound,
    LeasedElsewhere,
    Failed(String),
}

fn error(status: StatusCode, msg: impl Into<String>) -> Response {
    (status, Json(json!({ "error": msg.into() }))).into_response()
}

async fn get_round(State(svc): State<LabelService>) -> Response {
    match svc.round_info() {
        Some(info) => Json(info).into_response(),
        None => error(StatusCode::CONFLICT, "no active round"),
    }
}

async fn get_next(State(svc): State<LabelService>, Query(q): Query<HashMap<String, String>>) -> Response {
    let Some(labeler) = q.get("labeler").filter(|l| !l.is_empty()) else {
        return error(StatusCode::BAD_REQUEST, "missing labeler id");
    };
    if svc.round_info().is_none() {
        return error(StatusCode::CONFLICT, "no active round");
    }
    match svc.next_task(labeler) {
        Some(task) => Json(task).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    }
}

async fn post_decision(State(svc): State<LabelService>, Path(id): Path<String>, body: String) -> Response {
    let Ok(body) = serde_json::from_str::<Value>(&body) else {
        return error(StatusCode::BAD_REQUEST, "body must be a JSON object");
    };
    let Some(verdict) = body.get("verdict").and_then(Value::as_str).and_then(Verdict::parse) else {
        return error(StatusCode::BAD_REQUEST, "verdict must be \"tp\" or \"fp\"");
    };
    let Some(labeler) = body.get("labeler").and_then(Value::as_str).filter(|l| !l.is_empty()) else {
        return error(StatusCode::BAD_REQUEST, "missing labeler id");
    };
    match svc.decide(&id, verdict, labeler) {
        DecideOutcome::Recorded => Json(json!({ "task_id": id, "verdict": verdict })).into_response(),
        DecideOutcome::Duplicate(v) => (
            StatusCode::CONFLICT,
            Json(json!({ "error": "decision already recorded", "task_id": id, "verdict": v })),
        )
            .into_response(),
        DecideOutcome::UnknownTask => error(StatusCode::NOT_FOUND, format!("unknown task {id}")),
        DecideOutcome::NoRound => error(StatusCode::CONFLICT, "no active round"),
        DecideOutcome::LeasedElsewhere => error(StatusCode::CONFLICT, "task is leased to another labeler"),
        DecideOutcome::Failed(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e),
    }
}

async fn get_exemplars(State(svc): State<LabelService>, Path(i): Path<String>) -> Response {
    let found = i.parse::<usize>().ok().and_then(|c| svc.category_exemplars(c).map(|x| (c, x)));
    match found {
        Some((c, (name, ex))) => Json(json!({
            "category": c,
            "name": name,
            "exemplars": ex.iter().map(SamplePayload::from).collect::<Vec<_>>(),
        }))
        .into_response(),
        None => error(StatusCode::NOT_FOUND, format!("no category {i}")),
    }
}

/// Binds `addr` and serves until the process exits.
pub async fn serve(svc: LabelService, addr: SocketAddr, static_dir: Option<PathBuf>) -> Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "labeling service listening");
    axum::serve(listener, svc.router(static_dir)).await?;
    Ok(())
}

/// Labeler that hands each round to the HTTP queue and waits for humans.
#[derive(Debug, Clone)]
pub struct HumanLabeler {
    service: LabelService,
}

impl HumanLabeler {
    pub fn new(service: LabelService) -> Self {
        Self { service }
    }
}

impl Labeler for HumanLabeler {
    fn label(&mut self, ctx: &RoundContext, _log: &SharedDecisionLog) -> Result<()> {
        self.service.publish(ctx.clone())?;
        self.service.wait_drained();
        self.service.close_round();
        Ok(())
    }
}
