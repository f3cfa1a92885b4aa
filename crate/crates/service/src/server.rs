//! HTTP face of the annotation loop.
//!
//! Each run is a [`Session`] wrapping a [`LoopDriver`]. All mutations go
//! through the session's mutex, so label commits and phase changes are
//! serialized; training runs on the blocking pool while the session reports
//! `training` and rejects labels.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use bayesrank::active::RoundRecord;
use bayesrank::bayes::ScorePosterior;
use bayesrank::ranker::{RelativeLabel, RelativePair};
use bayesrank::{Dataset, LoopDriver, Progress, SampleId, Source};
use log::{error, info};
use serde::{Deserialize, Serialize};
use tokio::sync::Mutex;
use tower_http::services::ServeDir;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Collecting,
    Training,
    Done,
}

/// One live annotation run.
pub struct Session {
    run_id: String,
    phase: Phase,
    /// Absent while a training round owns it.
    driver: Option<LoopDriver<'static>>,
    dataset: &'static Dataset,
    round: usize,
    training_size: usize,
    committed_pairs: usize,
    /// Pending-pair counts of every round so far, to tell stale ids from unknown ones.
    pairs_per_round: Vec<usize>,
    last_metrics: Option<RoundRecord>,
    scores: Vec<ScorePosterior>,
    error: Option<String>,
}

impl Session {
    pub fn new(run_id: impl Into<String>, driver: LoopDriver<'static>, dataset: &'static Dataset) -> Self {
        Session {
            run_id: run_id.into(),
            phase: Phase::Collecting,
            round: driver.round(),
            training_size: driver.training_size(),
            committed_pairs: driver.state().labeled.len(),
            pairs_per_round: vec![driver.pending().len()],
            last_metrics: None,
            scores: Vec::new(),
            error: None,
            dataset,
            driver: Some(driver),
        }
    }

    fn status(&self) -> StatusBody {
        let submitted = self
            .driver
            .as_ref()
            .map_or(0, |d| d.pending().len() - d.outstanding());
        let labeled_count = self.committed_pairs + submitted;
        StatusBody {
            run_id: self.run_id.clone(),
            round: self.round,
            phase: self.phase,
            labeled_count,
            pending: self.driver.as_ref().map_or(0, |d| d.outstanding()),
            labeling_ratio: labeled_count as f64 / self.training_size as f64,
            last_metrics: self.last_metrics.clone(),
            error: self.error.clone(),
        }
    }
}

pub type Sessions = Arc<HashMap<String, Arc<Mutex<Session>>>>;

#[derive(Debug, Serialize, Deserialize)]
pub struct StatusBody {
    pub run_id: String,
    pub round: usize,
    pub phase: Phase,
    pub labeled_count: usize,
    pub pending: usize,
    pub labeling_ratio: f64,
    pub last_metrics: Option<RoundRecord>,
    pub error: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SampleCard {
    pub id: String,
    pub group: String,
    pub features: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PairBody {
    pub pair_id: String,
    pub round: usize,
    pub left: SampleCard,
    pub right: SampleCard,
    /// Answered and total pairs of the current round.
    pub answered: usize,
    pub total: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LabelRequest {
    pub pair_id: String,
    pub label: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LabelAck {
    pub pair_id: String,
    pub label: f64,
    pub phase: Phase,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

fn reject(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(ErrorBody { error: message.into() })).into_response()
}

fn pair_id(round: usize, slot: usize) -> String {
    format!("{round}-{slot}")
}

fn parse_pair_id(id: &str) -> Option<(usize, usize)> {
    let (round, slot) = id.split_once('-')?;
    Some((round.parse().ok()?, slot.parse().ok()?))
}

fn card(dataset: &Dataset, id: SampleId) -> SampleCard {
    let s = dataset.sample(id);
    SampleCard { id: s.name.clone(), group: s.group.clone(), features: s.features.clone() }
}

async fn session(sessions: &Sessions, run_id: &str) -> Result<Arc<Mutex<Session>>, Response> {
    sessions
        .get(run_id)
        .cloned()
        .ok_or_else(|| reject(StatusCode::NOT_FOUND, format!("unknown run {run_id:?}")))
}

async fn next_pair(State(sessions): State<Sessions>, Path(run_id): Path<String>) -> Response {
    let session = match session(&sessions, &run_id).await {
        Ok(s) => s,
        Err(r) => return r,
    };
    let s = session.lock().await;
    match s.phase {
        Phase::Training => return reject(StatusCode::CONFLICT, "a training round is running"),
        Phase::Done => return StatusCode::NO_CONTENT.into_response(),
        Phase::Collecting => {}
    }
    let driver = s.driver.as_ref().expect("driver present while collecting");
    let Some(slot) = driver.next_unanswered() else {
        return StatusCode::NO_CONTENT.into_response();
    };
    let RelativePair { left, right } = driver.pending()[slot];
    let total = driver.pending().len();
    Json(PairBody {
        pair_id: pair_id(s.round, slot),
        round: s.round,
        left: card(s.dataset, left),
        right: card(s.dataset, right),
        answered: total - driver.outstanding(),
        total,
    })
    .into_response()
}

async fn post_label(
    State(sessions): State<Sessions>,
    Path(run_id): Path<String>,
    Json(req): Json<LabelRequest>,
) -> Response {
    let session = match session(&sessions, &run_id).await {
        Ok(s) => s,
        Err(r) => return r,
    };
    let mut s = session.lock().await;
    let Ok(label) = RelativeLabel::try_from(req.label) else {
        return reject(StatusCode::UNPROCESSABLE_ENTITY, format!("label {} is not one of 0, 0.5, 1", req.label));
    };
    let Some((round, slot)) = parse_pair_id(&req.pair_id) else {
        return reject(StatusCode::NOT_FOUND, format!("unknown pair {:?}", req.pair_id));
    };
    if s.pairs_per_round.get(round).is_none_or(|&n| slot >= n) {
        return reject(StatusCode::NOT_FOUND, format!("unknown pair {:?}", req.pair_id));
    }
    if round < s.round {
        return reject(StatusCode::CONFLICT, format!("pair {} is already labeled", req.pair_id));
    }
    match s.phase {
        Phase::Training => return reject(StatusCode::CONFLICT, "a training round is running"),
        Phase::Done => return reject(StatusCode::CONFLICT, "the run has finished"),
        Phase::Collecting => {}
    }
    let driver = s.driver.as_mut().expect("driver present while collecting");
    if driver.answer(slot).is_some() {
        return reject(StatusCode::CONFLICT, format!("pair {} is already labeled", req.pair_id));
    }
    if let Err(e) = driver.submit(slot, label, Source::Human) {
        return reject(StatusCode::UNPROCESSABLE_ENTITY, e.to_string());
    }
    if driver.outstanding() == 0 {
        let driver = s.driver.take().expect("driver present");
        // Every pending pair is answered and will be committed by training.
        s.committed_pairs += driver.pending().len();
        s.phase = Phase::Training;
        info!("run {}: round {} fully labeled; training", s.run_id, s.round);
        tokio::spawn(train(Arc::clone(&session), driver));
    }
    Json(LabelAck { pair_id: req.pair_id, label: req.label, phase: s.phase }).into_response()
}

/// Run one training round off the async executor and install the outcome.
async fn train(session: Arc<Mutex<Session>>, mut driver: LoopDriver<'static>) {
    let outcome = tokio::task::spawn_blocking(move || {
        let progress = driver.advance(None);
        (driver, progress)
    })
    .await;
    let mut s = session.lock().await;
    match outcome {
        Ok((driver, progress)) => {
            s.committed_pairs = driver.state().labeled.len();
            s.last_metrics = driver.state().metrics_by_round.last().cloned();
            s.scores = driver.state().pool_posteriors.clone();
            match progress {
                Ok(Progress::Collecting) => {
                    s.round = driver.round();
                    s.pairs_per_round.push(driver.pending().len());
                    s.phase = Phase::Collecting;
                }
                Ok(Progress::Done) => s.phase = Phase::Done,
                Err(e) => {
                    error!("run {}: training failed: {e}", s.run_id);
                    s.error = Some(e.to_string());
                    s.phase = Phase::Done;
                }
            }
            s.driver = Some(driver);
        }
        Err(e) => {
            error!("run {}: training task panicked: {e}", s.run_id);
            s.error = Some(format!("training task failed: {e}"));
            s.phase = Phase::Done;
        }
    }
}

async fn status(State(sessions): State<Sessions>, Path(run_id): Path<String>) -> Response {
    match session(&sessions, &run_id).await {
        Ok(s) => Json(s.lock().await.status()).into_response(),
        Err(r) => r,
    }
}

async fn scores(State(sessions): State<Sessions>, Path(run_id): Path<String>) -> Response {
    let session = match session(&sessions, &run_id).await {
        Ok(s) => s,
        Err(r) => return r,
    };
    let s = session.lock().await;
    let mut body = String::from("id,mean,variance\n");
    for p in &s.scores {
        let _ = writeln!(body, "{},{:e},{:e}", s.dataset.sample(p.sample).name, p.mean, p.variance);
    }
    ([(header::CONTENT_TYPE, "text/csv; charset=utf-8")], body).into_response()
}

/// The service router; `ui_dir`, when given, is served for every other path.
pub fn router(sessions: Sessions, ui_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/runs/{id}/next-pair", get(next_pair))
        .route("/runs/{id}/labels", post(post_label))
        .route("/runs/{id}/status", get(status))
        .route("/runs/{id}/scores", get(scores))
        .with_state(sessions);
    match ui_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// A single-session registry.
pub fn sessions(session: Session) -> Sessions {
    let id = session.run_id.clone();
    Arc::new(HashMap::from([(id, Arc::new(Mutex::new(session)))]))
}
