//! Review service: serves filtered variation groups to human reviewers,
//! records their verdicts in an append-only log and exports the accepted
//! test set.
//!
//! Routes:
//!
//! | method | path | |
//! |---|---|---|
//! | GET | `/api/groups?status=pending\|reviewed&page=&per_page=` | paginated groups |
//! | GET | `/api/samples/{id}` | one sample with its effective verdict |
//! | GET | `/api/samples/{id}/image`, `/mask`, `/source` | PNG bytes |
//! | POST | `/api/samples/{id}/decision` | `{verdict, reviewer?, reason?}`, 204 |
//! | GET | `/api/export?only=accepted` | curated JSONL |
//! | GET | `/api/stats` | pass rates and review progress |
//!
//! Anything else falls through to the static UI bundle when one is set.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::Utc;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tower_http::services::ServeDir;

use negmine_core::config::FilterConfig;
use negmine_core::curation::{self, DecisionLog, ReviewDecision, SizeDistribution, Verdict};
use negmine_core::manifest::{self, ManifestError};
use negmine_core::model::VariationGroup;
use negmine_core::GeneratedSample;

/// Header carrying the reviewer name when the body omits it.
pub const REVIEWER_HEADER: &str = "x-reviewer";
pub const DEFAULT_PER_PAGE: usize = 20;
pub const MAX_PER_PAGE: usize = 500;

#[derive(Debug, Error)]
pub enum ReviewError {
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        #[source]
        source: std::io::Error,
    },
    #[error("server: {0}")]
    Server(#[source] std::io::Error),
}

struct Ledger {
    log: DecisionLog,
    records: RwLock<Vec<ReviewDecision>>,
}

pub struct AppState {
    samples: Vec<GeneratedSample>,
    index: HashMap<String, usize>,
    /// (source pair, tag) groups as sample indices, in manifest order.
    groups: Vec<Vec<usize>>,
    base_dir: PathBuf,
    ledger: Ledger,
    ui_dir: Option<PathBuf>,
    filter: FilterConfig,
}

impl AppState {
    /// Load a filtered manifest and replay the decision log next to it.
    pub fn open(manifest_path: &Path, log_path: &Path) -> Result<Self, ReviewError> {
        let samples = manifest::load_manifest(manifest_path)?;
        Self::new(samples, manifest::base_dir(manifest_path), log_path)
    }

    pub fn new(samples: Vec<GeneratedSample>, base_dir: PathBuf, log_path: &Path) -> Result<Self, ReviewError> {
        let log = DecisionLog::open(log_path)?;
        let records = log.snapshot()?;
        let index = samples.iter().enumerate().map(|(i, s)| (s.id.clone(), i)).collect::<HashMap<_, _>>();
        let groups = VariationGroup::group_samples(samples.clone())
            .into_iter()
            .map(|g| g.samples.iter().map(|s| index[&s.id]).collect())
            .collect();
        Ok(Self {
            samples,
            index,
            groups,
            base_dir,
            ledger: Ledger {
                log,
                records: RwLock::new(records),
            },
            ui_dir: None,
            filter: FilterConfig::default(),
        })
    }

    /// Serve a built UI bundle from `dir` for every non-API path.
    pub fn with_ui_dir(mut self, dir: Option<PathBuf>) -> Self {
        self.ui_dir = dir;
        self
    }

    /// Thresholds used for the per-gate rates in `/api/stats`.
    pub fn with_filter_config(mut self, cfg: FilterConfig) -> Self {
        self.filter = cfg;
        self
    }

    fn records(&self) -> Vec<ReviewDecision> {
        self.ledger.records.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    fn append(&self, decision: ReviewDecision) -> Result<(), ManifestError> {
        let mut records = self.ledger.records.write().unwrap_or_else(|e| e.into_inner());
        self.ledger.log.append(&decision)?;
        records.push(decision);
        Ok(())
    }

    /// Curated export from one consistent view of the log.
    pub fn export(&self) -> curation::CuratedExport {
        curation::export_curated(&self.samples, &self.records())
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SampleView {
    #[serde(flatten)]
    pub sample: GeneratedSample,
    pub image_url: String,
    pub mask_url: String,
    pub source_image_url: String,
    pub reviewable: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decision: Option<ReviewDecision>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GroupView {
    pub source_pair_id: String,
    pub tag: String,
    pub source_caption: String,
    pub source_image_url: String,
    pub samples: Vec<SampleView>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GroupPage {
    pub status: String,
    pub page: usize,
    pub per_page: usize,
    pub total: usize,
    pub groups: Vec<GroupView>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FilterStats {
    pub samples: usize,
    pub groups: usize,
    pub scored: usize,
    pub passed: usize,
    pub pass_rate: f64,
    pub area_pass_rate: f64,
    pub itm_pass_rate: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ReviewStats {
    pub reviewable: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub pending: usize,
    pub decisions_logged: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Stats {
    pub filter: FilterStats,
    pub review: ReviewStats,
    pub distribution: SizeDistribution,
    pub distribution_text: String,
}

fn url_for(id: &str, what: &str) -> String {
    format!("/api/samples/{id}/{what}")
}

fn view(sample: &GeneratedSample, effective: &HashMap<String, ReviewDecision>) -> SampleView {
    let mut sample = sample.clone();
    let reviewable = curation::is_reviewable(&sample);
    curation::apply_decisions(std::slice::from_mut(&mut sample), effective);
    SampleView {
        image_url: url_for(&sample.id, "image"),
        mask_url: url_for(&sample.id, "mask"),
        source_image_url: url_for(&sample.id, "source"),
        decision: effective.get(&sample.id).filter(|_| reviewable).cloned(),
        reviewable,
        sample,
    }
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(serde_json::json!({ "error": message.into() }))).into_response()
}

#[derive(Debug, Deserialize)]
struct GroupQuery {
    status: Option<String>,
    page: Option<usize>,
    per_page: Option<usize>,
}

async fn list_groups(State(state): State<Arc<AppState>>, Query(q): Query<GroupQuery>) -> Response {
    let status = q.status.unwrap_or_else(|| "pending".to_string());
    if status != "pending" && status != "reviewed" {
        return error(StatusCode::BAD_REQUEST, format!("status must be pending or reviewed, got `{status}`"));
    }
    let per_page = q.per_page.unwrap_or(DEFAULT_PER_PAGE).clamp(1, MAX_PER_PAGE);
    let page = q.page.unwrap_or(1).max(1);
    let effective = curation::effective_decisions(&state.records());
    let selected: Vec<&Vec<usize>> = state
        .groups
        .iter()
        .filter(|members| {
            let reviewable: Vec<&GeneratedSample> = members
                .iter()
                .map(|&i| &state.samples[i])
                .filter(|s| curation::is_reviewable(s))
                .collect();
            if reviewable.is_empty() {
                return false;
            }
            let open = reviewable.iter().any(|s| !effective.contains_key(&s.id));
            open == (status == "pending")
        })
        .collect();
    let total = selected.len();
    let groups = selected
        .into_iter()
        .skip((page - 1) * per_page)
        .take(per_page)
        .map(|members| {
            let first = &state.samples[members[0]];
            GroupView {
                source_pair_id: first.source_pair_id.clone(),
                tag: first.tag.label.clone(),
                source_caption: first.source_caption.clone(),
                source_image_url: url_for(&first.id, "source"),
                samples: members.iter().map(|&i| view(&state.samples[i], &effective)).collect(),
            }
        })
        .collect();
    Json(GroupPage {
        status,
        page,
        per_page,
        total,
        groups,
    })
    .into_response()
}

fn find<'a>(state: &'a AppState, id: &str) -> Result<&'a GeneratedSample, Response> {
    state
        .index
        .get(id)
        .map(|&i| &state.samples[i])
        .ok_or_else(|| error(StatusCode::NOT_FOUND, format!("no sample `{id}`")))
}

async fn get_sample(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Response {
    match find(&state, &id) {
        Ok(s) => {
            let effective = curation::effective_decisions(&state.records());
            Json(view(s, &effective)).into_response()
        }
        Err(r) => r,
    }
}

async fn png(path: PathBuf) -> Response {
    match tokio::fs::read(&path).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, "image/png")], bytes).into_response(),
        Err(e) => error(StatusCode::NOT_FOUND, format!("{}: {e}", path.display())),
    }
}

async fn sample_file(State(state): State<Arc<AppState>>, UrlPath((id, what)): UrlPath<(String, String)>) -> Response {
    let s = match find(&state, &id) {
        Ok(s) => s,
        Err(r) => return r,
    };
    let rel = match what.as_str() {
        "image" => &s.image.path,
        "mask" => &s.mask.path,
        "source" => &s.source_image.path,
        other => return error(StatusCode::NOT_FOUND, format!("unknown asset `{other}`")),
    };
    png(manifest::resolve(&state.base_dir, rel)).await
}

#[derive(Debug, Deserialize)]
struct DecisionBody {
    verdict: Verdict,
    #[serde(default)]
    reviewer: Option<String>,
    #[serde(default)]
    reason: Option<String>,
}

async fn post_decision(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    headers: HeaderMap,
    Json(body): Json<DecisionBody>,
) -> Response {
    let sample = match find(&state, &id) {
        Ok(s) => s,
        Err(r) => return r,
    };
    if !curation::is_reviewable(sample) {
        return error(
            StatusCode::CONFLICT,
            format!("sample `{id}` did not pass filtering (status {})", sample.status),
        );
    }
    let reviewer = body
        .reviewer
        .filter(|r| !r.trim().is_empty())
        .or_else(|| {
            headers
                .get(REVIEWER_HEADER)
                .and_then(|v| v.to_str().ok())
                .map(str::to_string)
                .filter(|r| !r.trim().is_empty())
        });
    let Some(reviewer) = reviewer else {
        return error(StatusCode::BAD_REQUEST, format!("reviewer missing from body and `{REVIEWER_HEADER}` header"));
    };
    let decision = ReviewDecision {
        sample_id: id,
        verdict: body.verdict,
        reviewer,
        timestamp: Utc::now(),
        reason: body.reason.filter(|r| !r.trim().is_empty()),
    };
    let state = state.clone();
    match tokio::task::spawn_blocking(move || state.append(decision)).await {
        Ok(Ok(())) => StatusCode::NO_CONTENT.into_response(),
        Ok(Err(e)) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

#[derive(Debug, Deserialize)]
struct ExportQuery {
    only: Option<String>,
}

async fn export(State(state): State<Arc<AppState>>, Query(q): Query<ExportQuery>) -> Response {
    if let Some(only) = q.only.as_deref().filter(|o| *o != "accepted") {
        return error(StatusCode::BAD_REQUEST, format!("only=accepted is supported, got `{only}`"));
    }
    let curated = state.export();
    let body = match curated.to_jsonl() {
        Ok(b) => b,
        Err(e) => return error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    };
    let distribution = serde_json::to_string(&curated.distribution).unwrap_or_default();
    let mut resp = ([(header::CONTENT_TYPE, "application/x-ndjson")], body).into_response();
    let h = resp.headers_mut();
    h.insert(
        header::CONTENT_DISPOSITION,
        HeaderValue::from_static("attachment; filename=\"curated.jsonl\""),
    );
    if let Ok(v) = HeaderValue::from_str(&distribution) {
        h.insert("x-size-distribution", v);
    }
    resp
}

fn rate(n: usize, d: usize) -> f64 {
    if d == 0 {
        0.0
    } else {
        n as f64 / d as f64
    }
}

async fn stats(State(state): State<Arc<AppState>>) -> Response {
    let records = state.records();
    let effective = curation::effective_decisions(&records);
    let scored: Vec<_> = state.samples.iter().filter_map(|s| s.scores.as_ref()).collect();
    let passed = scored.iter().filter(|s| s.passed).count();
    let reviewable: Vec<&GeneratedSample> = state.samples.iter().filter(|s| curation::is_reviewable(s)).collect();
    let verdict = |v: Verdict| {
        reviewable
            .iter()
            .filter(|s| effective.get(&s.id).is_some_and(|d| d.verdict == v))
            .count()
    };
    let (accepted, rejected) = (verdict(Verdict::Accept), verdict(Verdict::Reject));
    let curated = curation::export_curated(&state.samples, &records);
    let cfg = &state.filter;
    let itm_passed = scored.iter().filter(|s| s.itm_variation > cfg.itm_threshold).count();
    let area_passed = scored.iter().filter(|s| s.area_score_pct > cfg.area_threshold).count();
    Json(Stats {
        filter: FilterStats {
            samples: state.samples.len(),
            groups: state.groups.len(),
            scored: scored.len(),
            passed,
            pass_rate: rate(passed, scored.len()),
            area_pass_rate: rate(area_passed, scored.len()),
            itm_pass_rate: rate(itm_passed, scored.len()),
        },
        review: ReviewStats {
            reviewable: reviewable.len(),
            accepted,
            rejected,
            pending: reviewable.len() - accepted - rejected,
            decisions_logged: records.len(),
        },
        distribution_text: curated.distribution.describe(),
        distribution: curated.distribution,
    })
    .into_response()
}

pub fn router(state: Arc<AppState>) -> Router {
    let ui = state.ui_dir.clone();
    let api = Router::new()
        .route("/api/groups", get(list_groups))
        .route("/api/samples/{id}", get(get_sample))
        .route("/api/samples/{id}/decision", post(post_decision))
        .route("/api/samples/{id}/{asset}", get(sample_file))
        .route("/api/export", get(export))
        .route("/api/stats", get(stats))
        .with_state(state);
    match ui {
        Some(dir) => api.fallback_service(ServeDir::new(dir).append_index_html_on_directories(true)),
        None => api,
    }
}

/// Bind `addr` and serve until the task is dropped.
pub async fn serve(state: AppState, addr: SocketAddr) -> Result<(), ReviewError> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|source| ReviewError::Bind { addr, source })?;
    log::info!("review service on http://{}", listener.local_addr().map_err(ReviewError::Server)?);
    axum::serve(listener, router(Arc::new(state)))
        .await
        .map_err(ReviewError::Server)
}
