//! JSON HTTP API over a loaded index.

use std::collections::VecDeque;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};

use axum::extract::{DefaultBodyLimit, Multipart, Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

use pathsearch_core::ingest::decode_channel;
use pathsearch_core::model::{parse_metadata_row, LatentVector, Modality, SlideMetadata};
use pathsearch_core::pipeline::{project_2d, query_image, CorpusIndex, QueryOptions, QueryReport, ReportRow, Timings};
use pathsearch_core::voting::{Round, VoteCell};

use crate::persist::FORMAT_VERSION;

/// Vote matrices of this many recent reports stay retrievable.
pub const REPORT_CAPACITY: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct ServiceConfig {
    pub bind: SocketAddr,
    pub index_path: PathBuf,
    pub max_concurrent: usize,
    pub body_limit: usize,
}

impl ServiceConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.bind.port() == 0 {
            return Err("port must be in 1..=65535".into());
        }
        if self.max_concurrent == 0 || self.body_limit == 0 {
            return Err("max_concurrent and body_limit must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct VoteRecord {
    pub report_id: String,
    pub shape: [usize; 2],
    pub channels: Vec<usize>,
    pub votes: Vec<VoteCell>,
    pub rounds: Vec<Round>,
}

pub struct AppState {
    index: RwLock<Arc<CorpusIndex>>,
    reports: Mutex<(u64, VecDeque<VoteRecord>)>,
    permits: Semaphore,
}

impl AppState {
    pub fn new(index: CorpusIndex, max_concurrent: usize) -> Self {
        Self {
            index: RwLock::new(Arc::new(index)),
            reports: Mutex::new((0, VecDeque::new())),
            permits: Semaphore::new(max_concurrent.max(1)),
        }
    }

    pub fn snapshot(&self) -> Arc<CorpusIndex> {
        self.index.read().expect("index lock").clone()
    }

    /// Replaces the served index; in-flight queries keep their snapshot.
    pub fn swap(&self, index: CorpusIndex) {
        *self.index.write().expect("index lock") = Arc::new(index);
    }

    fn store(&self, report: &QueryReport) -> String {
        let mut guard = self.reports.lock().expect("report lock");
        guard.0 += 1;
        let id = format!("r{}", guard.0);
        let (rows, cols) = report.votes.shape();
        guard.1.push_back(VoteRecord {
            report_id: id.clone(),
            shape: [rows, cols],
            channels: report.votes.channels.clone(),
            votes: report.votes.export(),
            rounds: report.rounds.clone(),
        });
        while guard.1.len() > REPORT_CAPACITY {
            guard.1.pop_front();
        }
        id
    }

    fn report(&self, id: &str) -> Option<VoteRecord> {
        let guard = self.reports.lock().expect("report lock");
        guard.1.iter().find(|r| r.report_id == id).cloned()
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    kind: &'static str,
    message: String,
}

impl ApiError {
    fn bad_request(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            kind: "BadRequest",
            message: message.into(),
        }
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::NOT_FOUND,
            kind: "NotFound",
            message: message.into(),
        }
    }
}

impl From<pathsearch_core::Error> for ApiError {
    fn from(e: pathsearch_core::Error) -> Self {
        use pathsearch_core::Error as E;
        let (status, kind) = match &e {
            E::WrongModality(_) => (StatusCode::UNPROCESSABLE_ENTITY, "WrongModality"),
            E::EmptyIndex => (StatusCode::CONFLICT, "EmptyIndex"),
            E::Decode { .. } => (StatusCode::BAD_REQUEST, "Decode"),
            E::ImageTooSmall { .. } => (StatusCode::BAD_REQUEST, "ImageTooSmall"),
            E::MalformedRecord(_) | E::InvalidEnum { .. } | E::InvalidRange { .. } => {
                (StatusCode::BAD_REQUEST, "MalformedMetadata")
            }
            E::InvalidConfig(_) => (StatusCode::BAD_REQUEST, "InvalidConfig"),
            E::ZeroVector => (StatusCode::UNPROCESSABLE_ENTITY, "ZeroVector"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "Internal"),
        };
        Self {
            status,
            kind,
            message: e.to_string(),
        }
    }
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    error: &'a str,
    message: &'a str,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: self.kind,
            message: &self.message,
        };
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

#[derive(Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub index_version: u32,
    pub slide_count: usize,
}

async fn health(State(state): State<Arc<AppState>>) -> Json<Health> {
    let index = state.snapshot();
    Json(Health {
        status: "ok".into(),
        index_version: FORMAT_VERSION,
        slide_count: index.slides(Some(Modality::Mif)).len(),
    })
}

#[derive(Deserialize)]
struct SlidesParams {
    modality: Option<String>,
}

async fn slides(State(state): State<Arc<AppState>>, Query(p): Query<SlidesParams>) -> ApiResult<Vec<SlideMetadata>> {
    let modality = p
        .modality
        .map(|m| m.parse::<Modality>())
        .transpose()
        .map_err(ApiError::from)?;
    let index = state.snapshot();
    Ok(Json(index.slides(modality).into_iter().cloned().collect()))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct QueryResponse {
    pub report_id: String,
    pub query_id: String,
    pub query_metadata: Option<SlideMetadata>,
    pub results: Vec<ReportRow>,
    pub candidate_count: usize,
    pub vote_shape: [usize; 2],
    pub timings: Timings,
}

#[derive(Default)]
struct QueryForm {
    image: Option<Vec<u8>>,
    modality: Option<Modality>,
    top_n: Option<usize>,
    nprobe: Option<usize>,
    slide_id: Option<String>,
    metadata: Option<SlideMetadata>,
}

async fn read_form(mut multipart: Multipart) -> Result<QueryForm, ApiError> {
    let mut form = QueryForm::default();
    let bad = |e: axum::extract::multipart::MultipartError| ApiError {
        status: e.status(),
        kind: if e.status() == StatusCode::PAYLOAD_TOO_LARGE { "PayloadTooLarge" } else { "BadRequest" },
        message: e.body_text(),
    };
    while let Some(field) = multipart.next_field().await.map_err(bad)? {
        let name = field.name().unwrap_or_default().to_string();
        match name.as_str() {
            "image" => form.image = Some(field.bytes().await.map_err(bad)?.to_vec()),
            other => {
                let text = field.text().await.map_err(bad)?;
                let text = text.trim();
                let number = |what: &str| {
                    text.parse::<usize>()
                        .map_err(|_| ApiError::bad_request(format!("{what} must be a positive integer")))
                };
                match other {
                    "modality" => form.modality = Some(text.parse()?),
                    "top_n" => form.top_n = Some(number("top_n")?),
                    "nprobe" => form.nprobe = Some(number("nprobe")?),
                    "slide_id" => form.slide_id = Some(text.to_string()),
                    "metadata" => form.metadata = Some(parse_metadata_row(text)?),
                    _ => return Err(ApiError::bad_request(format!("unexpected field {other}"))),
                }
            }
        }
    }
    Ok(form)
}

async fn query(State(state): State<Arc<AppState>>, multipart: Multipart) -> ApiResult<QueryResponse> {
    let form = read_form(multipart).await?;
    let modality = form.modality.ok_or_else(|| ApiError::bad_request("missing modality field"))?;
    if modality != Modality::He {
        return Err(pathsearch_core::Error::WrongModality(modality).into());
    }
    let bytes = form.image.ok_or_else(|| ApiError::bad_request("missing image field"))?;
    let opts = QueryOptions {
        top_n: form.top_n.unwrap_or(QueryOptions::default().top_n),
        nprobe: form.nprobe,
    };
    let query_id = form
        .slide_id
        .or_else(|| form.metadata.as_ref().map(|m| m.slide_id.clone()))
        .unwrap_or_else(|| "query".into());

    let _permit = state.permits.acquire().await.expect("semaphore open");
    let index = state.snapshot();
    let metadata = form.metadata;
    let report = tokio::task::spawn_blocking(move || -> Result<QueryReport, pathsearch_core::Error> {
        let image = decode_channel(&bytes, 0, "he")?;
        query_image(&index, &query_id, &image, metadata.as_ref(), opts)
    })
    .await
    .map_err(|e| ApiError {
        status: StatusCode::INTERNAL_SERVER_ERROR,
        kind: "Internal",
        message: e.to_string(),
    })??;
    let report_id = state.store(&report);
    let (rows, cols) = report.votes.shape();
    Ok(Json(QueryResponse {
        report_id,
        query_id: report.query_id,
        query_metadata: report.query_metadata,
        results: report.results,
        candidate_count: report.candidate_count,
        vote_shape: [rows, cols],
        timings: report.timings,
    }))
}

async fn votes(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<VoteRecord> {
    state
        .report(&id)
        .map(Json)
        .ok_or_else(|| ApiError::not_found(format!("no report {id}")))
}

#[derive(Deserialize)]
struct ProjectionParams {
    channel: usize,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct ProjectedPoint {
    pub x: f64,
    pub y: f64,
    pub modality: Modality,
    pub slide_id: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Projection {
    pub channel: usize,
    /// mIF latents before the integration map, with the H&E latents.
    pub pre: Vec<ProjectedPoint>,
    /// mIF latents after the integration map, with the H&E latents.
    pub post: Vec<ProjectedPoint>,
}

fn project(latents: Vec<&LatentVector>) -> Result<Vec<ProjectedPoint>, pathsearch_core::Error> {
    if latents.is_empty() {
        return Ok(Vec::new());
    }
    let owned: Vec<LatentVector> = latents.iter().map(|l| (*l).clone()).collect();
    let xy = project_2d(&owned)?;
    Ok(owned
        .into_iter()
        .zip(xy)
        .map(|(l, (x, y))| ProjectedPoint {
            x,
            y,
            modality: l.modality,
            slide_id: l.source.slide_id,
        })
        .collect())
}

async fn projection(State(state): State<Arc<AppState>>, Query(p): Query<ProjectionParams>) -> ApiResult<Projection> {
    let index = state.snapshot();
    let channel = index
        .channels
        .iter()
        .find(|c| c.channel_index == p.channel)
        .ok_or_else(|| ApiError::not_found(format!("no channel {}", p.channel)))?;
    let pre = project(channel.raw.iter().chain(&index.he_latents).collect())?;
    let post = project(channel.index.members().chain(&index.he_latents).collect())?;
    Ok(Json(Projection {
        channel: p.channel,
        pre,
        post,
    }))
}

pub fn router(state: Arc<AppState>, body_limit: usize) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/slides", get(slides))
        .route("/query", post(query))
        .route("/votes/{report_id}", get(votes))
        .route("/projection", get(projection))
        .layer(DefaultBodyLimit::max(body_limit))
        .with_state(state)
}

pub async fn serve(cfg: ServiceConfig, index: CorpusIndex) -> std::io::Result<()> {
    let state = Arc::new(AppState::new(index, cfg.max_concurrent));
    let listener = tokio::net::TcpListener::bind(cfg.bind).await?;
    axum::serve(listener, router(state, cfg.body_limit)).await
}
