//! JSON API over a loaded corpus and checkpoint. Attribution results are
//! kept in an LRU cache; tensor ids encode the request, so a slice of an
//! evicted tensor recomputes it.

use std::net::SocketAddr;
use std::num::NonZeroUsize;
use std::sync::{Arc, Mutex};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use interattr::attribution::{completeness_residual, slice_project, AttributionConfig, Corners, IntegrationConfig, InteractionTensor, ReferenceMode, Scheme, Selection};
use interattr::data::{Annotation, Corpus, Split};
use interattr::encoders::DualEncoder;
use interattr::{Error, Result};
use lru::LruCache;
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

use crate::args::ServeArgs;
use crate::commands::{load_corpus, load_model};
use crate::{attribute_pair, ErrorBody, Method};

pub const CACHE_CAPACITY: usize = 128;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TensorKey {
    pub pair_id: String,
    pub method: Method,
    pub steps: usize,
    pub scheme: Scheme,
    pub zero_ref: bool,
}

impl TensorKey {
    fn new(pair_id: String, method: Method, steps: usize, scheme: Scheme, zero_ref: bool) -> Self {
        if method.integrates() {
            Self { pair_id, method, steps, scheme, zero_ref }
        } else {
            Self { pair_id, method, steps: 0, scheme: Scheme::Right, zero_ref: false }
        }
    }

    /// `pair:method:steps:scheme[:zero]`.
    pub fn id(&self) -> String {
        let scheme = match self.scheme {
            Scheme::Right => "right",
            Scheme::Midpoint => "midpoint",
        };
        let zero = if self.zero_ref { ":zero" } else { "" };
        format!("{}:{}:{}:{scheme}{zero}", self.pair_id, self.method, self.steps)
    }

    pub fn parse(id: &str) -> Result<Self> {
        let bad = || Error::InvalidInput(format!("malformed tensor id `{id}`"));
        let mut parts: Vec<&str> = id.split(':').collect();
        let zero_ref = parts.last() == Some(&"zero");
        if zero_ref {
            parts.pop();
        }
        let [pair, method, steps, scheme] = parts[..] else {
            return Err(bad());
        };
        let key = Self {
            pair_id: pair.to_string(),
            method: method.parse()?,
            steps: steps.parse().map_err(|_| bad())?,
            scheme: scheme.parse()?,
            zero_ref,
        };
        if key.id() != id {
            return Err(bad());
        }
        Ok(key)
    }

    fn config(&self) -> AttributionConfig {
        AttributionConfig {
            integration: IntegrationConfig::new(self.steps.max(1), self.scheme),
            tap: None,
            reference: if self.zero_ref { ReferenceMode::ZeroAtTap } else { ReferenceMode::Inputs },
        }
    }
}

pub struct AppState {
    pub corpus: Corpus,
    pub model: DualEncoder,
    pub seed: u64,
    cache: Mutex<LruCache<TensorKey, Arc<InteractionTensor>>>,
    workers: Semaphore,
}

impl AppState {
    pub fn new(corpus: Corpus, model: DualEncoder, workers: usize, seed: u64) -> Self {
        Self {
            corpus,
            model,
            seed,
            cache: Mutex::new(LruCache::new(NonZeroUsize::new(CACHE_CAPACITY).unwrap())),
            workers: Semaphore::new(workers.max(1)),
        }
    }

    pub fn cached_tensors(&self) -> usize {
        self.cache.lock().unwrap().len()
    }

    async fn tensor(self: &Arc<Self>, key: TensorKey) -> Result<Arc<InteractionTensor>> {
        if let Some(t) = self.cache.lock().unwrap().get(&key) {
            return Ok(t.clone());
        }
        if self.corpus.get(&key.pair_id).is_none() {
            return Err(Error::UnknownName(key.pair_id));
        }
        let _permit = self.workers.acquire().await.expect("semaphore stays open");
        let state = self.clone();
        let k = key.clone();
        let t = tokio::task::spawn_blocking(move || {
            let pair = state.corpus.get(&k.pair_id).expect("checked above");
            attribute_pair(&state.model, pair, k.method, &k.config(), state.seed)
        })
        .await
        .map_err(|e| Error::InvalidInput(format!("attribution task failed: {e}")))??;
        let t = Arc::new(t);
        self.cache.lock().unwrap().put(key, t.clone());
        Ok(t)
    }
}

pub struct ApiError(StatusCode, ErrorBody);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::UnknownName(_) => StatusCode::NOT_FOUND,
            Error::InvalidInput(_)
            | Error::InvalidConfig(_)
            | Error::Empty(_)
            | Error::ShapeMismatch { .. }
            | Error::UnknownTap(_)
            | Error::Format(_)
            | Error::Json(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, ErrorBody::from(&e))
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError(
            e.status(),
            ErrorBody {
                error: "bad_request".into(),
                message: e.body_text(),
            },
        )
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

type ApiResult<T> = std::result::Result<Json<T>, ApiError>;

#[derive(Debug, Serialize, Deserialize)]
pub struct Health {
    pub version: String,
    pub model_digest: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PairSummary {
    pub id: String,
    pub split: Split,
    pub caption: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PairList {
    pub height: usize,
    pub width: usize,
    pub pairs: Vec<PairSummary>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PairDetail {
    pub id: String,
    pub split: Split,
    pub height: usize,
    pub width: usize,
    pub features: usize,
    /// `[height][width][features]`.
    pub image: Vec<Vec<Vec<f64>>>,
    pub tokens: Vec<String>,
    pub annotations: Vec<Annotation>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AttributeRequest {
    pub pair_id: String,
    pub method: Method,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub scheme: Scheme,
    #[serde(default)]
    pub zero_ref: bool,
}

fn default_steps() -> usize {
    IntegrationConfig::default().steps
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AttributeResponse {
    pub tensor_id: String,
    pub method: Method,
    pub shape: Vec<usize>,
    pub corners: Option<Corners>,
    pub completeness_residual: Option<f64>,
    pub total: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SliceRequest {
    pub tensor_id: String,
    pub selection: Selection,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SliceResponse {
    pub tensor_id: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

async fn health(State(s): State<Arc<AppState>>) -> Json<Health> {
    Json(Health {
        version: env!("CARGO_PKG_VERSION").to_string(),
        model_digest: s.model.digest(),
    })
}

async fn pairs(State(s): State<Arc<AppState>>) -> Json<PairList> {
    let c = &s.corpus.config;
    Json(PairList {
        height: c.grid_height,
        width: c.grid_width,
        pairs: s
            .corpus
            .items
            .iter()
            .map(|p| PairSummary {
                id: p.id.clone(),
                split: p.split,
                caption: p.caption_text(),
            })
            .collect(),
    })
}

async fn pair(State(s): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<PairDetail> {
    let p = s.corpus.get(&id).ok_or(Error::UnknownName(id))?;
    let (h, w) = (p.image.height(), p.image.width());
    let image = (0..h)
        .map(|r| (0..w).map(|c| p.image.patch(p.image.patch_index(r, c)).to_vec()).collect())
        .collect();
    Ok(Json(PairDetail {
        id: p.id.clone(),
        split: p.split,
        height: h,
        width: w,
        features: p.image.features(),
        image,
        tokens: p.tokens.clone(),
        annotations: p.annotations.clone(),
    }))
}

async fn attribute(
    State(s): State<Arc<AppState>>,
    body: std::result::Result<Json<AttributeRequest>, JsonRejection>,
) -> ApiResult<AttributeResponse> {
    let Json(req) = body?;
    if req.steps == 0 {
        return Err(Error::InvalidConfig("steps must be at least 1".into()).into());
    }
    let key = TensorKey::new(req.pair_id, req.method, req.steps, req.scheme, req.zero_ref);
    let t = s.tensor(key.clone()).await?;
    Ok(Json(AttributeResponse {
        tensor_id: key.id(),
        method: key.method,
        shape: t.shape(),
        corners: t.corners().copied(),
        completeness_residual: completeness_residual(&t).ok(),
        total: t.total(),
    }))
}

async fn slice(
    State(s): State<Arc<AppState>>,
    body: std::result::Result<Json<SliceRequest>, JsonRejection>,
) -> ApiResult<SliceResponse> {
    let Json(req) = body?;
    let key = TensorKey::parse(&req.tensor_id)?;
    let t = s.tensor(key).await?;
    let out = slice_project(&t, &req.selection)?;
    Ok(Json(SliceResponse {
        tensor_id: req.tensor_id,
        shape: out.shape().to_vec(),
        values: out.data().to_vec(),
    }))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/pairs", get(pairs))
        .route("/api/pairs/{id}", get(pair))
        .route("/api/attribute", post(attribute))
        .route("/api/slice", post(slice))
        .with_state(state)
}

pub fn cmd_serve(a: &ServeArgs) -> Result<()> {
    let corpus = load_corpus(&a.model.corpus)?;
    let model = load_model(&a.model.checkpoint)?;
    let workers = a
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let addr: SocketAddr = format!("{}:{}", a.bind, a.port)
        .parse()
        .map_err(|e| Error::InvalidConfig(format!("bind address: {e}")))?;
    let state = Arc::new(AppState::new(corpus, model, workers, a.seed));
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        eprintln!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, router(state)).await
    })?;
    Ok(())
}
