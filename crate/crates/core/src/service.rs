//! HTTP steering service: generate adapters from preference weights, serve
//! re-ranked recommendations and precomputed sweep reports.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::num::NonZeroUsize;
use std::sync::{Arc, Mutex};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use lru::LruCache;
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

use crate::data::{EvalSplit, InteractionDataset};
use crate::error::{Error, Result};
use crate::evalkit::{alpha_ndcg_at_k, candidate_labels, ndcg_at_k, order_by_scores, Method, SweepReport};
use crate::objectives::TaskWeights;
use crate::paramgen::Generator;
use crate::recmodel::{eval_windows, Adapter, AdapterTensor, Backbone};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub cache_size: usize,
    /// Include ground-truth metrics in recommendation responses.
    pub offline: bool,
    pub guidance: f64,
    pub seed: u64,
    pub alpha: f64,
    pub split: EvalSplit,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            cache_size: 256,
            offline: true,
            guidance: 0.4,
            seed: 0,
            alpha: 0.5,
            split: EvalSplit::Test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdapterCacheEntry {
    pub adapter_id: String,
    pub weights: TaskWeights,
    #[serde(skip)]
    pub adapter: AdapterTensor,
    pub created_at: u64,
    pub latency_ms: f64,
}

/// Read-only assets plus the adapter cache shared by all handlers.
pub struct AppState {
    pub cfg: ServiceConfig,
    pub backbone: Backbone,
    pub dataset: InteractionDataset,
    pub generator: Option<Generator>,
    pub sweeps: BTreeMap<Method, SweepReport>,
    reps: ndarray::Array2<f32>,
    cache: Mutex<LruCache<String, Arc<AdapterCacheEntry>>>,
    workers: Semaphore,
}

impl AppState {
    pub fn new(
        cfg: ServiceConfig,
        backbone: Backbone,
        dataset: InteractionDataset,
        generator: Option<Generator>,
        sweeps: Vec<SweepReport>,
    ) -> Result<Self> {
        let cap = NonZeroUsize::new(cfg.cache_size).ok_or_else(|| Error::Config("cache size must be positive".into()))?;
        dataset.candidates()?;
        let (seqs, times) = eval_windows(&dataset, cfg.split);
        let reps = backbone.encode_histories(&seqs, backbone.needs_times().then_some(times.as_slice()))?;
        Ok(Self {
            cfg,
            backbone,
            dataset,
            generator,
            sweeps: sweeps.into_iter().map(|r| (r.method, r)).collect(),
            reps,
            cache: Mutex::new(LruCache::new(cap)),
            workers: Semaphore::new(1),
        })
    }

    pub fn cached(&self, id: &str) -> Option<Arc<AdapterCacheEntry>> {
        self.cache.lock().expect("cache lock").get(id).cloned()
    }

    pub fn cache_len(&self) -> usize {
        self.cache.lock().expect("cache lock").len()
    }
}

/// Weights rounded to the 1e-3 grid used for cache keys.
pub fn quantize(w: &TaskWeights) -> TaskWeights {
    TaskWeights(w.0.iter().map(|x| (x * 1000.0).round() / 1000.0).collect())
}

/// Cache key: quantized weights, generator hash, guidance and seed. Guidance
/// changes the generated output, so it is part of the key.
pub fn adapter_id(w: &TaskWeights, generator_hash: &str, guidance: f64, seed: u64) -> String {
    let q: Vec<i64> = w.0.iter().map(|x| (x * 1000.0).round() as i64).collect();
    let key = format!("{q:?}|{generator_hash}|{guidance}|{seed}");
    crate::io::checksum_bytes(key.as_bytes())[..16].to_string()
}

#[derive(Debug)]
pub struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

fn bad_request(m: impl Into<String>) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, m.into())
}

fn not_found(m: impl Into<String>) -> ApiError {
    ApiError(StatusCode::NOT_FOUND, m.into())
}

fn internal(e: Error) -> ApiError {
    ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub weights: Vec<f64>,
    pub guidance: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub adapter_id: String,
    pub latency_ms: f64,
    pub cached: bool,
}

async fn generate(
    State(st): State<Arc<AppState>>,
    Json(req): Json<GenerateRequest>,
) -> std::result::Result<Json<GenerateResponse>, ApiError> {
    if req.weights.iter().any(|w| !(0.0..=1.0).contains(w)) {
        return Err(bad_request(format!("weights {:?} must lie in [0, 1]", req.weights)));
    }
    let w = TaskWeights::new(req.weights).map_err(|e| bad_request(e.to_string()))?;
    let guidance = req.guidance.unwrap_or(st.cfg.guidance);
    if !(0.0..=1.0).contains(&guidance) {
        return Err(bad_request(format!("guidance {guidance} must lie in [0, 1]")));
    }
    let seed = req.seed.unwrap_or(st.cfg.seed);
    let Some(gen) = &st.generator else {
        return Err(ApiError(StatusCode::SERVICE_UNAVAILABLE, "generator not loaded".into()));
    };
    if w.len() != gen.weight_len {
        return Err(bad_request(format!("generator expects {} weights", gen.weight_len)));
    }
    let id = adapter_id(&w, &gen.hash(), guidance, seed);
    if let Some(e) = st.cached(&id) {
        return Ok(Json(GenerateResponse {
            adapter_id: id,
            latency_ms: e.latency_ms,
            cached: true,
        }));
    }
    let _permit = st.workers.acquire().await.map_err(|e| internal(Error::Orchestration(e.to_string())))?;
    // another request may have produced it while this one waited
    if let Some(e) = st.cached(&id) {
        return Ok(Json(GenerateResponse {
            adapter_id: id,
            latency_ms: e.latency_ms,
            cached: true,
        }));
    }
    let worker = Arc::clone(&st);
    // sampling from the quantized weights makes the adapter a function of its key
    let wq = quantize(&w);
    let (adapter, latency_ms) = tokio::task::spawn_blocking(move || {
        let start = Instant::now();
        let gen = worker.generator.as_ref().expect("checked above");
        gen.sample_adapter(&wq, guidance, seed).map(|a| (a, start.elapsed().as_secs_f64() * 1e3))
    })
    .await
    .map_err(|e| internal(Error::Orchestration(e.to_string())))?
    .map_err(internal)?;
    let entry = AdapterCacheEntry {
        adapter_id: id.clone(),
        weights: quantize(&w),
        adapter,
        created_at: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        latency_ms,
    };
    st.cache.lock().expect("cache lock").put(id.clone(), Arc::new(entry));
    Ok(Json(GenerateResponse {
        adapter_id: id,
        latency_ms,
        cached: false,
    }))
}

#[derive(Debug, Deserialize)]
pub struct RecommendQuery {
    pub user: String,
    pub adapter_id: String,
    pub k: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecommendedItem {
    pub item_id: String,
    pub score: f32,
    pub categories: Vec<u16>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ListMetrics {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ndcg_at_10: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha_ndcg_at_10: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecommendResponse {
    pub user: String,
    pub adapter_id: String,
    pub items: Vec<RecommendedItem>,
    pub metrics: ListMetrics,
    /// Ground-truth next item, offline mode only.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
}

async fn recommend(
    State(st): State<Arc<AppState>>,
    Query(q): Query<RecommendQuery>,
) -> std::result::Result<Json<RecommendResponse>, ApiError> {
    let u = st
        .dataset
        .user_index(&q.user)
        .ok_or_else(|| not_found(format!("unknown user {:?}", q.user)))?;
    let entry = st
        .cached(&q.adapter_id)
        .ok_or_else(|| not_found(format!("unknown adapter {:?}", q.adapter_id)))?;
    let cands = st.dataset.eval_candidates(u, st.cfg.split).map_err(internal)?;
    let k = q.k.unwrap_or(10);
    if k == 0 || k > cands.len() {
        return Err(bad_request(format!("k must lie in 1..={}", cands.len())));
    }
    let adapter = Adapter::unflatten(&entry.adapter).map_err(internal)?;
    let rep = st.reps.slice(ndarray::s![u..u + 1, ..]).to_owned();
    let h = adapter.apply(&rep).map_err(internal)?;
    let scores = st.backbone.score_from_repr(h.row(0).as_slice().expect("contiguous"), cands);
    let order = order_by_scores(cands, &scores);
    let items = order
        .iter()
        .take(k)
        .map(|&i| RecommendedItem {
            item_id: st.dataset.item_ids[cands[i] as usize].clone(),
            score: scores[i],
            categories: st.dataset.item_categories[cands[i] as usize].clone(),
        })
        .collect();
    let (metrics, target) = if st.cfg.offline {
        let ranked: Vec<u32> = order.iter().map(|&i| cands[i]).collect();
        let labels = candidate_labels(&st.dataset, cands);
        (
            ListMetrics {
                ndcg_at_10: Some(ndcg_at_k(&ranked, cands[0], 10).map_err(internal)?),
                alpha_ndcg_at_10: Some(alpha_ndcg_at_k(&labels, &order, st.cfg.alpha, 10).map_err(internal)?),
            },
            Some(st.dataset.item_ids[cands[0] as usize].clone()),
        )
    } else {
        (ListMetrics::default(), None)
    };
    Ok(Json(RecommendResponse {
        user: q.user,
        adapter_id: q.adapter_id,
        items,
        metrics,
        target,
    }))
}

#[derive(Debug, Deserialize)]
pub struct SweepQuery {
    pub methods: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotRecord {
    pub method: Method,
    pub w_acc: f64,
    pub weights: Vec<f64>,
    pub ndcg_at_10: f64,
    pub alpha_ndcg_at_10: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ad: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResponse {
    pub records: Vec<PlotRecord>,
    pub reports: Vec<SweepReport>,
}

async fn sweep(
    State(st): State<Arc<AppState>>,
    Query(q): Query<SweepQuery>,
) -> std::result::Result<Json<SweepResponse>, ApiError> {
    let methods: Vec<Method> = match q.methods.as_deref() {
        None | Some("") => st.sweeps.keys().copied().collect(),
        Some(list) => list
            .split(',')
            .map(|m| m.trim().parse::<Method>().map_err(|_| not_found(format!("unknown method {m:?}"))))
            .collect::<std::result::Result<_, _>>()?,
    };
    let mut reports = Vec::with_capacity(methods.len());
    for m in methods {
        reports.push(
            st.sweeps
                .get(&m)
                .cloned()
                .ok_or_else(|| not_found(format!("no sweep report for {m}")))?,
        );
    }
    let records = reports
        .iter()
        .flat_map(|r| {
            r.results.iter().map(|t| PlotRecord {
                method: r.method,
                w_acc: t.weights.accuracy(),
                weights: t.weights.0.clone(),
                ndcg_at_10: t.ndcg_at_10,
                alpha_ndcg_at_10: t.alpha_ndcg_at_10,
                ad: t.ad,
            })
        })
        .collect();
    Ok(Json(SweepResponse { records, reports }))
}

async fn health(State(st): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(serde_json::json!({
        "generator_loaded": st.generator.is_some(),
        "cached_adapters": st.cache_len(),
        "users": st.dataset.num_users(),
    }))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/adapters", post(generate))
        .route("/v1/recommendations", get(recommend))
        .route("/v1/sweep", get(sweep))
        .route("/v1/health", get(health))
        .with_state(state)
}

/// JSON schema of the `/v1/sweep` response.
pub const SWEEP_RESPONSE_SCHEMA: &str = include_str!("../schemas/sweep_response.schema.json");

pub async fn serve(state: Arc<AppState>, addr: SocketAddr) -> Result<()> {
    let io = |source| Error::Io {
        path: addr.to_string().into(),
        source,
    };
    let listener = tokio::net::TcpListener::bind(addr).await.map_err(io)?;
    log::info!("listening on {}", listener.local_addr().map_err(io)?);
    axum::serve(listener, router(state)).await.map_err(io)
}
