//! Local HTTP API over one trained classifier and interpreter pair.
//!
//! Every endpoint lives under `/api` and speaks JSON; images travel as
//! base64-encoded PNG strings. The session is immutable once loaded, so
//! requests never influence each other.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::{Query, State};
use axum::http::{HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use tower_http::cors::{AllowOrigin, Any, CorsLayer};

use discover::classifier::TrainedClassifier;
use discover::config::{InterpretConfig, Layout, ServeConfig};
use discover::dataset::{read_archive, DatasetManifest, Label, Split};
use discover::interpret::{FeatureRanking, Interpreter, LatentStats, RankEntry};
use discover::model::DiscoverModel;
use discover::ProcessedImage;

pub const API_VERSION: u32 = 1;
pub const MAX_PAGE_SIZE: usize = 200;

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("no model is loaded")]
    Unavailable,
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Internal(String),
}

impl From<discover::Error> for ApiError {
    fn from(e: discover::Error) -> Self {
        match e {
            discover::Error::Contract(msg) => ApiError::BadRequest(msg),
            other => ApiError::Internal(other.to_string()),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match self {
            ApiError::Unavailable => StatusCode::SERVICE_UNAVAILABLE,
            ApiError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ApiError::NotFound(_) => StatusCode::NOT_FOUND,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(ErrorBody { error: self.to_string() })).into_response()
    }
}

pub struct GalleryItem {
    pub id: String,
    pub label: Label,
    pub image: ProcessedImage,
}

/// Everything the endpoints read. Built once, then shared read-only.
pub struct Session {
    pub dataset: String,
    pub class_names: [String; 2],
    pub model: DiscoverModel,
    pub classifier: TrainedClassifier,
    pub stats: LatentStats,
    pub ranking: FeatureRanking,
    /// Sorted by id.
    pub gallery: Vec<GalleryItem>,
    pub top_n: usize,
    pub magnitude_std: f64,
    pub max_delta_std: f64,
}

impl Session {
    /// Checks that the pieces belong together.
    pub fn new(
        dataset: String,
        class_names: [String; 2],
        model: DiscoverModel,
        classifier: TrainedClassifier,
        stats: LatentStats,
        ranking: FeatureRanking,
        mut gallery: Vec<GalleryItem>,
        interpret: &InterpretConfig,
    ) -> discover::Result<Self> {
        model.check_classifier(classifier.recorded_hash())?;
        Interpreter::new(&model, &classifier, &stats)?;
        gallery.sort_by(|a, b| a.id.cmp(&b.id));
        Ok(Self {
            dataset,
            class_names,
            model,
            classifier,
            stats,
            ranking,
            gallery,
            top_n: interpret.top_n,
            magnitude_std: interpret.magnitude_std,
            max_delta_std: interpret.max_delta_std,
        })
    }

    /// Loads a finished run: classifier, interpreter, statistics, ranking and
    /// the test split as the gallery.
    pub fn load(layout: &Layout, interpret: &InterpretConfig) -> discover::Result<Self> {
        use discover::config::Stage;
        let (classifier, _) = TrainedClassifier::load(&layout.stage_dir(Stage::TrainClassifier))?;
        let (model, _) = DiscoverModel::load(&layout.stage_dir(Stage::TrainDiscover))?;
        let stats_path = layout.latent_stats();
        let text = std::fs::read_to_string(&stats_path).map_err(|e| discover::Error::Io {
            path: stats_path.clone(),
            source: e,
        })?;
        let stats: LatentStats = serde_json::from_str(&text).map_err(|e| discover::Error::Format {
            what: "latent statistics",
            msg: e.to_string(),
        })?;
        let manifest = DatasetManifest::read(&layout.manifest())?;
        let ranking = FeatureRanking::read_csv(&layout.ranking(), &format!("{}/test", manifest.name))?;
        let archive = read_archive(&layout.archive())?;
        let gallery = manifest
            .split(Split::Test)
            .map(|r| {
                let image = archive
                    .get(&r.id)
                    .ok_or_else(|| discover::Error::Contract(format!("image {} missing from archive", r.id)))?;
                Ok(GalleryItem {
                    id: r.id.clone(),
                    label: r.label,
                    image: image.clone(),
                })
            })
            .collect::<discover::Result<Vec<_>>>()?;
        Self::new(
            manifest.name.clone(),
            manifest.class_names.clone(),
            model,
            classifier,
            stats,
            ranking,
            gallery,
            interpret,
        )
    }

    fn interpreter(&self) -> Interpreter<'_> {
        let mut i = Interpreter::new(&self.model, &self.classifier, &self.stats).expect("checked at construction");
        i.max_delta_std = self.max_delta_std;
        i
    }

    fn image(&self, id: &str) -> Result<&ProcessedImage, ApiError> {
        self.gallery
            .binary_search_by(|g| g.id.as_str().cmp(id))
            .map(|i| &self.gallery[i].image)
            .map_err(|_| ApiError::NotFound(format!("unknown image id {id:?}")))
    }

    fn usable_feature(&self, feature: usize) -> Result<RankEntry, ApiError> {
        let entry = self
            .ranking
            .entry(feature)
            .ok_or_else(|| ApiError::BadRequest(format!("feature #{feature} out of range 1..={}", self.model.latent_dim())))?;
        if entry.degenerate || self.stats.is_degenerate(feature) {
            return Err(ApiError::BadRequest(format!("feature #{feature} is degenerate and cannot be traversed")));
        }
        Ok(entry.clone())
    }

    pub fn info(&self) -> InfoResponse {
        InfoResponse {
            api_version: API_VERSION,
            dataset: self.dataset.clone(),
            class_names: self.class_names.clone(),
            latent_dim: self.model.latent_dim(),
            subset_size: self.model.subset_size(),
            side: self.model.side(),
            classifier_hash: self.classifier.recorded_hash().to_string(),
            gallery_size: self.gallery.len(),
            max_delta_std: self.max_delta_std,
            magnitude_std: self.magnitude_std,
            top: self.ranking.top(self.top_n).into_iter().cloned().collect(),
            ranking: self.ranking.entries.clone(),
        }
    }

    pub fn traverse(&self, req: &TraverseRequest) -> Result<TraverseResponse, ApiError> {
        if !req.delta_std.is_finite() || req.delta_std.abs() > self.max_delta_std {
            return Err(ApiError::BadRequest(format!(
                "delta_std {} outside [-{m}, {m}]",
                req.delta_std,
                m = self.max_delta_std
            )));
        }
        let img = self.image(&req.image_id)?;
        self.usable_feature(req.feature_index)?;
        let result = self.interpreter().traverse(img, req.feature_index, req.delta_std)?;
        Ok(TraverseResponse {
            image_id: req.image_id.clone(),
            feature_index: req.feature_index,
            delta_std: req.delta_std,
            image: png_base64(&result.image)?,
            score: result.score,
            base_score: result.base_score,
        })
    }

    pub fn alteration(&self, req: &AlterationRequest) -> Result<AlterationResponse, ApiError> {
        let img = self.image(&req.image_id)?;
        let entry = self.usable_feature(req.feature_index)?;
        let cf = self.interpreter().counterfactual(img, &entry, self.magnitude_std)?;
        let bytes = cf.alteration.to_png_bytes()?;
        let values = &cf.alteration.values;
        Ok(AlterationResponse {
            image_id: req.image_id.clone(),
            feature_index: req.feature_index,
            pair: cf.alteration.pair.clone(),
            image: STANDARD.encode(bytes),
            mean: values.iter().map(|v| f64::from(*v)).sum::<f64>() / values.len() as f64,
            max: values.iter().copied().fold(0.0, f32::max),
        })
    }

    pub fn gallery(&self, q: &GalleryQuery) -> Result<GalleryResponse, ApiError> {
        let page_size = q.page_size.unwrap_or(24);
        if page_size > MAX_PAGE_SIZE {
            return Err(ApiError::BadRequest(format!("page_size above {MAX_PAGE_SIZE}")));
        }
        let page = q.page.unwrap_or(0);
        let start = page.saturating_mul(page_size).min(self.gallery.len());
        let end = start.saturating_add(page_size).min(self.gallery.len());
        let items = self.gallery[start..end]
            .iter()
            .map(|g| {
                Ok(GalleryEntry {
                    id: g.id.clone(),
                    label: g.label,
                    thumbnail: png_base64(&g.image)?,
                })
            })
            .collect::<Result<Vec<_>, ApiError>>()?;
        Ok(GalleryResponse {
            total: self.gallery.len(),
            page,
            page_size,
            items,
        })
    }
}

pub fn png_base64(img: &ProcessedImage) -> Result<String, ApiError> {
    Ok(STANDARD.encode(img.to_png_bytes()?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfoResponse {
    pub api_version: u32,
    pub dataset: String,
    pub class_names: [String; 2],
    pub latent_dim: usize,
    pub subset_size: usize,
    pub side: usize,
    pub classifier_hash: String,
    pub gallery_size: usize,
    pub max_delta_std: f64,
    pub magnitude_std: f64,
    /// The strongest non-degenerate features, strongest first.
    pub top: Vec<RankEntry>,
    pub ranking: Vec<RankEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraverseRequest {
    pub image_id: String,
    /// 1-based.
    pub feature_index: usize,
    pub delta_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraverseResponse {
    pub image_id: String,
    pub feature_index: usize,
    pub delta_std: f64,
    /// Base64 PNG.
    pub image: String,
    pub score: f32,
    pub base_score: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlterationRequest {
    pub image_id: String,
    pub feature_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlterationResponse {
    pub image_id: String,
    pub feature_index: usize,
    pub pair: String,
    /// Base64 PNG, hot colormap.
    pub image: String,
    pub mean: f64,
    pub max: f32,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GalleryQuery {
    pub page: Option<usize>,
    pub page_size: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GalleryEntry {
    pub id: String,
    pub label: Label,
    pub thumbnail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GalleryResponse {
    pub total: usize,
    pub page: usize,
    pub page_size: usize,
    pub items: Vec<GalleryEntry>,
}

type AppState = Option<Arc<Session>>;

fn session(state: &AppState) -> Result<Arc<Session>, ApiError> {
    state.clone().ok_or(ApiError::Unavailable)
}

/// Runs CPU-heavy work off the async executor.
async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ApiError> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))?
}

async fn info(State(state): State<AppState>) -> Result<Json<InfoResponse>, ApiError> {
    Ok(Json(session(&state)?.info()))
}

async fn traverse(State(state): State<AppState>, Json(req): Json<TraverseRequest>) -> Result<Json<TraverseResponse>, ApiError> {
    let s = session(&state)?;
    blocking(move || s.traverse(&req)).await.map(Json)
}

async fn alteration(
    State(state): State<AppState>,
    Json(req): Json<AlterationRequest>,
) -> Result<Json<AlterationResponse>, ApiError> {
    let s = session(&state)?;
    blocking(move || s.alteration(&req)).await.map(Json)
}

async fn gallery(State(state): State<AppState>, Query(q): Query<GalleryQuery>) -> Result<Json<GalleryResponse>, ApiError> {
    let s = session(&state)?;
    blocking(move || s.gallery(&q)).await.map(Json)
}

fn cors(origins: &[String]) -> CorsLayer {
    let layer = CorsLayer::new().allow_methods(Any).allow_headers(Any);
    if origins.is_empty() {
        return layer.allow_origin(Any);
    }
    let list: Vec<HeaderValue> = origins.iter().filter_map(|o| HeaderValue::from_str(o).ok()).collect();
    layer.allow_origin(AllowOrigin::list(list))
}

/// The API router. `None` serves 503 on every model endpoint.
pub fn router(session: Option<Arc<Session>>, cors_origins: &[String]) -> Router {
    Router::new()
        .route("/api/info", get(info))
        .route("/api/traverse", post(traverse))
        .route("/api/alteration", post(alteration))
        .route("/api/gallery", get(gallery))
        .layer(cors(cors_origins))
        .with_state(session)
}

/// Serves until Ctrl-C.
pub async fn serve(session: Option<Arc<Session>>, config: &ServeConfig) -> std::io::Result<()> {
    let addr: SocketAddr = format!("{}:{}", config.host, config.port)
        .parse()
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidInput, format!("bad listen address: {e}")))?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(session, &config.cors_origins))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
