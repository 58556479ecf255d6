//! HTTP API over loaded models and datasets: captioning, VQA, gallery
//! search, zero-shot classification, feature extraction and dataset paging.
//!
//! All serving state is built once by [`build_state`] and never mutated, so
//! handlers share it freely. Inference runs on the blocking pool.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{FromRequest, Path as UrlPath, Query, Request, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use base64::Engine;
use mmkit::config::{load_config, merge, DefaultConfigs};
use mmkit::data::{build_dataset, rgb_to_array, DatasetSplit, UrlFetcher};
use mmkit::models::{load_model, load_model_from_checkpoint, FeatureMode, ModelKind};
use mmkit::processors::ImageProcessor;
use mmkit::tasks::{multimodal_search, zero_shot_classify};
use mmkit::{DatasetSplits, Model, ModelBundle, Registry};
use ndarray::{Array3, Axis};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tower_http::services::ServeDir;

pub const DEFAULT_PORT: u16 = 5600;

/// Service config file (YAML).
///
/// ```yaml
/// models:
///   - name: retrieval
///     checkpoint: runs/clip/checkpoint_best.ckpt
///   - name: captioner
///     arch: blip_toy
///     model_type: caption
/// datasets: [shapes_retrieval]
/// galleries:
///   - {id: shapes, dataset: shapes_retrieval, split: train, model: retrieval}
/// ```
///
/// Relative paths resolve against the config file's directory.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    pub models: Vec<ModelSpec>,
    #[serde(default)]
    pub datasets: Vec<DatasetSpec>,
    #[serde(default)]
    pub galleries: Vec<GallerySpec>,
    /// Endpoint name (`caption`, `vqa`, `classify`, `search`, `features`) to
    /// model name. Unlisted endpoints use the first model of a fitting kind.
    #[serde(default)]
    pub endpoints: BTreeMap<String, String>,
    #[serde(default = "default_prompt")]
    pub classify_prompt: String,
    #[serde(default)]
    pub cache_root: Option<PathBuf>,
    /// Built web UI served under `/`.
    #[serde(default)]
    pub static_dir: Option<PathBuf>,
}

fn default_prompt() -> String {
    "a photo of a".into()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub name: String,
    #[serde(default)]
    pub arch: Option<String>,
    #[serde(default)]
    pub model_type: Option<String>,
    /// Checkpoint file; when set, arch and model type come from it.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

/// A dataset name, or a name plus a config file overriding its defaults.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum DatasetSpec {
    Name(String),
    WithConfig { name: String, cfg_path: PathBuf },
}

impl DatasetSpec {
    fn name(&self) -> &str {
        match self {
            DatasetSpec::Name(n) | DatasetSpec::WithConfig { name: n, .. } => n,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GallerySpec {
    pub id: String,
    pub dataset: String,
    pub split: String,
    pub model: String,
}

impl ServiceConfig {
    pub fn from_file(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| anyhow::anyhow!("reading {}: {e}", path.display()))?;
        let mut cfg: ServiceConfig = serde_yaml::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for m in &mut cfg.models {
            if let Some(p) = m.checkpoint.as_mut() {
                fix(p);
            }
        }
        for d in &mut cfg.datasets {
            if let DatasetSpec::WithConfig { cfg_path, .. } = d {
                fix(cfg_path);
            }
        }
        if let Some(p) = cfg.static_dir.as_mut() {
            fix(p);
        }
        if let Some(p) = cfg.cache_root.as_mut() {
            fix(p);
        }
        Ok(cfg)
    }
}

/// Unit-norm image projections of one dataset split.
pub struct GalleryIndex {
    pub gallery_id: String,
    pub model: String,
    pub ids: Vec<String>,
    pub image_embeds_proj: Vec<Vec<f32>>,
    pub thumbnails: Vec<String>,
}

pub struct ServedDataset {
    pub name: String,
    pub splits: DatasetSplits,
}

/// Everything the handlers read. Immutable after [`build_state`].
pub struct AppState {
    pub models: BTreeMap<String, ModelBundle>,
    /// Declaration order, used to pick defaults.
    pub model_order: Vec<String>,
    pub endpoints: BTreeMap<String, String>,
    pub datasets: BTreeMap<String, ServedDataset>,
    pub galleries: BTreeMap<String, GalleryIndex>,
    pub classify_prompt: String,
    pub static_dir: Option<PathBuf>,
}

/// Loads every model, dataset and gallery named in `cfg`.
pub fn build_state(cfg: &ServiceConfig) -> anyhow::Result<AppState> {
    let registry = match &cfg.cache_root {
        Some(root) => Registry::builtin_with_cache(&root.to_string_lossy())?,
        None => Registry::builtin()?,
    };
    if cfg.models.is_empty() {
        anyhow::bail!("service config declares no models");
    }
    let mut models = BTreeMap::new();
    let mut model_order = Vec::new();
    for spec in &cfg.models {
        let bundle = match (&spec.checkpoint, &spec.arch) {
            (Some(path), _) => load_model_from_checkpoint(&registry, path, true)?,
            (None, Some(arch)) => load_model(&registry, arch, spec.model_type.as_deref().unwrap_or("base"), true)?,
            (None, None) => anyhow::bail!("model `{}` needs a checkpoint or an arch", spec.name),
        };
        log::info!("loaded model `{}` ({}/{})", spec.name, bundle.model.arch(), bundle.model.model_type());
        if models.insert(spec.name.clone(), bundle).is_some() {
            anyhow::bail!("model name `{}` declared twice", spec.name);
        }
        model_order.push(spec.name.clone());
    }

    let mut endpoints = BTreeMap::new();
    for endpoint in ["caption", "vqa", "classify", "search", "features"] {
        let chosen = match cfg.endpoints.get(endpoint) {
            Some(name) if models.contains_key(name) => Some(name.clone()),
            Some(name) => anyhow::bail!("endpoint `{endpoint}` names unknown model `{name}`"),
            None => model_order
                .iter()
                .find(|n| endpoint_accepts(endpoint, models[*n].model.kind()))
                .cloned(),
        };
        if let Some(name) = chosen {
            endpoints.insert(endpoint.to_string(), name);
        }
    }
    if let Some(bad) = cfg.endpoints.keys().find(|k| !endpoints.contains_key(*k)) {
        anyhow::bail!("unknown endpoint `{bad}` in service config");
    }

    let mut datasets = BTreeMap::new();
    for spec in &cfg.datasets {
        let name = spec.name();
        let mut tree = load_config(registry.dataset_default(name)?)?;
        if let DatasetSpec::WithConfig { cfg_path, .. } = spec {
            tree = merge(&tree, &load_config(cfg_path)?)?;
        }
        let splits = build_dataset(&registry, name, &tree.section(&format!("datasets.{name}")), &UrlFetcher)?;
        datasets.insert(
            name.to_string(),
            ServedDataset {
                name: name.to_string(),
                splits,
            },
        );
    }

    let mut galleries = BTreeMap::new();
    for g in &cfg.galleries {
        let bundle = models
            .get(&g.model)
            .ok_or_else(|| anyhow::anyhow!("gallery `{}` names unknown model `{}`", g.id, g.model))?;
        let split = datasets
            .get(&g.dataset)
            .and_then(|d| d.splits.get(&g.split))
            .ok_or_else(|| anyhow::anyhow!("gallery `{}` needs dataset split {}/{}", g.id, g.dataset, g.split))?;
        let index = build_gallery(&g.id, &g.model, bundle, split)?;
        if galleries.insert(g.id.clone(), index).is_some() {
            anyhow::bail!("gallery id `{}` declared twice", g.id);
        }
    }

    Ok(AppState {
        models,
        model_order,
        endpoints,
        datasets,
        galleries,
        classify_prompt: cfg.classify_prompt.clone(),
        static_dir: cfg.static_dir.clone(),
    })
}

fn endpoint_accepts(endpoint: &str, kind: ModelKind) -> bool {
    match endpoint {
        "caption" | "vqa" => kind == ModelKind::Caption,
        "classify" | "search" => kind != ModelKind::Caption,
        _ => true,
    }
}

fn build_gallery(id: &str, model_name: &str, bundle: &ModelBundle, split: &DatasetSplit) -> anyhow::Result<GalleryIndex> {
    let mut proj = Vec::with_capacity(split.len());
    for i in 0..split.len() {
        let image = bundle.vis_processors.eval.process(split.raw_image(i)?.view())?;
        let f = bundle
            .model
            .extract_features(Some(&image.insert_axis(Axis(0))), None, FeatureMode::Image)?;
        let p = f.image_embeds_proj.expect("image mode sets the projection");
        proj.push(p.squeeze(0)?.to_vec1::<f32>()?);
    }
    Ok(GalleryIndex {
        gallery_id: id.to_string(),
        model: model_name.to_string(),
        ids: split.records.iter().map(|r| r.instance_id.clone()).collect(),
        image_embeds_proj: proj,
        thumbnails: split.records.iter().map(|r| media_url(&split.dataset, &r.image)).collect(),
    })
}

fn media_url(dataset: &str, image: &str) -> String {
    format!("/media/{dataset}/{image}")
}

/// The full API. `/media/<dataset>/` serves each dataset's media root, and a
/// configured static directory is served under `/`.
pub fn router(state: Arc<AppState>) -> Router {
    let mut app = Router::new()
        .route("/api/caption", post(caption))
        .route("/api/vqa", post(vqa))
        .route("/api/search", post(search))
        .route("/api/classify", post(classify))
        .route("/api/features", post(features))
        .route("/api/datasets", get(list_datasets))
        .route("/api/datasets/{name}/samples", get(samples));
    let mut media_roots = BTreeSet::new();
    for d in state.datasets.values() {
        if let Some(split) = d.splits.values().next() {
            media_roots.insert((d.name.clone(), split.media_root.clone()));
        }
    }
    for (name, root) in media_roots {
        app = app.nest_service(&format!("/media/{name}"), ServeDir::new(root));
    }
    let app = match &state.static_dir {
        Some(dir) => app.fallback_service(ServeDir::new(dir).fallback(axum::routing::any(not_found))),
        None => app.fallback(not_found),
    };
    app.with_state(state)
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such route")
}

/// `{error: {code, message}}` with a matching HTTP status.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }

    fn bad_request(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, code, message)
    }

    fn unprocessable(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_params", message)
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({"error": {"code": self.code, "message": self.message}});
        (self.status, axum::Json(body)).into_response()
    }
}

impl From<mmkit::Error> for ApiError {
    fn from(e: mmkit::Error) -> Self {
        use mmkit::Error as E;
        match e {
            E::BadK { .. }
            | E::EmptyAnswerList
            | E::EmptyLabels
            | E::DuplicateLabels(_)
            | E::MissingModality { .. }
            | E::UnsupportedMode { .. }
            | E::EmptyCaption
            | E::Precondition(_) => ApiError::unprocessable(e.to_string()),
            E::BadChannelCount(_) | E::Image(_) => ApiError::bad_request("bad_image", e.to_string()),
            other => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", other.to_string()),
        }
    }
}

/// JSON body extractor with structured errors: malformed JSON is 400, a
/// well-formed body that does not fit the schema is 422.
pub struct ApiJson<T>(pub T);

impl<S, T> FromRequest<S> for ApiJson<T>
where
    T: DeserializeOwned,
    S: Send + Sync,
{
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, Self::Rejection> {
        match axum::Json::<T>::from_request(req, state).await {
            Ok(axum::Json(v)) => Ok(ApiJson(v)),
            Err(JsonRejection::JsonDataError(e)) => Err(ApiError::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                "invalid_body",
                e.body_text(),
            )),
            Err(e) => Err(ApiError::bad_request("invalid_json", e.body_text())),
        }
    }
}

type ApiResult<T> = Result<axum::Json<T>, ApiError>;

impl AppState {
    fn model_for(&self, endpoint: &str) -> Result<&ModelBundle, ApiError> {
        self.endpoints
            .get(endpoint)
            .and_then(|n| self.models.get(n))
            .ok_or_else(|| ApiError::not_found(format!("no model serves `{endpoint}`")))
    }
}

/// Decodes a base64 image (a `data:` URL prefix is accepted) and runs the
/// model's eval image processor on it.
pub fn decode_image(b64: &str, processor: &ImageProcessor) -> Result<Array3<f32>, ApiError> {
    let payload = match b64.split_once(";base64,") {
        Some((head, rest)) if head.starts_with("data:") => rest,
        _ => b64,
    };
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(payload.trim())
        .map_err(|e| ApiError::bad_request("bad_image", format!("invalid base64: {e}")))?;
    let img = image::load_from_memory(&bytes)
        .map_err(|e| ApiError::bad_request("bad_image", format!("undecodable image: {e}")))?
        .to_rgb8();
    let raw = rgb_to_array(&img)?;
    Ok(processor.process(raw.view())?)
}

/// Runs `f` on the blocking pool so a forward pass never stalls the reactor.
async fn blocking<T, F>(state: &Arc<AppState>, f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&AppState) -> Result<T, ApiError> + Send + 'static,
{
    let state = Arc::clone(state);
    tokio::task::spawn_blocking(move || f(&state))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
}

#[derive(Debug, Deserialize)]
pub struct CaptionRequest {
    pub image: String,
    pub num_beams: Option<i64>,
    pub max_len: Option<i64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CaptionResponse {
    pub caption: String,
}

fn positive(name: &str, v: Option<i64>, default: usize) -> Result<usize, ApiError> {
    match v {
        None => Ok(default),
        Some(n) if n >= 1 => Ok(n as usize),
        Some(n) => Err(ApiError::unprocessable(format!("{name} must be at least 1, got {n}"))),
    }
}

async fn caption(State(state): State<Arc<AppState>>, ApiJson(req): ApiJson<CaptionRequest>) -> ApiResult<CaptionResponse> {
    let num_beams = positive("num_beams", req.num_beams, 3)?;
    let max_len = positive("max_len", req.max_len, 8)?;
    let caption = blocking(&state, move |s| {
        let bundle = s.model_for("caption")?;
        let image = decode_image(&req.image, &bundle.vis_processors.eval)?;
        match &bundle.model {
            Model::Caption(m) => Ok(m.generate(&image, max_len, num_beams)?),
            _ => Err(ApiError::unprocessable("configured caption model cannot generate text")),
        }
    })
    .await?;
    Ok(axum::Json(CaptionResponse { caption }))
}

#[derive(Debug, Deserialize)]
pub struct VqaRequest {
    pub image: String,
    pub question: String,
    pub answer_list: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct VqaResponse {
    pub answer: String,
    /// Softmax over candidate log-likelihoods.
    pub scores: BTreeMap<String, f64>,
}

async fn vqa(State(state): State<Arc<AppState>>, ApiJson(req): ApiJson<VqaRequest>) -> ApiResult<VqaResponse> {
    if req.answer_list.is_empty() {
        return Err(ApiError::unprocessable("answer_list is empty"));
    }
    let distinct: BTreeSet<&String> = req.answer_list.iter().collect();
    if distinct.len() != req.answer_list.len() {
        return Err(ApiError::unprocessable("answer_list has duplicates"));
    }
    blocking(&state, move |s| {
        let bundle = s.model_for("vqa")?;
        let image = decode_image(&req.image, &bundle.vis_processors.eval)?;
        let Model::Caption(m) = &bundle.model else {
            return Err(ApiError::unprocessable("configured vqa model cannot score answers"));
        };
        let question = bundle.text_processors.eval.process(&req.question);
        let loglik = m.answer_scores(&image, &question, &req.answer_list)?;
        let probs = softmax(&loglik);
        let best = argmax(&probs);
        Ok(axum::Json(VqaResponse {
            answer: req.answer_list[best].clone(),
            scores: req.answer_list.iter().cloned().zip(probs).collect(),
        }))
    })
    .await
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// First index of the maximum.
fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Deserialize)]
pub struct SearchRequest {
    pub gallery_id: String,
    pub query: String,
    pub k: i64,
}

#[derive(Debug, Serialize, Deserialize, Clone, PartialEq)]
pub struct SearchHit {
    pub id: String,
    pub score: f32,
    pub image_url: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SearchResponse {
    pub results: Vec<SearchHit>,
}

async fn search(State(state): State<Arc<AppState>>, ApiJson(req): ApiJson<SearchRequest>) -> ApiResult<SearchResponse> {
    let Some(gallery) = state.galleries.get(&req.gallery_id) else {
        return Err(ApiError::not_found(format!("unknown gallery `{}`", req.gallery_id)));
    };
    let n = gallery.ids.len();
    if req.k < 1 || req.k as usize > n {
        return Err(ApiError::unprocessable(format!("k={} outside 1..={n}", req.k)));
    }
    blocking(&state, move |s| {
        let g = &s.galleries[&req.gallery_id];
        let bundle = &s.models[&g.model];
        let query = bundle.text_processors.eval.process(&req.query);
        let mut hits: Vec<SearchHit> = multimodal_search(&g.image_embeds_proj, &query, &bundle.model, g.ids.len())?
            .into_iter()
            .map(|(i, score)| SearchHit {
                id: g.ids[i].clone(),
                score,
                image_url: g.thumbnails[i].clone(),
            })
            .collect();
        hits.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.id.cmp(&b.id)));
        hits.truncate(req.k as usize);
        Ok(axum::Json(SearchResponse { results: hits }))
    })
    .await
}

#[derive(Debug, Deserialize)]
pub struct ClassifyRequest {
    pub image: String,
    pub labels: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ClassifyResponse {
    pub label: String,
    /// Aligned with the request's `labels`.
    pub probabilities: Vec<f64>,
}

async fn classify(State(state): State<Arc<AppState>>, ApiJson(req): ApiJson<ClassifyRequest>) -> ApiResult<ClassifyResponse> {
    blocking(&state, move |s| {
        let bundle = s.model_for("classify")?;
        let image = decode_image(&req.image, &bundle.vis_processors.eval)?;
        let (label, probabilities) = zero_shot_classify(&bundle.model, &image, &req.labels, &s.classify_prompt)?;
        Ok(axum::Json(ClassifyResponse { label, probabilities }))
    })
    .await
}

#[derive(Debug, Deserialize)]
pub struct FeaturesRequest {
    pub image: Option<String>,
    pub text: Option<String>,
    pub mode: String,
    /// Also return the unpooled token embeddings.
    #[serde(default)]
    pub full: bool,
}

async fn features(State(state): State<Arc<AppState>>, ApiJson(req): ApiJson<FeaturesRequest>) -> ApiResult<Value> {
    let mode: FeatureMode = req
        .mode
        .parse()
        .map_err(|_| ApiError::unprocessable(format!("mode must be image, text or multimodal, got `{}`", req.mode)))?;
    blocking(&state, move |s| {
        let bundle = s.model_for("features")?;
        let image = req
            .image
            .as_deref()
            .map(|b| decode_image(b, &bundle.vis_processors.eval).map(|a| a.insert_axis(Axis(0))))
            .transpose()?;
        let text = req.text.as_deref().map(|t| vec![bundle.text_processors.eval.process(t)]);
        let f = bundle.model.extract_features(image.as_ref(), text.as_deref(), mode)?;
        let mut out = serde_json::Map::new();
        out.insert("mode".into(), json!(mode.to_string()));
        let vec1 = |t: &candle_core::Tensor| -> Result<Value, ApiError> {
            Ok(json!(t.squeeze(0).and_then(|r| r.to_vec1::<f32>()).map_err(mmkit::Error::from)?))
        };
        let mat = |t: &candle_core::Tensor| -> Result<Value, ApiError> {
            Ok(json!(t.squeeze(0).and_then(|r| r.to_vec2::<f32>()).map_err(mmkit::Error::from)?))
        };
        if let Some(t) = &f.image_embeds_proj {
            out.insert("image_embeds_proj".into(), vec1(t)?);
        }
        if let Some(t) = &f.text_embeds_proj {
            out.insert("text_embeds_proj".into(), vec1(t)?);
        }
        if req.full {
            for (key, t) in [
                ("image_embeds", &f.image_embeds),
                ("text_embeds", &f.text_embeds),
                ("multimodal_embeds", &f.multimodal_embeds),
            ] {
                if let Some(t) = t {
                    out.insert(key.into(), mat(t)?);
                }
            }
        } else if let Some(t) = &f.multimodal_embeds {
            // No projection exists for fused tokens; the first token stands in.
            let first = t.squeeze(0).and_then(|r| r.get(0)).and_then(|r| r.to_vec1::<f32>());
            out.insert("multimodal_embeds_cls".into(), json!(first.map_err(mmkit::Error::from)?));
        }
        Ok(axum::Json(Value::Object(out)))
    })
    .await
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub name: String,
    /// Split name to item count.
    pub splits: BTreeMap<String, usize>,
}

async fn list_datasets(State(state): State<Arc<AppState>>) -> axum::Json<Value> {
    let datasets: Vec<DatasetInfo> = state
        .datasets
        .values()
        .map(|d| DatasetInfo {
            name: d.name.clone(),
            splits: d.splits.iter().map(|(k, v)| (k.clone(), v.len())).collect(),
        })
        .collect();
    let galleries: Vec<&String> = state.galleries.keys().collect();
    axum::Json(json!({"datasets": datasets, "galleries": galleries}))
}

#[derive(Debug, Deserialize)]
pub struct PageQuery {
    pub split: String,
    #[serde(default)]
    pub offset: usize,
    #[serde(default = "default_limit")]
    pub limit: usize,
}

fn default_limit() -> usize {
    20
}

#[derive(Debug, Serialize, Deserialize, Clone, PartialEq)]
pub struct SampleItem {
    pub instance_id: String,
    pub image_url: String,
    pub text: String,
    pub extras: Value,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SamplePage {
    pub total: usize,
    pub offset: usize,
    pub items: Vec<SampleItem>,
}

async fn samples(
    State(state): State<Arc<AppState>>,
    UrlPath(name): UrlPath<String>,
    query: Result<Query<PageQuery>, axum::extract::rejection::QueryRejection>,
) -> ApiResult<SamplePage> {
    let Query(q) = query.map_err(|e| ApiError::unprocessable(e.body_text()))?;
    let dataset = state
        .datasets
        .get(&name)
        .ok_or_else(|| ApiError::not_found(format!("unknown dataset `{name}`")))?;
    let split = dataset
        .splits
        .get(&q.split)
        .ok_or_else(|| ApiError::not_found(format!("dataset `{name}` has no split `{}`", q.split)))?;
    if q.limit == 0 {
        return Err(ApiError::unprocessable("limit must be at least 1"));
    }
    let total = split.len();
    let start = q.offset.min(total);
    let end = start.saturating_add(q.limit).min(total);
    let items = split.records[start..end]
        .iter()
        .map(|r| {
            let captions: Vec<&str> = r.caption.as_ref().map(|c| c.texts()).unwrap_or_default();
            let text = r
                .question
                .clone()
                .or_else(|| captions.first().map(|s| s.to_string()))
                .unwrap_or_default();
            SampleItem {
                instance_id: r.instance_id.clone(),
                image_url: media_url(&name, &r.image),
                text,
                extras: json!({
                    "captions": captions,
                    "answers": r.answers,
                    "label": r.label.and_then(|l| split.label_names.get(l)),
                }),
            }
        })
        .collect();
    Ok(axum::Json(SamplePage {
        total,
        offset: start,
        items,
    }))
}

/// Reads `path` and builds the state; the usual entry point for binaries.
pub fn state_from_file(path: &Path) -> anyhow::Result<Arc<AppState>> {
    Ok(Arc::new(build_state(&ServiceConfig::from_file(path)?)?))
}
