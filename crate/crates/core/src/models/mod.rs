//! Toy image-text model zoo: dual encoder, fusion encoder and captioner.

pub mod caption;
pub mod checkpoint;
pub mod dual;
pub mod encoders;
pub mod fusion;
pub mod generate;
pub mod losses;
pub mod tokenizer;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::{Device, Tensor};
use ndarray::Array4;
use serde::{Deserialize, Serialize};

pub use caption::CaptionModel;
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointBundle, TensorMap};
pub use dual::DualEncoderModel;
pub use encoders::{UnimodalEncoders, TEMP_MAX, TEMP_MIN};
pub use fusion::FusionEncoderModel;
pub use tokenizer::{TokenBatch, Tokenizer};

use crate::config::{load_config, merge, ConfigTree, DefaultConfigs, Value};
use crate::data::{sha256_hex, Fetcher, UrlFetcher};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::processors::{build_processor_from_section, ImageProcessor, TextProcessor};
use crate::registry::{Namespace, Registry};

/// Hyperparameters read from a config's `model:` section.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub arch: String,
    pub model_type: String,
    pub image_size: usize,
    pub patch_size: usize,
    /// How the image tower's tokens become the vector that is projected.
    pub image_pool: ImagePool,
    pub vision_width: usize,
    pub text_width: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub max_txt_len: usize,
    pub fusion_layers: usize,
    pub decoder_layers: usize,
    pub temp: f64,
    pub vocab: Vec<String>,
    pub init_seed: u64,
}

/// Pooling of image tokens before projection. Max pooling over tokens
/// makes the image vector insensitive to where an object sits, which a
/// small tower trained from scratch does not learn on its own.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImagePool {
    Cls,
    Mean,
    Max,
}

impl ModelConfig {
    /// `section` is the `model:` subtree. `init_seed` falls back to `default_seed`.
    pub fn from_section(section: &ConfigTree, default_seed: u64) -> Result<Self> {
        let mut errors = Vec::new();
        let arch = section.get_str("arch").unwrap_or_default().to_string();
        if arch.is_empty() {
            errors.push("model.arch is required".to_string());
        }
        let cfg = Self {
            arch,
            model_type: section.get_str("model_type").unwrap_or("base").to_string(),
            image_size: section.get_usize_or("image_size", 64),
            patch_size: section.get_usize_or("patch_size", 8),
            image_pool: match section.get_str("image_pool").unwrap_or("max") {
                "cls" => ImagePool::Cls,
                "mean" => ImagePool::Mean,
                "max" => ImagePool::Max,
                other => {
                    errors.push(format!("model.image_pool must be cls, mean or max, got `{other}`"));
                    ImagePool::Max
                }
            },
            vision_width: section.get_usize_or("vision_width", 128),
            text_width: section.get_usize_or("text_width", 128),
            embed_dim: section.get_usize_or("embed_dim", 64),
            num_layers: section.get_usize_or("num_layers", 2),
            num_heads: section.get_usize_or("num_heads", 4),
            mlp_ratio: section.get_usize_or("mlp_ratio", 4),
            max_txt_len: section.get_usize_or("max_txt_len", 16),
            fusion_layers: section.get_usize_or("fusion_layers", 2),
            decoder_layers: section.get_usize_or("decoder_layers", 2),
            temp: section.get_f64_or("temp", 0.07),
            vocab: section.get_str_list("vocab").unwrap_or_default(),
            init_seed: section.get_i64("init_seed").map(|s| s as u64).unwrap_or(default_seed),
        };
        for (k, v) in [
            ("image_size", cfg.image_size),
            ("patch_size", cfg.patch_size),
            ("vision_width", cfg.vision_width),
            ("text_width", cfg.text_width),
            ("embed_dim", cfg.embed_dim),
            ("num_heads", cfg.num_heads),
            ("mlp_ratio", cfg.mlp_ratio),
        ] {
            if v == 0 {
                errors.push(format!("model.{k} must be positive"));
            }
        }
        if cfg.patch_size > 0 && cfg.image_size % cfg.patch_size != 0 {
            errors.push("model.image_size must be a multiple of model.patch_size".into());
        }
        if cfg.num_heads > 0 && (cfg.vision_width % cfg.num_heads != 0 || cfg.text_width % cfg.num_heads != 0) {
            errors.push("model widths must be divisible by model.num_heads".into());
        }
        if cfg.max_txt_len < 3 {
            errors.push("model.max_txt_len must be at least 3".into());
        }
        if !(cfg.temp > 0.0) {
            errors.push("model.temp must be positive".into());
        }
        if cfg.vocab.is_empty() {
            errors.push("model.vocab must list at least one word".into());
        }
        if errors.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Validation(errors))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Dual,
    Fusion,
    Caption,
}

/// Pretrained weights a card can point at.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointRef {
    pub url: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelCard {
    pub arch: String,
    pub model_type: String,
    pub default_config: String,
    pub checkpoint: Option<CheckpointRef>,
}

/// Registry handle in the `model` namespace, keyed by arch.
pub struct ModelEntry {
    pub kind: ModelKind,
    pub cards: BTreeMap<String, ModelCard>,
}

impl ModelEntry {
    pub fn new(arch: &str, kind: ModelKind, cards: impl IntoIterator<Item = (String, String, Option<CheckpointRef>)>) -> Self {
        let cards = cards
            .into_iter()
            .map(|(model_type, default_config, checkpoint)| {
                (
                    model_type.clone(),
                    ModelCard {
                        arch: arch.to_string(),
                        model_type,
                        default_config,
                        checkpoint,
                    },
                )
            })
            .collect();
        Self { kind, cards }
    }

    pub fn card(&self, arch: &str, model_type: &str) -> Result<&ModelCard> {
        self.cards.get(model_type).ok_or_else(|| Error::NotFound {
            namespace: format!("model_type of {arch}"),
            name: model_type.to_string(),
            suggestions: self.cards.keys().cloned().collect(),
        })
    }
}

pub(crate) fn register_builtins(r: &mut Registry) -> Result<()> {
    use crate::resources::builtin;
    let cfg = |f: &str| builtin(&format!("configs/models/{f}.yaml"));
    let entries = [
        ("clip_toy", ModelKind::Dual, vec![("base", "clip_toy_base")]),
        ("albef_toy", ModelKind::Fusion, vec![("base", "albef_toy_base")]),
        (
            "blip_toy",
            ModelKind::Caption,
            vec![("caption", "blip_toy_caption"), ("vqa", "blip_toy_vqa")],
        ),
    ];
    for (arch, kind, types) in entries {
        let cards = types.into_iter().map(|(t, f)| (t.to_string(), cfg(f), None));
        r.register(Namespace::Model, arch, ModelEntry::new(arch, kind, cards))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    Image,
    Text,
    Multimodal,
}

impl FeatureMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FeatureMode::Image => "image",
            FeatureMode::Text => "text",
            FeatureMode::Multimodal => "multimodal",
        }
    }
}

impl fmt::Display for FeatureMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FeatureMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image" => Ok(FeatureMode::Image),
            "text" => Ok(FeatureMode::Text),
            "multimodal" => Ok(FeatureMode::Multimodal),
            _ => Err(Error::NotFound {
                namespace: "feature mode".into(),
                name: s.into(),
                suggestions: vec!["image".into(), "multimodal".into(), "text".into()],
            }),
        }
    }
}

/// Output of [`Model::extract_features`]. Only the fields of the requested
/// mode are set.
#[derive(Debug, Clone, Default)]
pub struct FeatureBundle {
    /// (B, 1 + patches, W_i), [CLS] first.
    pub image_embeds: Option<Tensor>,
    /// (B, L, W_t).
    pub text_embeds: Option<Tensor>,
    /// (B, L, W_t).
    pub multimodal_embeds: Option<Tensor>,
    /// (B, d), unit norm.
    pub image_embeds_proj: Option<Tensor>,
    /// (B, d), unit norm.
    pub text_embeds_proj: Option<Tensor>,
}

pub enum Model {
    Dual(DualEncoderModel),
    Fusion(FusionEncoderModel),
    Caption(CaptionModel),
}

impl Model {
    pub fn build(kind: ModelKind, cfg: ModelConfig) -> Result<Self> {
        Ok(match kind {
            ModelKind::Dual => Model::Dual(DualEncoderModel::new(cfg)?),
            ModelKind::Fusion => Model::Fusion(FusionEncoderModel::new(cfg)?),
            ModelKind::Caption => Model::Caption(CaptionModel::new(cfg)?),
        })
    }

    /// Builds from a `model:` section, resolving the arch through the registry.
    pub fn from_section(registry: &Registry, section: &ConfigTree, default_seed: u64) -> Result<Self> {
        let cfg = ModelConfig::from_section(section, default_seed)?;
        let entry = registry.get::<ModelEntry>(Namespace::Model, &cfg.arch)?;
        entry.card(&cfg.arch, &cfg.model_type)?;
        Self::build(entry.kind, cfg)
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Dual(_) => ModelKind::Dual,
            Model::Fusion(_) => ModelKind::Fusion,
            Model::Caption(_) => ModelKind::Caption,
        }
    }

    pub fn cfg(&self) -> &ModelConfig {
        match self {
            Model::Dual(m) => &m.cfg,
            Model::Fusion(m) => &m.cfg,
            Model::Caption(m) => &m.cfg,
        }
    }

    pub fn arch(&self) -> &str {
        &self.cfg().arch
    }

    pub fn model_type(&self) -> &str {
        &self.cfg().model_type
    }

    pub fn params(&self) -> &ParamStore {
        match self {
            Model::Dual(m) => &m.params,
            Model::Fusion(m) => &m.params,
            Model::Caption(m) => &m.params,
        }
    }

    pub fn enc(&self) -> &UnimodalEncoders {
        match self {
            Model::Dual(m) => &m.enc,
            Model::Fusion(m) => &m.enc,
            Model::Caption(m) => &m.enc,
        }
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.enc().tokenizer
    }

    pub fn device(&self) -> &Device {
        self.params().device()
    }

    /// Current temperature τ.
    pub fn temp(&self) -> Result<f64> {
        crate::nn::scalar_f64(&self.enc().temp()?)
    }

    /// Keeps log τ inside the clamp range after an optimizer update.
    pub fn post_step(&self) -> Result<()> {
        if let Some(v) = self.params().get("log_temp") {
            let clamped = v.as_tensor().clamp(TEMP_MIN.ln(), TEMP_MAX.ln())?;
            v.set(&clamped)?;
        }
        Ok(())
    }

    pub fn export_params(&self) -> Result<TensorMap> {
        self.params().export()
    }

    pub fn import_params(&self, params: &TensorMap) -> Result<()> {
        self.params().import(params)
    }

    /// Loads parameters from a bundle written by the same arch.
    pub fn apply_checkpoint(&self, bundle: &CheckpointBundle) -> Result<()> {
        if bundle.arch != self.arch() {
            return Err(Error::IncompatibleArch {
                expected: self.arch().to_string(),
                found: bundle.arch.clone(),
            });
        }
        self.import_params(&bundle.params)?;
        self.post_step()
    }

    /// Bundle holding only this model's parameters.
    pub fn to_bundle(&self, config: &str) -> Result<CheckpointBundle> {
        Ok(CheckpointBundle {
            arch: self.arch().to_string(),
            model_type: self.model_type().to_string(),
            config: config.to_string(),
            params: self.export_params()?,
            optimizer: TensorMap::new(),
            aux: serde_json::Value::Null,
        })
    }

    pub fn extract_features(
        &self,
        images: Option<&Array4<f32>>,
        texts: Option<&[String]>,
        mode: FeatureMode,
    ) -> Result<FeatureBundle> {
        let missing = |field: &str| Error::MissingModality {
            mode: mode.to_string(),
            field: field.to_string(),
        };
        let dev = self.device();
        let enc = self.enc();
        let mut out = FeatureBundle::default();
        match mode {
            FeatureMode::Image => {
                let (e, p) = enc.image_embeds(images.ok_or_else(|| missing("image"))?, dev)?;
                out.image_embeds = Some(e);
                out.image_embeds_proj = Some(p);
            }
            FeatureMode::Text => {
                let tokens = enc.tokenizer.batch(texts.ok_or_else(|| missing("text_input"))?);
                let (e, p) = enc.text_embeds(&tokens, dev)?;
                out.text_embeds = Some(e);
                out.text_embeds_proj = Some(p);
            }
            FeatureMode::Multimodal => {
                if let Model::Dual(_) = self {
                    return Err(Error::UnsupportedMode {
                        arch: self.arch().to_string(),
                        mode: mode.to_string(),
                    });
                }
                let images = images.ok_or_else(|| missing("image"))?;
                let texts = texts.ok_or_else(|| missing("text_input"))?;
                if images.dim().0 != texts.len() {
                    return Err(Error::Shape(format!(
                        "{} images vs {} texts in multimodal request",
                        images.dim().0,
                        texts.len()
                    )));
                }
                let image_embeds = enc.image.forward(images, dev)?;
                let tokens = enc.tokenizer.batch(texts);
                out.multimodal_embeds = Some(match self {
                    Model::Fusion(m) => m.fuse(&enc.text.encode(&tokens, dev)?, &tokens, &image_embeds)?,
                    Model::Caption(m) => m.decode_hidden(&image_embeds, &tokens)?,
                    Model::Dual(_) => unreachable!("rejected above"),
                });
            }
        }
        Ok(out)
    }
}

/// Train and eval variants of a processor.
#[derive(Debug, Clone)]
pub struct ProcessorPair<T> {
    pub train: T,
    pub eval: T,
}

/// Model plus the processors named in its default config.
pub struct ModelBundle {
    pub model: Model,
    pub vis_processors: ProcessorPair<ImageProcessor>,
    pub text_processors: ProcessorPair<TextProcessor>,
}

/// Builds `name`/`model_type` from its default config and loads the card's
/// checkpoint if it declares one. With `is_eval` the train-mode image
/// processor is frozen to the deterministic path.
pub fn load_model(registry: &Registry, name: &str, model_type: &str, is_eval: bool) -> Result<ModelBundle> {
    load_model_with(registry, name, model_type, is_eval, &UrlFetcher)
}

pub fn load_model_with(
    registry: &Registry,
    name: &str,
    model_type: &str,
    is_eval: bool,
    fetcher: &dyn Fetcher,
) -> Result<ModelBundle> {
    let entry = registry.get::<ModelEntry>(Namespace::Model, name)?;
    let card = entry.card(name, model_type)?;
    let tree = load_config(&card.default_config)?;
    let model = Model::build(entry.kind, ModelConfig::from_section(&tree.section("model"), 0)?)?;
    if let Some(ckpt) = &card.checkpoint {
        let bytes = fetch_checkpoint(registry, card, ckpt, fetcher)?;
        model.apply_checkpoint(&checkpoint::decode_checkpoint(&bytes)?)?;
    }
    bundle_with_processors(registry, model, &tree, is_eval)
}

/// Rebuilds a model from a checkpoint file. The config snapshot inside the
/// checkpoint sizes the network and names the processors; when it is empty
/// the default config for the checkpoint's arch and model type is used.
pub fn load_model_from_checkpoint(registry: &Registry, path: &Path, is_eval: bool) -> Result<ModelBundle> {
    let bundle = load_checkpoint(path)?;
    let entry = registry.get::<ModelEntry>(Namespace::Model, &bundle.arch)?;
    let default = load_config(&entry.card(&bundle.arch, &bundle.model_type)?.default_config)?;
    let tree = if bundle.config.trim().is_empty() {
        default
    } else {
        merge(&default, &ConfigTree::parse_str(&bundle.config)?)?
    };
    let model = Model::build(entry.kind, ModelConfig::from_section(&tree.section("model"), 0)?)?;
    model.apply_checkpoint(&bundle)?;
    bundle_with_processors(registry, model, &tree, is_eval)
}

fn bundle_with_processors(registry: &Registry, model: Model, tree: &ConfigTree, is_eval: bool) -> Result<ModelBundle> {
    let proc = |kind: &str, mode: &str| build_processor_from_section(registry, &tree.section(&format!("preprocess.{kind}.{mode}")));
    let vis_train = proc("vis_processor", "train")?.into_image()?;
    let vis_eval = proc("vis_processor", "eval")?.into_image()?;
    Ok(ModelBundle {
        model,
        vis_processors: ProcessorPair {
            train: if is_eval { vis_train.frozen() } else { vis_train },
            eval: vis_eval,
        },
        text_processors: ProcessorPair {
            train: proc("text_processor", "train")?.into_text()?,
            eval: proc("text_processor", "eval")?.into_text()?,
        },
    })
}

/// Fetches and verifies checkpoint bytes, reusing a verified copy under
/// `<cache_root>/models/` when the registry has a cache root.
fn fetch_checkpoint(registry: &Registry, card: &ModelCard, ckpt: &CheckpointRef, fetcher: &dyn Fetcher) -> Result<Vec<u8>> {
    let cached: Option<PathBuf> = registry
        .get_value("cache_root")
        .ok()
        .map(|root| PathBuf::from(root).join("models").join(format!("{}_{}.ckpt", card.arch, card.model_type)));
    if let Some(path) = &cached {
        if let Ok(bytes) = fs::read(path) {
            if sha256_hex(&bytes) == ckpt.sha256 {
                return Ok(bytes);
            }
        }
    }
    let bytes = fetcher.fetch(&ckpt.url)?;
    let actual = sha256_hex(&bytes);
    if actual != ckpt.sha256 {
        return Err(Error::ChecksumMismatch {
            split: format!("{}/{} checkpoint", card.arch, card.model_type),
            expected: ckpt.sha256.clone(),
            actual,
        });
    }
    if let Some(path) = &cached {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, &bytes)?;
        fs::rename(&tmp, path)?;
    }
    Ok(bytes)
}

/// Default config path for `(arch, model_type)`.
pub(crate) fn model_default_config(registry: &Registry, arch: &str, model_type: &str) -> Result<String> {
    let entry = registry.get::<ModelEntry>(Namespace::Model, arch)?;
    Ok(entry.card(arch, model_type)?.default_config.clone())
}

/// Builds the model for a run config: `model.init_seed`, else `run.seed`.
/// When `model.checkpoint` is set the weights are loaded from that path.
pub fn model_for_run(registry: &Registry, tree: &ConfigTree) -> Result<Model> {
    let seed = tree.get_i64("run.seed").unwrap_or(0) as u64;
    let model = Model::from_section(registry, &tree.section("model"), seed)?;
    if let Some(Value::Str(path)) = tree.get("model.checkpoint") {
        let bundle = load_checkpoint(std::path::Path::new(path))?;
        model.apply_checkpoint(&bundle)?;
    }
    Ok(model)
}

impl DefaultConfigs for Registry {
    fn library_default(&self) -> Option<String> {
        self.get_value("library_default_config").ok().map(str::to_string)
    }

    fn model_default(&self, arch: &str, model_type: &str) -> Result<String> {
        model_default_config(self, arch, model_type)
    }

    fn dataset_default(&self, name: &str) -> Result<String> {
        let entry = self.get::<crate::data::BuilderEntry>(Namespace::DatasetBuilder, name)?;
        Ok(entry.default_config.clone())
    }
}
