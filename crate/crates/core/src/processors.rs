//! Image and text preprocessing.
//!
//! Images are resized with bilinear interpolation using half-pixel centers
//! (`align_corners = false`): output pixel `i` samples input coordinate
//! `(i + 0.5) * in / out - 0.5`, clamped to the valid range. Downscaling a
//! 2×2 image to 1×1 therefore yields the mean of the four pixels.

use ndarray::{Array3, ArrayView3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::ConfigTree;
use crate::error::{Error, Result};
use crate::registry::{Namespace, Registry};

#[derive(Debug, Clone, PartialEq)]
pub struct ImageProcessorSpec {
    pub image_size: usize,
    pub mean: [f32; 3],
    pub std: [f32; 3],
    pub train_augment: bool,
}

impl Default for ImageProcessorSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            mean: [0.5; 3],
            std: [0.5; 3],
            train_augment: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageProcessor {
    spec: ImageProcessorSpec,
}

impl ImageProcessor {
    pub fn new(spec: ImageProcessorSpec) -> Result<Self> {
        if spec.image_size == 0 {
            return Err(Error::InvalidProcessor("image_size must be positive".into()));
        }
        if spec.std.iter().any(|s| *s <= 0.0 || !s.is_finite()) {
            return Err(Error::InvalidProcessor("std components must be positive".into()));
        }
        Ok(Self { spec })
    }

    pub fn spec(&self) -> &ImageProcessorSpec {
        &self.spec
    }

    pub fn image_size(&self) -> usize {
        self.spec.image_size
    }

    /// Same processor with augmentation disabled.
    pub fn frozen(&self) -> Self {
        let mut spec = self.spec.clone();
        spec.train_augment = false;
        Self { spec }
    }

    /// Deterministic path: shorter-side resize followed by a center crop.
    pub fn process(&self, raw: ArrayView3<'_, u8>) -> Result<Array3<f32>> {
        self.process_inner(raw, None)
    }

    /// Applies the random-resized-crop + flip policy when `train_augment` is
    /// set; otherwise identical to [`ImageProcessor::process`].
    pub fn process_with_rng(&self, raw: ArrayView3<'_, u8>, rng: &mut ChaCha8Rng) -> Result<Array3<f32>> {
        self.process_inner(raw, Some(rng))
    }

    fn process_inner(&self, raw: ArrayView3<'_, u8>, rng: Option<&mut ChaCha8Rng>) -> Result<Array3<f32>> {
        let (h, w, c) = raw.dim();
        if c != 3 {
            return Err(Error::BadChannelCount(c));
        }
        if h == 0 || w == 0 {
            return Err(Error::Precondition("image must be at least 1x1".into()));
        }
        let s = self.spec.image_size;
        let resized = match rng {
            Some(rng) if self.spec.train_augment => {
                let (y0, x0, ch, cw) = random_resized_crop_box(h, w, rng);
                let mut out = resize_bilinear(raw, (y0, x0, ch, cw), s, s);
                if rng.gen_bool(0.5) {
                    out.invert_axis(ndarray::Axis(2));
                }
                out
            }
            _ => {
                let (nh, nw) = if h <= w {
                    (s, ((w as f64 * s as f64 / h as f64).round() as usize).max(s))
                } else {
                    (((h as f64 * s as f64 / w as f64).round() as usize).max(s), s)
                };
                let full = resize_bilinear(raw, (0, 0, h, w), nh, nw);
                let top = (nh - s) / 2;
                let left = (nw - s) / 2;
                full.slice(ndarray::s![.., top..top + s, left..left + s]).to_owned()
            }
        };
        let mut out = resized;
        for (ch, mut plane) in out.outer_iter_mut().enumerate() {
            let (m, sd) = (self.spec.mean[ch], self.spec.std[ch]);
            plane.mapv_inplace(|v| (v / 255.0 - m) / sd);
        }
        Ok(out)
    }
}

/// Crop box `(top, left, height, width)` covering 50%–100% of the area with
/// aspect ratio in [3/4, 4/3]; falls back to the full image.
fn random_resized_crop_box(h: usize, w: usize, rng: &mut ChaCha8Rng) -> (usize, usize, usize, usize) {
    let area = (h * w) as f64;
    for _ in 0..10 {
        let target = area * rng.gen_range(0.5..=1.0);
        let log_ratio = rng.gen_range((3.0f64 / 4.0).ln()..=(4.0f64 / 3.0).ln());
        let ratio = log_ratio.exp();
        let cw = (target * ratio).sqrt().round() as usize;
        let ch = (target / ratio).sqrt().round() as usize;
        if cw >= 1 && ch >= 1 && cw <= w && ch <= h {
            let top = rng.gen_range(0..=h - ch);
            let left = rng.gen_range(0..=w - cw);
            return (top, left, ch, cw);
        }
    }
    (0, 0, h, w)
}

/// Bilinear resize of the `(top, left, height, width)` region of an H×W×C
/// grid into a C×out_h×out_w float array (values stay in 0..=255).
pub fn resize_bilinear(
    raw: ArrayView3<'_, u8>,
    region: (usize, usize, usize, usize),
    out_h: usize,
    out_w: usize,
) -> Array3<f32> {
    let (top, left, rh, rw) = region;
    let c = raw.dim().2;
    let coords = |out: usize, len: usize| -> Vec<(usize, usize, f32)> {
        let scale = len as f64 / out as f64;
        (0..out)
            .map(|i| {
                let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(len - 1);
                (i0, i1, (src - i0 as f64) as f32)
            })
            .collect()
    };
    let ys = coords(out_h, rh);
    let xs = coords(out_w, rw);
    let mut out = Array3::<f32>::zeros((c, out_h, out_w));
    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
            for ch in 0..c {
                let p = |y: usize, x: usize| raw[[top + y, left + x, ch]] as f32;
                let a = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let b = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                out[[ch, oy, ox]] = a * (1.0 - fy) + b * fy;
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextProcessorSpec {
    pub lowercase: bool,
    pub strip_punct: bool,
    pub max_words: usize,
    pub prompt: String,
}

impl Default for TextProcessorSpec {
    fn default() -> Self {
        Self {
            lowercase: true,
            strip_punct: true,
            max_words: 30,
            prompt: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextProcessor {
    spec: TextProcessorSpec,
}

const PUNCT: &[char] = &['.', ',', '!', '?', ';', ':', '"', '\''];

impl TextProcessor {
    pub fn new(spec: TextProcessorSpec) -> Result<Self> {
        if spec.max_words == 0 {
            return Err(Error::InvalidProcessor("max_words must be at least 1".into()));
        }
        Ok(Self { spec })
    }

    pub fn spec(&self) -> &TextProcessorSpec {
        &self.spec
    }

    /// lowercase → strip punctuation → collapse whitespace → truncate → prompt.
    pub fn process(&self, raw: &str) -> String {
        let mut s = if self.spec.lowercase {
            raw.to_lowercase()
        } else {
            raw.to_string()
        };
        if self.spec.strip_punct {
            s.retain(|c| !PUNCT.contains(&c));
        }
        let body = s
            .split_whitespace()
            .take(self.spec.max_words)
            .collect::<Vec<_>>()
            .join(" ");
        format!("{}{}", self.spec.prompt, body)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Processor {
    Image(ImageProcessor),
    Text(TextProcessor),
}

impl Processor {
    pub fn into_image(self) -> Result<ImageProcessor> {
        match self {
            Processor::Image(p) => Ok(p),
            Processor::Text(_) => Err(Error::InvalidProcessor("expected an image processor".into())),
        }
    }

    pub fn into_text(self) -> Result<TextProcessor> {
        match self {
            Processor::Text(p) => Ok(p),
            Processor::Image(_) => Err(Error::InvalidProcessor("expected a text processor".into())),
        }
    }
}

/// Registry handle for the processor namespace.
pub struct ProcessorFactory(pub fn(&ConfigTree) -> Result<Processor>);

fn triple(cfg: &ConfigTree, key: &str, default: [f32; 3]) -> Result<[f32; 3]> {
    match cfg.get(key).and_then(|v| v.as_list()) {
        None => Ok(default),
        Some(list) if list.len() == 3 => {
            let mut out = [0.0; 3];
            for (o, v) in out.iter_mut().zip(list) {
                *o = v
                    .as_f64()
                    .ok_or_else(|| Error::InvalidProcessor(format!("{key} must be numeric")))? as f32;
            }
            Ok(out)
        }
        Some(_) => Err(Error::InvalidProcessor(format!("{key} must have 3 components"))),
    }
}

fn image_spec(cfg: &ConfigTree, train: bool) -> Result<ImageProcessorSpec> {
    let d = ImageProcessorSpec::default();
    Ok(ImageProcessorSpec {
        image_size: cfg.get_usize_or("image_size", d.image_size),
        mean: triple(cfg, "mean", d.mean)?,
        std: triple(cfg, "std", d.std)?,
        train_augment: cfg.get_bool("train_augment").unwrap_or(train),
    })
}

fn build_image_train(cfg: &ConfigTree) -> Result<Processor> {
    Ok(Processor::Image(ImageProcessor::new(image_spec(cfg, true)?)?))
}

fn build_image_eval(cfg: &ConfigTree) -> Result<Processor> {
    let mut spec = image_spec(cfg, false)?;
    spec.train_augment = false;
    Ok(Processor::Image(ImageProcessor::new(spec)?))
}

fn build_text(cfg: &ConfigTree) -> Result<Processor> {
    let d = TextProcessorSpec::default();
    Ok(Processor::Text(TextProcessor::new(TextProcessorSpec {
        lowercase: cfg.get_bool("lowercase").unwrap_or(d.lowercase),
        strip_punct: cfg.get_bool("strip_punct").unwrap_or(d.strip_punct),
        max_words: cfg.get_usize_or("max_words", d.max_words),
        prompt: cfg.get_str("prompt").unwrap_or_default().to_string(),
    })?))
}

pub(crate) fn register_builtins(r: &mut Registry) -> Result<()> {
    r.register(Namespace::Processor, "image_train", ProcessorFactory(build_image_train))?;
    r.register(Namespace::Processor, "image_eval", ProcessorFactory(build_image_eval))?;
    r.register(Namespace::Processor, "text_base", ProcessorFactory(build_text))?;
    Ok(())
}

pub fn build_processor(registry: &Registry, name: &str, cfg: &ConfigTree) -> Result<Processor> {
    let factory = registry.get::<ProcessorFactory>(Namespace::Processor, name)?;
    (factory.0)(cfg)
}

/// Builds from a `{name: ..., ...}` section.
pub fn build_processor_from_section(registry: &Registry, section: &ConfigTree) -> Result<Processor> {
    let name = section
        .get_str("name")
        .ok_or_else(|| Error::InvalidProcessor("processor section lacks `name`".into()))?;
    build_processor(registry, name, section)
}
