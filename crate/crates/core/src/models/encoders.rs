use candle_core::{Device, Tensor};
use ndarray::Array4;

use super::tokenizer::{TokenBatch, Tokenizer};
use super::{ImagePool, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::{l2_normalize, padding_mask, Block, Init, LayerNorm, Linear, ParamStore, INIT_STD};

pub const TEMP_MIN: f64 = 0.001;
pub const TEMP_MAX: f64 = 0.5;

/// (B, C, S, S) pixels → (B, (S/p)², C·p·p) patch rows, channel-major inside a patch.
pub fn patchify(images: &Array4<f32>, patch: usize, device: &Device) -> Result<Tensor> {
    let (b, c, h, w) = images.dim();
    if h % patch != 0 || w % patch != 0 {
        return Err(Error::Shape(format!("image {h}x{w} not divisible by patch {patch}")));
    }
    let (gh, gw) = (h / patch, w / patch);
    let mut out = Vec::with_capacity(images.len());
    for bi in 0..b {
        for py in 0..gh {
            for px in 0..gw {
                for ci in 0..c {
                    for y in 0..patch {
                        for x in 0..patch {
                            out.push(images[[bi, ci, py * patch + y, px * patch + x]]);
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_vec(out, (b, gh * gw, c * patch * patch), device)?)
}

pub struct ImageEncoder {
    patch_embed: Linear,
    cls: Tensor,
    pos: Tensor,
    blocks: Vec<Block>,
    ln: LayerNorm,
    patch: usize,
    image_size: usize,
}

impl ImageEncoder {
    pub fn new(ps: &mut ParamStore, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let w = cfg.vision_width;
        let n_patches = (cfg.image_size / cfg.patch_size).pow(2);
        Ok(Self {
            patch_embed: Linear::new(ps, &format!("{name}.patch_embed"), 3 * cfg.patch_size * cfg.patch_size, w, true)?,
            cls: ps.param(&format!("{name}.cls"), &[1, 1, w], Init::TruncNormal(INIT_STD))?,
            pos: ps.param(&format!("{name}.pos"), &[1, n_patches + 1, w], Init::TruncNormal(INIT_STD))?,
            blocks: (0..cfg.num_layers)
                .map(|i| Block::new(ps, &format!("{name}.blocks.{i}"), w, cfg.num_heads, cfg.mlp_ratio, None))
                .collect::<Result<_>>()?,
            ln: LayerNorm::new(ps, &format!("{name}.ln"), w)?,
            patch: cfg.patch_size,
            image_size: cfg.image_size,
        })
    }

    /// (B, 1 + patches, W) with the [CLS] token first.
    pub fn forward(&self, images: &Array4<f32>, device: &Device) -> Result<Tensor> {
        let (_, c, h, w) = images.dim();
        if c != 3 || h != self.image_size || w != self.image_size {
            return Err(Error::Shape(format!(
                "expected images of shape (B, 3, {s}, {s}), got (B, {c}, {h}, {w})",
                s = self.image_size
            )));
        }
        let patches = patchify(images, self.patch, device)?;
        let x = self.patch_embed.forward(&patches)?;
        let (b, _, width) = x.dims3()?;
        let cls = self.cls.broadcast_as((b, 1, width))?;
        let mut x = Tensor::cat(&[&cls, &x], 1)?.broadcast_add(&self.pos)?;
        for blk in &self.blocks {
            x = blk.forward(&x, None, None)?;
        }
        self.ln.forward(&x)
    }
}

/// Token + position embedding followed by transformer layers. Used both as
/// the bidirectional text encoder and, with cross-attention and a causal
/// mask, as the caption decoder.
pub struct TextTower {
    tok: Tensor,
    pos: Tensor,
    blocks: Vec<Block>,
    ln: LayerNorm,
    width: usize,
}

impl TextTower {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        cfg: &ModelConfig,
        vocab: usize,
        layers: usize,
        cross_dim: Option<usize>,
    ) -> Result<Self> {
        let w = cfg.text_width;
        Ok(Self {
            tok: ps.param(&format!("{name}.tok"), &[vocab, w], Init::TruncNormal(INIT_STD))?,
            pos: ps.param(&format!("{name}.pos"), &[cfg.max_txt_len, w], Init::TruncNormal(INIT_STD))?,
            blocks: (0..layers)
                .map(|i| Block::new(ps, &format!("{name}.blocks.{i}"), w, cfg.num_heads, cfg.mlp_ratio, cross_dim))
                .collect::<Result<_>>()?,
            ln: LayerNorm::new(ps, &format!("{name}.ln"), w)?,
            width: w,
        })
    }

    pub fn embed(&self, tokens: &TokenBatch, device: &Device) -> Result<Tensor> {
        let (b, l) = (tokens.len(), tokens.seq_len());
        let ids = tokens.tensor(device)?.flatten_all()?;
        let x = self.tok.index_select(&ids, 0)?.reshape((b, l, self.width))?;
        Ok(x.broadcast_add(&self.pos.narrow(0, 0, l)?.unsqueeze(0)?)?)
    }

    pub fn forward(&self, x: Tensor, mask: &Tensor, enc: Option<&Tensor>) -> Result<Tensor> {
        let mut x = x;
        for blk in &self.blocks {
            x = blk.forward(&x, Some(mask), enc.map(|e| (e, None)))?;
        }
        self.ln.forward(&x)
    }

    /// Bidirectional pass with key-padding mask.
    pub fn encode(&self, tokens: &TokenBatch, device: &Device) -> Result<Tensor> {
        let mask = padding_mask(&tokens.valid, device)?;
        self.forward(self.embed(tokens, device)?, &mask, None)
    }
}

/// Image encoder, text encoder, projections and temperature shared by every archetype.
pub struct UnimodalEncoders {
    pub image: ImageEncoder,
    pub text: TextTower,
    pub image_proj: Linear,
    pub text_proj: Linear,
    pub log_temp: Tensor,
    pub tokenizer: Tokenizer,
    pub image_pool: ImagePool,
}

impl UnimodalEncoders {
    pub fn new(ps: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let tokenizer = Tokenizer::new(&cfg.vocab, cfg.max_txt_len);
        let temp = cfg.temp.clamp(TEMP_MIN, TEMP_MAX);
        Ok(Self {
            image: ImageEncoder::new(ps, "visual", cfg)?,
            text: TextTower::new(ps, "text", cfg, tokenizer.vocab_size(), cfg.num_layers, None)?,
            image_proj: Linear::new(ps, "vision_proj", cfg.vision_width, cfg.embed_dim, false)?,
            text_proj: Linear::new(ps, "text_proj", cfg.text_width, cfg.embed_dim, false)?,
            log_temp: ps.param("log_temp", &[1], Init::Const(temp.ln() as f32))?,
            tokenizer,
            image_pool: cfg.image_pool,
        })
    }

    /// Temperature τ = exp(log τ) clamped to [0.001, 0.5], shape (1,).
    pub fn temp(&self) -> Result<Tensor> {
        Ok(self.log_temp.clamp(TEMP_MIN.ln(), TEMP_MAX.ln())?.exp()?)
    }

    pub fn image_embeds(&self, images: &Array4<f32>, device: &Device) -> Result<(Tensor, Tensor)> {
        let embeds = self.image.forward(images, device)?;
        let pooled = match self.image_pool {
            ImagePool::Cls => embeds.narrow(1, 0, 1)?.squeeze(1)?,
            ImagePool::Mean => embeds.mean(1)?,
            ImagePool::Max => embeds.max(1)?,
        };
        let proj = l2_normalize(&self.image_proj.forward(&pooled)?)?;
        Ok((embeds, proj))
    }

    pub fn text_embeds(&self, tokens: &TokenBatch, device: &Device) -> Result<(Tensor, Tensor)> {
        let embeds = self.text.encode(tokens, device)?;
        let cls = embeds.narrow(1, 0, 1)?.squeeze(1)?;
        let proj = l2_normalize(&self.text_proj.forward(&cls)?)?;
        Ok((embeds, proj))
    }
}
