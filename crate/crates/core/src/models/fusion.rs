use candle_core::{Device, Tensor};
use ndarray::Array4;

use super::encoders::UnimodalEncoders;
use super::losses::{itc_loss_grouped, itm_labels, itm_loss_from_logits, neighbor_negatives, text_groups};
use super::tokenizer::TokenBatch;
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{padding_mask, Block, Linear, ParamStore};

/// Dual-encoder body plus a cross-attending multimodal encoder and a
/// binary image-text matching head (ALBEF-style).
pub struct FusionEncoderModel {
    pub(crate) params: ParamStore,
    pub enc: UnimodalEncoders,
    fusion: Vec<Block>,
    itm_head: Linear,
    pub cfg: ModelConfig,
}

impl FusionEncoderModel {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        let mut params = ParamStore::new(cfg.init_seed);
        let enc = UnimodalEncoders::new(&mut params, &cfg)?;
        let fusion = (0..cfg.fusion_layers)
            .map(|i| {
                Block::new(
                    &mut params,
                    &format!("fusion.blocks.{i}"),
                    cfg.text_width,
                    cfg.num_heads,
                    cfg.mlp_ratio,
                    Some(cfg.vision_width),
                )
            })
            .collect::<Result<_>>()?;
        let itm_head = Linear::new(&mut params, "itm_head", cfg.text_width, 2, true)?;
        Ok(Self {
            params,
            enc,
            fusion,
            itm_head,
            cfg,
        })
    }

    pub fn device(&self) -> &Device {
        self.params.device()
    }

    /// Fused sequence (B, L, W): text tokens attending to image tokens.
    pub fn fuse(&self, text_embeds: &Tensor, tokens: &TokenBatch, image_embeds: &Tensor) -> Result<Tensor> {
        if text_embeds.dim(0)? != image_embeds.dim(0)? {
            return Err(Error::Shape("fusion: image and text batch sizes differ".into()));
        }
        let mask = padding_mask(&tokens.valid, self.device())?;
        let mut x = text_embeds.clone();
        for blk in &self.fusion {
            x = blk.forward(&x, Some(&mask), Some((image_embeds, None)))?;
        }
        Ok(x)
    }

    pub fn itm_logits(&self, fused: &Tensor) -> Result<Tensor> {
        self.itm_head.forward(&fused.narrow(1, 0, 1)?.squeeze(1)?)
    }

    /// Match probability for aligned (image, text) rows.
    pub fn itm_scores(&self, image_embeds: &Tensor, texts: &[String]) -> Result<Vec<f32>> {
        let tokens = self.enc.tokenizer.batch(texts);
        let text_embeds = self.enc.text.encode(&tokens, self.device())?;
        let logits = self.itm_logits(&self.fuse(&text_embeds, &tokens, image_embeds)?)?;
        let p = crate::nn::softmax_last(&logits)?;
        Ok(p.narrow(1, 1, 1)?.squeeze(1)?.to_vec1::<f32>()?)
    }

    /// Returns (itc, itm) for a batch of aligned pairs.
    pub fn itc_itm(&self, images: &Array4<f32>, texts: &[String]) -> Result<(Tensor, Tensor)> {
        let n = texts.len();
        if n < 2 {
            return Err(Error::DegenerateBatch(n));
        }
        let dev = self.device();
        let (img_embeds, ip) = self.enc.image_embeds(images, dev)?;
        let tokens = self.enc.tokenizer.batch(texts);
        let (txt_embeds, tp) = self.enc.text_embeds(&tokens, dev)?;
        let itc = itc_loss_grouped(&ip, &tp, &self.enc.temp()?, &text_groups(texts))?;

        let neg = neighbor_negatives(n);
        let neg_idx = Tensor::from_vec(neg.iter().map(|&i| i as u32).collect::<Vec<_>>(), n, dev)?;
        let all_text = Tensor::cat(&[&txt_embeds, &txt_embeds.index_select(&neg_idx, 0)?], 0)?;
        let mut all_tokens = tokens.clone();
        let neg_tokens = tokens.select(&neg);
        all_tokens.ids.extend(neg_tokens.ids);
        all_tokens.valid.extend(neg_tokens.valid);
        let all_images = Tensor::cat(&[&img_embeds, &img_embeds], 0)?;
        let fused = self.fuse(&all_text, &all_tokens, &all_images)?;
        // A "negative" that repeats the positive caption is a match.
        let mut labels = itm_labels(n);
        for (i, &j) in neg.iter().enumerate() {
            if texts[i] == texts[j] {
                labels[n + i] = 1;
            }
        }
        let itm = itm_loss_from_logits(&self.itm_logits(&fused)?, &labels)?;
        Ok((itc, itm))
    }
}
