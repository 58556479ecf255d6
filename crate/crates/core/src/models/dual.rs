use candle_core::{Device, Tensor};
use ndarray::Array4;

use super::encoders::UnimodalEncoders;
use super::losses::{itc_loss_grouped, text_groups};
use super::ModelConfig;
use crate::error::Result;
use crate::nn::ParamStore;

/// Two unimodal encoders whose projections meet only through cosine
/// similarity (CLIP-style).
pub struct DualEncoderModel {
    pub(crate) params: ParamStore,
    pub enc: UnimodalEncoders,
    pub cfg: ModelConfig,
}

impl DualEncoderModel {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        let mut params = ParamStore::new(cfg.init_seed);
        let enc = UnimodalEncoders::new(&mut params, &cfg)?;
        Ok(Self { params, enc, cfg })
    }

    pub fn device(&self) -> &Device {
        self.params.device()
    }

    pub fn itc(&self, images: &Array4<f32>, texts: &[String]) -> Result<Tensor> {
        let (_, ip) = self.enc.image_embeds(images, self.device())?;
        let (_, tp) = self.enc.text_embeds(&self.enc.tokenizer.batch(texts), self.device())?;
        itc_loss_grouped(&ip, &tp, &self.enc.temp()?, &text_groups(texts))
    }
}
