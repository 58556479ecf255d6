use candle_core::{Device, Tensor};
use ndarray::{Array3, Array4, Axis};

use super::encoders::{TextTower, UnimodalEncoders};
use super::generate::{argmax_first, beam_search, sequence_log_likelihood};
use super::tokenizer::{TokenBatch, EOS, PAD};
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{causal_mask, cross_entropy, log_softmax_last, padding_mask, Linear, ParamStore};

/// Image encoder + causal text decoder with cross-attention (BLIP-style).
/// Also carries a unimodal text encoder and projections for feature extraction.
pub struct CaptionModel {
    pub(crate) params: ParamStore,
    pub enc: UnimodalEncoders,
    decoder: TextTower,
    lm_head: Linear,
    pub cfg: ModelConfig,
}

impl CaptionModel {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        let mut params = ParamStore::new(cfg.init_seed);
        let enc = UnimodalEncoders::new(&mut params, &cfg)?;
        let vocab = enc.tokenizer.vocab_size();
        let decoder = TextTower::new(
            &mut params,
            "decoder",
            &cfg,
            vocab,
            cfg.decoder_layers,
            Some(cfg.vision_width),
        )?;
        let lm_head = Linear::new(&mut params, "lm_head", cfg.text_width, vocab, true)?;
        Ok(Self {
            params,
            enc,
            decoder,
            lm_head,
            cfg,
        })
    }

    pub fn device(&self) -> &Device {
        self.params.device()
    }

    /// Decoder hidden states (B, L, W) for `tokens`, causally masked.
    pub fn decode_hidden(&self, image_embeds: &Tensor, tokens: &TokenBatch) -> Result<Tensor> {
        let dev = self.device();
        let l = tokens.seq_len();
        let mask = causal_mask(l, dev)?.broadcast_add(&padding_mask(&tokens.valid, dev)?)?;
        self.decoder.forward(self.decoder.embed(tokens, dev)?, &mask, Some(image_embeds))
    }

    /// Next-token logits (B, L, V).
    pub fn decode_logits(&self, image_embeds: &Tensor, tokens: &TokenBatch) -> Result<Tensor> {
        self.lm_head.forward(&self.decode_hidden(image_embeds, tokens)?)
    }

    /// Teacher-forced cross-entropy on full id sequences (BOS .. EOS, PAD
    /// right-padded). Targets before `prefix_lens[b]` (counted in target
    /// positions) and PAD targets are excluded.
    pub fn lm_loss_ids(&self, image_embeds: &Tensor, ids: &[Vec<u32>], prefix_lens: &[usize]) -> Result<Tensor> {
        let full = TokenBatch::pad(ids.to_vec());
        let l = full.seq_len();
        if l < 2 {
            return Err(Error::EmptyCaption);
        }
        let inputs = TokenBatch {
            ids: full.ids.iter().map(|r| r[..l - 1].to_vec()).collect(),
            valid: full.valid.iter().map(|r| r[..l - 1].to_vec()).collect(),
        };
        let mut targets = Vec::new();
        let mut weights = Vec::new();
        for (b, row) in full.ids.iter().enumerate() {
            let skip = prefix_lens.get(b).copied().unwrap_or(0);
            for (pos, &t) in row[1..].iter().enumerate() {
                targets.push(t);
                weights.push(if t != PAD && pos >= skip { 1.0f32 } else { 0.0 });
            }
        }
        if weights.iter().all(|&w| w == 0.0) {
            return Err(Error::EmptyCaption);
        }
        let logits = self.decode_logits(image_embeds, &inputs)?;
        let v = logits.dim(2)?;
        let flat = logits.reshape((targets.len(), v))?;
        cross_entropy(&flat, &targets, Some(&weights))
    }

    pub fn lm_loss(&self, images: &Array4<f32>, captions: &[String]) -> Result<Tensor> {
        let (img, _) = self.enc.image_embeds(images, self.device())?;
        let ids: Vec<Vec<u32>> = captions.iter().map(|c| self.enc.tokenizer.encode(c)).collect();
        self.lm_loss_ids(&img, &ids, &[])
    }

    /// Answer-only LM loss: `[BOS] question answer [EOS]`, question targets masked.
    pub fn qa_loss(&self, images: &Array4<f32>, questions: &[String], answers: &[String]) -> Result<Tensor> {
        let (img, _) = self.enc.image_embeds(images, self.device())?;
        let (ids, prefix): (Vec<_>, Vec<_>) = questions
            .iter()
            .zip(answers)
            .map(|(q, a)| self.qa_ids(q, a))
            .unzip();
        self.lm_loss_ids(&img, &ids, &prefix)
    }

    /// Ids for `[BOS] q.. a.. [EOS]` and the number of question targets.
    fn qa_ids(&self, question: &str, answer: &str) -> (Vec<u32>, usize) {
        let tok = &self.enc.tokenizer;
        let q = tok.words_to_ids(question);
        let a = tok.words_to_ids(answer);
        let budget = tok.max_len().saturating_sub(2);
        let a_keep = a.len().min(budget);
        let q_keep = q.len().min(budget - a_keep);
        let mut ids = vec![super::tokenizer::BOS];
        ids.extend(&q[q.len() - q_keep..]);
        ids.extend(&a[..a_keep]);
        ids.push(EOS);
        (ids, q_keep)
    }

    pub fn generate(&self, image: &Array3<f32>, max_len: usize, num_beams: usize) -> Result<String> {
        let batch = image.clone().insert_axis(Axis(0));
        let (img, _) = self.enc.image_embeds(&batch, self.device())?;
        let max_len = max_len.min(self.enc.tokenizer.max_len() - 1);
        let hyp = beam_search(
            |prefixes| {
                let n = prefixes.len();
                let tokens = TokenBatch::pad(prefixes.to_vec());
                let l = tokens.seq_len();
                let enc = img.broadcast_as((n, img.dim(1)?, img.dim(2)?))?.contiguous()?;
                let logits = self.decode_logits(&enc, &tokens)?.narrow(1, l - 1, 1)?.squeeze(1)?;
                Ok(log_softmax_last(&logits)?.to_vec2::<f32>()?)
            },
            max_len,
            num_beams,
        )?;
        Ok(self.enc.tokenizer.decode(&hyp.tokens))
    }

    /// Log-likelihood of each candidate answer (plus EOS) given the image and question.
    pub fn answer_scores(&self, image: &Array3<f32>, question: &str, answers: &[String]) -> Result<Vec<f64>> {
        if answers.is_empty() {
            return Err(Error::EmptyAnswerList);
        }
        let batch = image.clone().insert_axis(Axis(0));
        let (img, _) = self.enc.image_embeds(&batch, self.device())?;
        let (ids, prefix): (Vec<_>, Vec<_>) = answers.iter().map(|a| self.qa_ids(question, a)).unzip();
        let full = TokenBatch::pad(ids.clone());
        let l = full.seq_len();
        let inputs = TokenBatch {
            ids: full.ids.iter().map(|r| r[..l - 1].to_vec()).collect(),
            valid: full.valid.iter().map(|r| r[..l - 1].to_vec()).collect(),
        };
        let n = answers.len();
        let enc = img.broadcast_as((n, img.dim(1)?, img.dim(2)?))?.contiguous()?;
        let logp = log_softmax_last(&self.decode_logits(&enc, &inputs)?)?.to_vec3::<f32>()?;
        Ok(ids
            .iter()
            .zip(&prefix)
            .zip(&logp)
            .map(|((row, &skip), lp)| sequence_log_likelihood(lp, &row[1..], skip))
            .collect())
    }

    pub fn predict_answer(&self, image: &Array3<f32>, question: &str, answers: &[String]) -> Result<String> {
        let scores = self.answer_scores(image, question, answers)?;
        let best = argmax_first(&scores).ok_or(Error::EmptyAnswerList)?;
        Ok(answers[best].clone())
    }
}
