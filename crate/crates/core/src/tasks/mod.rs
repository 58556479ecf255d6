//! Training-step and evaluation logic per task.

pub mod metrics;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use candle_core::Tensor;
use ndarray::{Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

pub use metrics::{bleu4, rank_row, recall_at_k, recall_from_rankings, vqa_accuracy, RecallResult};

use crate::config::{RunConfig, Value};
use crate::data::{Batch, DatasetSplit, RetrievalIndex, Sample};
use crate::error::{Error, Result};
use crate::models::Model;
use crate::nn::scalar_f64;
use crate::registry::{Namespace, Registry};

/// Depth of the ITM rerank for fusion models.
pub const RERANK_K: usize = 8;
const RECALL_KS: [usize; 3] = [1, 5, 10];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Retrieval,
    Captioning,
    Vqa,
    Classification,
}

/// Registry handle in the `task` namespace.
pub struct TaskEntry {
    pub kind: TaskKind,
}

pub(crate) fn register_builtins(r: &mut Registry) -> Result<()> {
    for (name, kind) in [
        ("captioning", TaskKind::Captioning),
        ("classification", TaskKind::Classification),
        ("retrieval", TaskKind::Retrieval),
        ("vqa", TaskKind::Vqa),
    ] {
        r.register(Namespace::Task, name, TaskEntry { kind })?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub name: String,
    pub kind: TaskKind,
    /// Loss-component weights; components not listed weigh 1.0.
    pub loss_weights: BTreeMap<String, f64>,
    pub num_beams: usize,
    pub max_len: usize,
    /// Text placed before class names in classification.
    pub prompt: String,
    /// Candidate answers for VQA; the split's own answers when absent.
    pub answer_list: Option<Vec<String>>,
    pub batch_size_eval: usize,
}

pub fn setup_task(registry: &Registry, cfg: &RunConfig) -> Result<Task> {
    let entry = registry.get::<TaskEntry>(Namespace::Task, cfg.task())?;
    let run = cfg.run();
    let mut loss_weights = BTreeMap::new();
    if let Some(Value::Map(m)) = run.get("loss_weights") {
        for (k, v) in m {
            let w = v
                .as_f64()
                .ok_or_else(|| Error::Validation(vec![format!("run.loss_weights.{k} must be a number")]))?;
            loss_weights.insert(k.clone(), w);
        }
    }
    Ok(Task {
        name: cfg.task().to_string(),
        kind: entry.kind,
        loss_weights,
        num_beams: run.get_usize_or("num_beams", 3).max(1),
        max_len: run.get_usize_or("max_len", 8).max(1),
        prompt: run.get_str("prompt").unwrap_or("a photo of a").to_string(),
        answer_list: run.get_str_list("answer_list"),
        batch_size_eval: run.get_usize_or("batch_size_eval", 64).max(1),
    })
}

/// Losses of one training step.
pub struct LossMap {
    pub total: Tensor,
    pub components: BTreeMap<String, f64>,
}

impl LossMap {
    pub fn total_f64(&self) -> Result<f64> {
        scalar_f64(&self.total)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub metrics: BTreeMap<String, f64>,
    pub agg_metrics: f64,
    /// One JSON record per evaluated item.
    #[serde(skip)]
    pub predictions: Vec<serde_json::Value>,
}

fn unsupported(model: &Model, task: &str) -> Error {
    Error::UnsupportedMode {
        arch: model.arch().to_string(),
        mode: task.to_string(),
    }
}

impl Task {
    fn weight(&self, component: &str) -> f64 {
        self.loss_weights.get(component).copied().unwrap_or(1.0)
    }

    fn class_text(&self, label: &str) -> String {
        if self.prompt.is_empty() {
            label.to_string()
        } else {
            format!("{} {label}", self.prompt)
        }
    }

    pub fn train_step(&self, model: &Model, batch: &Batch) -> Result<LossMap> {
        if batch.text_input.len() != batch.len() || batch.text_input.iter().any(|t| t.trim().is_empty()) {
            return Err(Error::Shape("batch is missing text_input".into()));
        }
        let mut parts: Vec<(&str, Tensor)> = Vec::new();
        match (self.kind, model) {
            (TaskKind::Retrieval, Model::Dual(m)) => parts.push(("itc", m.itc(&batch.images, &batch.text_input)?)),
            (TaskKind::Retrieval, Model::Fusion(m)) => {
                let (itc, itm) = m.itc_itm(&batch.images, &batch.text_input)?;
                parts.push(("itc", itc));
                parts.push(("itm", itm));
            }
            (TaskKind::Retrieval | TaskKind::Classification, _) => {
                let texts: Vec<String> = match self.kind {
                    TaskKind::Classification => batch.text_input.iter().map(|l| self.class_text(l)).collect(),
                    _ => batch.text_input.clone(),
                };
                let enc = model.enc();
                let (_, ip) = enc.image_embeds(&batch.images, model.device())?;
                let (_, tp) = enc.text_embeds(&enc.tokenizer.batch(&texts), model.device())?;
                let groups = crate::models::losses::text_groups(&texts);
                parts.push(("itc", crate::models::losses::itc_loss_grouped(&ip, &tp, &enc.temp()?, &groups)?));
            }
            (TaskKind::Captioning, Model::Caption(m)) => parts.push(("lm", m.lm_loss(&batch.images, &batch.text_input)?)),
            (TaskKind::Vqa, Model::Caption(m)) => {
                let answers = batch
                    .answers
                    .iter()
                    .map(|a| {
                        a.iter()
                            .max_by(|x, y| x.weight.total_cmp(&y.weight).then(y.answer.cmp(&x.answer)))
                            .map(|a| a.answer.clone())
                            .ok_or_else(|| Error::Shape("vqa batch item has no answers".into()))
                    })
                    .collect::<Result<Vec<_>>>()?;
                parts.push(("lm", m.qa_loss(&batch.images, &batch.text_input, &answers)?));
            }
            (_, _) => return Err(unsupported(model, &self.name)),
        }
        let mut components = BTreeMap::new();
        let mut total: Option<Tensor> = None;
        for (name, loss) in parts {
            components.insert(name.to_string(), scalar_f64(&loss)?);
            let weighted = loss.affine(self.weight(name), 0.0)?;
            total = Some(match total {
                None => weighted,
                Some(t) => (t + weighted)?,
            });
        }
        let total = total.expect("at least one loss component");
        Ok(LossMap { total, components })
    }

    pub fn evaluate(&self, model: &Model, split: &DatasetSplit) -> Result<EvalResult> {
        match self.kind {
            TaskKind::Retrieval => self.evaluate_retrieval(model, split),
            TaskKind::Captioning => self.evaluate_captioning(model, split),
            TaskKind::Vqa => self.evaluate_vqa(model, split),
            TaskKind::Classification => self.evaluate_classification(model, split),
        }
    }

    fn samples(&self, split: &DatasetSplit) -> Result<Vec<Sample>> {
        (0..split.len()).map(|i| split.get_item(i)).collect()
    }

    /// Image encoder outputs (N, 1 + patches, W) and projections for every
    /// sample, computed in chunks of `batch_size_eval`.
    fn image_features(&self, model: &Model, samples: &[Sample]) -> Result<(Tensor, Tensor)> {
        let mut embeds = Vec::new();
        let mut projs = Vec::new();
        for chunk in samples.chunks(self.batch_size_eval) {
            let images = stack(chunk.iter().map(|s| &s.image))?;
            let (e, p) = model.enc().image_embeds(&images, model.device())?;
            embeds.push(e);
            projs.push(p);
        }
        Ok((Tensor::cat(&embeds, 0)?, Tensor::cat(&projs, 0)?))
    }

    fn text_projections(&self, model: &Model, texts: &[String]) -> Result<Tensor> {
        let mut projs = Vec::new();
        for chunk in texts.chunks(self.batch_size_eval) {
            let (_, p) = model.enc().text_embeds(&model.tokenizer().batch(chunk), model.device())?;
            projs.push(p);
        }
        Ok(Tensor::cat(&projs, 0)?)
    }

    fn evaluate_retrieval(&self, model: &Model, split: &DatasetSplit) -> Result<EvalResult> {
        let index = split.retrieval_index();
        let samples = self.samples(split)?;
        let (img_embeds, img_proj) = self.image_features(model, &samples)?;
        let txt_proj = self.text_projections(model, &index.texts)?;
        let sim: Vec<Vec<f32>> = img_proj.matmul(&txt_proj.t()?)?.to_vec2()?;

        let mut i2t: Vec<Vec<usize>> = sim.iter().map(|r| rank_row(r)).collect();
        let mut t2i: Vec<Vec<usize>> = transpose(&sim).iter().map(|r| rank_row(r)).collect();
        if let Model::Fusion(m) = model {
            let k_i2t = RERANK_K.min(index.texts.len());
            for (i, ranking) in i2t.iter_mut().enumerate() {
                let top = &ranking[..k_i2t];
                let texts: Vec<String> = top.iter().map(|&j| index.texts[j].clone()).collect();
                let img = img_embeds.narrow(0, i, 1)?;
                let img = img.broadcast_as((k_i2t, img.dim(1)?, img.dim(2)?))?.contiguous()?;
                let scores = m.itm_scores(&img, &texts)?;
                *ranking = rerank_top_k(ranking, &scores);
            }
            let k_t2i = RERANK_K.min(samples.len());
            for (j, ranking) in t2i.iter_mut().enumerate() {
                let top: Vec<u32> = ranking[..k_t2i].iter().map(|&i| i as u32).collect();
                let ids = Tensor::new(top.as_slice(), model.device())?;
                let imgs = img_embeds.index_select(&ids, 0)?;
                let scores = m.itm_scores(&imgs, &vec![index.texts[j].clone(); k_t2i])?;
                *ranking = rerank_top_k(ranking, &scores);
            }
        }
        let mut result = retrieval_metrics(&i2t, &t2i, &index)?;
        result.predictions = samples
            .iter()
            .zip(&i2t)
            .map(|(s, r)| {
                serde_json::json!({
                    "instance_id": s.instance_id,
                    "top_texts": r.iter().take(5).map(|&j| index.texts[j].clone()).collect::<Vec<_>>(),
                })
            })
            .collect();
        Ok(result)
    }

    fn evaluate_captioning(&self, model: &Model, split: &DatasetSplit) -> Result<EvalResult> {
        let Model::Caption(m) = model else {
            return Err(unsupported(model, &self.name));
        };
        let mut bleu = 0.0;
        let mut exact = 0.0;
        let mut predictions = Vec::new();
        for (i, rec) in split.records.iter().enumerate() {
            let sample = split.get_item(i)?;
            let caption = m.generate(&sample.image, self.max_len, self.num_beams)?;
            let refs: Vec<String> = rec
                .caption
                .as_ref()
                .map(|c| c.texts().iter().map(|t| split.text_processor.process(t)).collect())
                .unwrap_or_default();
            let ref_strs: Vec<&str> = refs.iter().map(String::as_str).collect();
            bleu += bleu4(&caption, &ref_strs);
            if !caption.is_empty() && refs.contains(&caption) {
                exact += 1.0;
            }
            predictions.push(serde_json::json!({"instance_id": sample.instance_id, "caption": caption}));
        }
        let n = split.len().max(1) as f64;
        let bleu = bleu / n;
        Ok(EvalResult {
            metrics: BTreeMap::from([("bleu4".to_string(), bleu), ("exact_match".to_string(), exact / n)]),
            agg_metrics: bleu,
            predictions,
        })
    }

    fn evaluate_vqa(&self, model: &Model, split: &DatasetSplit) -> Result<EvalResult> {
        let Model::Caption(m) = model else {
            return Err(unsupported(model, &self.name));
        };
        let samples = self.samples(split)?;
        let candidates: Vec<String> = match &self.answer_list {
            Some(list) => list.iter().map(|a| split.text_processor.process(a)).collect(),
            None => samples
                .iter()
                .flat_map(|s| s.answers.iter().map(|a| a.answer.clone()))
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect(),
        };
        let mut acc = 0.0;
        let mut predictions = Vec::new();
        for s in &samples {
            let answer = m.predict_answer(&s.image, &s.text_input, &candidates)?;
            let gold: Vec<String> = s.answers.iter().map(|a| a.answer.clone()).collect();
            acc += vqa_accuracy(&answer, &gold);
            predictions.push(serde_json::json!({"instance_id": s.instance_id, "answer": answer}));
        }
        let acc = acc / samples.len().max(1) as f64;
        Ok(EvalResult {
            metrics: BTreeMap::from([("accuracy".to_string(), acc)]),
            agg_metrics: acc,
            predictions,
        })
    }

    fn evaluate_classification(&self, model: &Model, split: &DatasetSplit) -> Result<EvalResult> {
        let samples = self.samples(split)?;
        let labels = &split.label_names;
        check_labels(labels)?;
        let (_, img_proj) = self.image_features(model, &samples)?;
        let texts: Vec<String> = labels.iter().map(|l| self.class_text(l)).collect();
        let probs = class_probabilities(model, &img_proj, &self.text_projections(model, &texts)?)?;
        let mut correct = 0.0;
        let mut predictions = Vec::new();
        for (s, p) in samples.iter().zip(&probs) {
            let pred = argmax(p);
            if s.label == Some(pred) {
                correct += 1.0;
            }
            predictions.push(serde_json::json!({"instance_id": s.instance_id, "label": labels[pred]}));
        }
        let acc = correct / samples.len().max(1) as f64;
        Ok(EvalResult {
            metrics: BTreeMap::from([("accuracy".to_string(), acc)]),
            agg_metrics: acc,
            predictions,
        })
    }
}

fn stack<'a>(images: impl Iterator<Item = &'a Array3<f32>>) -> Result<Array4<f32>> {
    let views: Vec<_> = images.map(|i| i.view()).collect();
    ndarray::stack(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))
}

fn transpose(m: &[Vec<f32>]) -> Vec<Vec<f32>> {
    let cols = m.first().map_or(0, Vec::len);
    (0..cols).map(|j| m.iter().map(|r| r[j]).collect()).collect()
}

/// Reorders the first `scores.len()` entries of `ranking` by descending
/// score; equal scores keep their original order.
pub fn rerank_top_k(ranking: &[usize], scores: &[f32]) -> Vec<usize> {
    let k = scores.len().min(ranking.len());
    let mut top: Vec<(usize, f32)> = ranking[..k].iter().copied().zip(scores.iter().copied()).collect();
    top.sort_by(|a, b| b.1.total_cmp(&a.1));
    top.into_iter().map(|(i, _)| i).chain(ranking[k..].iter().copied()).collect()
}

/// Recall both directions from image→text and text→image rankings.
/// `agg_metrics` is the mean of the two R@1 values.
pub fn retrieval_metrics(i2t: &[Vec<usize>], t2i: &[Vec<usize>], index: &RetrievalIndex) -> Result<EvalResult> {
    if i2t.len() != index.img2txt.len() || t2i.len() != index.txt2img.len() {
        return Err(Error::Shape(format!(
            "{} image and {} text queries vs {} images and {} texts annotated",
            i2t.len(),
            t2i.len(),
            index.img2txt.len(),
            index.txt2img.len()
        )));
    }
    if i2t.iter().any(|r| r.len() != index.texts.len()) || t2i.iter().any(|r| r.len() != index.img2txt.len()) {
        return Err(Error::Shape("ranking length differs from gallery size".into()));
    }
    let txt = recall_from_rankings(i2t, &index.img2txt, &RECALL_KS)?;
    let img = recall_from_rankings(t2i, &index.txt2img, &RECALL_KS)?;
    let mut metrics = BTreeMap::new();
    for (prefix, r) in [("txt", &txt), ("img", &img)] {
        for (k, v) in &r.recall {
            metrics.insert(format!("{prefix}_r{k}"), *v);
        }
        metrics.insert(
            format!("{prefix}_r_mean"),
            r.recall.values().sum::<f64>() / r.recall.len() as f64,
        );
        metrics.insert(format!("{prefix}_median_rank"), r.median_rank);
    }
    let agg = (txt.recall[&1] + img.recall[&1]) / 2.0;
    metrics.insert("r1_mean".into(), agg);
    Ok(EvalResult {
        metrics,
        agg_metrics: agg,
        predictions: Vec::new(),
    })
}

fn argmax(p: &[f64]) -> usize {
    crate::models::generate::argmax_first(p).unwrap_or(0)
}

fn normalize_label(l: &str) -> String {
    l.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

fn check_labels(labels: &[String]) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::EmptyLabels);
    }
    let mut seen = BTreeSet::new();
    for l in labels {
        if !seen.insert(normalize_label(l)) {
            return Err(Error::DuplicateLabels(l.clone()));
        }
    }
    Ok(())
}

/// Softmax over `cos(image, label) / τ` for each image row.
fn class_probabilities(model: &Model, img_proj: &Tensor, label_proj: &Tensor) -> Result<Vec<Vec<f64>>> {
    let temp = model.temp()?;
    let cos: Vec<Vec<f32>> = img_proj.matmul(&label_proj.t()?)?.to_vec2()?;
    Ok(cos.iter().map(|row| softmax_f64(row, temp)).collect())
}

pub(crate) fn softmax_f64(row: &[f32], temp: f64) -> Vec<f64> {
    let logits: Vec<f64> = row.iter().map(|&c| c as f64 / temp).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// Zero-shot label for one image: prompt-prefixed label texts ranked by
/// cosine similarity at the model temperature.
pub fn zero_shot_classify(model: &Model, image: &Array3<f32>, labels: &[String], prompt: &str) -> Result<(String, Vec<f64>)> {
    check_labels(labels)?;
    let images = image.clone().insert_axis(Axis(0));
    let (_, ip) = model.enc().image_embeds(&images, model.device())?;
    let texts: Vec<String> = labels
        .iter()
        .map(|l| if prompt.is_empty() { l.clone() } else { format!("{prompt} {l}") })
        .collect();
    let (_, tp) = model.enc().text_embeds(&model.tokenizer().batch(&texts), model.device())?;
    let probs = class_probabilities(model, &ip, &tp)?.remove(0);
    Ok((labels[argmax(&probs)].clone(), probs))
}

/// Top-`k` gallery rows by cosine similarity to the query text; ties go to
/// the lower id. Returns `(row, score)` pairs.
pub fn multimodal_search(gallery_proj: &[Vec<f32>], query: &str, model: &Model, k: usize) -> Result<Vec<(usize, f32)>> {
    if k == 0 || k > gallery_proj.len() {
        return Err(Error::BadK {
            k,
            n: gallery_proj.len(),
        });
    }
    let (_, tp) = model
        .enc()
        .text_embeds(&model.tokenizer().batch(&[query.to_string()]), model.device())?;
    let q: Vec<f32> = tp.squeeze(0)?.to_vec1()?;
    let scores: Vec<f32> = gallery_proj
        .iter()
        .map(|g| g.iter().zip(&q).map(|(a, b)| a * b).sum())
        .collect();
    Ok(rank_row(&scores).into_iter().take(k).map(|i| (i, scores[i])).collect())
}

/// Appends predictions to `result/<split>_epoch<epoch>.ann` (replacing any
/// previous file) and one metric record to `evaluate.log`.
pub fn write_eval_outputs(output_dir: &Path, split: &str, epoch: usize, result: &EvalResult) -> Result<()> {
    let dir = output_dir.join("result");
    fs::create_dir_all(&dir)?;
    let mut body = String::new();
    for p in &result.predictions {
        body.push_str(&serde_json::to_string(p)?);
        body.push('\n');
    }
    fs::write(dir.join(format!("{split}_epoch{epoch}.ann")), body)?;
    let record = serde_json::json!({
        "split": split,
        "epoch": epoch,
        "metrics": result.metrics,
        "agg_metrics": result.agg_metrics,
    });
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(output_dir.join("evaluate.log"))?;
    writeln!(log, "{}", serde_json::to_string(&record)?)?;
    Ok(())
}
