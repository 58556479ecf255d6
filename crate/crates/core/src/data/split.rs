use std::path::PathBuf;

use ndarray::{Array3, Array4, Axis};
use rand_chacha::ChaCha8Rng;

use super::{Answer, AnnotationRecord};
use crate::error::{Error, Result};
use crate::processors::{ImageProcessor, TextProcessor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskShape {
    Caption,
    Retrieval,
    Vqa,
    Classification,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Array3<f32>,
    pub text_input: String,
    pub instance_id: String,
    pub answers: Vec<Answer>,
    pub label: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub dataset: String,
    pub split: String,
    pub records: Vec<AnnotationRecord>,
    pub media_root: PathBuf,
    pub vis_processor: ImageProcessor,
    pub text_processor: TextProcessor,
    pub task_shape: TaskShape,
    pub is_train: bool,
    /// Class names for classification-shaped splits, indexed by label.
    pub label_names: Vec<String>,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn image_path(&self, index: usize) -> Result<PathBuf> {
        let rec = self.record(index)?;
        Ok(self.media_root.join(&rec.image))
    }

    fn record(&self, index: usize) -> Result<&AnnotationRecord> {
        self.records.get(index).ok_or(Error::IndexOutOfRange {
            index,
            len: self.records.len(),
        })
    }

    pub fn raw_image(&self, index: usize) -> Result<Array3<u8>> {
        load_rgb(&self.image_path(index)?)
    }

    /// Deterministic sample (augmentation disabled).
    pub fn get_item(&self, index: usize) -> Result<Sample> {
        let raw = self.raw_image(index)?;
        let image = self.vis_processor.process(raw.view())?;
        self.assemble(index, image)
    }

    /// Sample drawn with the split's processors in their configured mode.
    pub fn get_item_with_rng(&self, index: usize, rng: &mut ChaCha8Rng) -> Result<Sample> {
        let raw = self.raw_image(index)?;
        let image = self.vis_processor.process_with_rng(raw.view(), rng)?;
        self.assemble(index, image)
    }

    fn assemble(&self, index: usize, image: Array3<f32>) -> Result<Sample> {
        let rec = self.record(index)?;
        let text = match self.task_shape {
            TaskShape::Caption | TaskShape::Retrieval => rec
                .caption
                .as_ref()
                .and_then(|c| c.texts().first().map(|s| s.to_string()))
                .unwrap_or_default(),
            TaskShape::Vqa => rec.question.clone().unwrap_or_default(),
            TaskShape::Classification => rec
                .label
                .and_then(|l| self.label_names.get(l).cloned())
                .unwrap_or_default(),
        };
        let answers = rec
            .answers
            .iter()
            .flatten()
            .map(|a| Answer {
                answer: self.text_processor.process(&a.answer),
                weight: a.weight,
            })
            .collect();
        Ok(Sample {
            image,
            text_input: self.text_processor.process(&text),
            instance_id: rec.instance_id.clone(),
            answers,
            label: rec.label,
        })
    }

    /// Processed texts of every record with their owning image index.
    /// Ground truth treats identical processed captions as interchangeable.
    pub fn retrieval_index(&self) -> RetrievalIndex {
        let mut texts = Vec::new();
        let mut owner = Vec::new();
        for (i, rec) in self.records.iter().enumerate() {
            if let Some(c) = &rec.caption {
                for t in c.texts() {
                    texts.push(self.text_processor.process(t));
                    owner.push(i);
                }
            }
        }
        let n_img = self.records.len();
        let mut txt2img = vec![Vec::new(); texts.len()];
        let mut img2txt = vec![Vec::new(); n_img];
        for (j, t) in texts.iter().enumerate() {
            for (k, u) in texts.iter().enumerate() {
                if t == u {
                    let img = owner[k];
                    if !txt2img[j].contains(&img) {
                        txt2img[j].push(img);
                    }
                    if !img2txt[img].contains(&j) {
                        img2txt[img].push(j);
                    }
                }
            }
        }
        for v in txt2img.iter_mut().chain(img2txt.iter_mut()) {
            v.sort_unstable();
        }
        RetrievalIndex {
            texts,
            text_owner: owner,
            txt2img,
            img2txt,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    pub texts: Vec<String>,
    /// Image index each text was annotated on.
    pub text_owner: Vec<usize>,
    pub txt2img: Vec<Vec<usize>>,
    pub img2txt: Vec<Vec<usize>>,
}

pub fn load_rgb(path: &std::path::Path) -> Result<Array3<u8>> {
    let img = image::open(path)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
        .to_rgb8();
    rgb_to_array(&img)
}

pub fn rgb_to_array(img: &image::RgbImage) -> Result<Array3<u8>> {
    let (w, h) = img.dimensions();
    Array3::from_shape_vec((h as usize, w as usize, 3), img.as_raw().clone()).map_err(|e| Error::Image(e.to_string()))
}

/// Stacked samples.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Array4<f32>,
    pub text_input: Vec<String>,
    pub instance_ids: Vec<String>,
    pub answers: Vec<Vec<Answer>>,
    pub labels: Vec<Option<usize>>,
}

impl Batch {
    pub fn collate(samples: Vec<Sample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Shape("cannot collate an empty batch".into()));
        }
        let views: Vec<_> = samples.iter().map(|s| s.image.view()).collect();
        let images = ndarray::stack(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
        let mut text_input = Vec::new();
        let mut instance_ids = Vec::new();
        let mut answers = Vec::new();
        let mut labels = Vec::new();
        for s in samples {
            text_input.push(s.text_input);
            instance_ids.push(s.instance_id);
            answers.push(s.answers);
            labels.push(s.label);
        }
        Ok(Self {
            images,
            text_input,
            instance_ids,
            answers,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.images.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
