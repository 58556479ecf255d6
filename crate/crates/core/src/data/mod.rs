//! Dataset cards, annotation records, download cache, builders and splits.

mod builder;
mod download;
pub mod fixture;
mod shapes;
mod split;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub(crate) use builder::register_builtins;
pub use builder::{build_dataset, download_dataset, load_dataset, BuilderEntry, DatasetSplits};
pub use download::{
    download_and_cache, sha256_hex, CountingFetcher, Fetcher, Manifest, ManifestEntry, SplitStatus, UrlFetcher,
};
pub use shapes::{gen_shapes_dataset, ShapesLayout, COLORS, SHAPES};
pub use split::{load_rgb, rgb_to_array, Batch, DatasetSplit, RetrievalIndex, Sample, TaskShape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitInfo {
    pub split_name: String,
    /// `http(s)://` URL, `file://` URL, or filesystem path.
    pub url: String,
    pub sha256: String,
    pub record_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetCard {
    pub name: String,
    pub splits: Vec<SplitInfo>,
    pub media_root: String,
    #[serde(default)]
    pub description: String,
}

impl DatasetCard {
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for s in &self.splits {
            if !seen.insert(&s.split_name) {
                return Err(Error::Precondition(format!("duplicate split `{}` in card", s.split_name)));
            }
            let hex_ok = s.sha256.len() == 64 && s.sha256.chars().all(|c| matches!(c, '0'..='9' | 'a'..='f'));
            if !hex_ok {
                return Err(Error::Precondition(format!(
                    "split `{}`: sha256 must be 64 lowercase hex characters",
                    s.split_name
                )));
            }
        }
        Ok(())
    }

    pub fn split(&self, name: &str) -> Option<&SplitInfo> {
        self.splits.iter().find(|s| s.split_name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Caption {
    One(String),
    Many(Vec<String>),
}

impl Caption {
    pub fn texts(&self) -> Vec<&str> {
        match self {
            Caption::One(s) => vec![s.as_str()],
            Caption::Many(v) => v.iter().map(String::as_str).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Answer {
    pub answer: String,
    pub weight: f32,
}

/// One line of a `.ann` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub instance_id: String,
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<Caption>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answers: Option<Vec<Answer>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
}

impl AnnotationRecord {
    fn check(&self) -> std::result::Result<(), String> {
        if self.image.is_empty() {
            return Err("image path is empty".into());
        }
        if self.caption.is_none() && self.question.is_none() && self.label.is_none() {
            return Err("record has none of caption, question, label".into());
        }
        Ok(())
    }
}

/// Parses line-delimited annotation records. Blank lines are skipped but
/// still count toward the reported record index.
pub fn parse_annotations(text: &str) -> Result<Vec<AnnotationRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let rec: AnnotationRecord = serde_json::from_str(line).map_err(|e| Error::AnnotationParse {
                index: i,
                message: e.to_string(),
            })?;
            rec.check().map_err(|message| Error::AnnotationParse { index: i, message })?;
            Ok(rec)
        })
        .collect()
}

pub fn write_annotations(records: &[AnnotationRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("annotation records always serialize"));
        out.push('\n');
    }
    out
}
