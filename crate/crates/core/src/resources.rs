//! Default configuration files compiled into the library.
//!
//! Paths of the form `builtin://configs/...` resolve to these embedded
//! files; anything else is read from the filesystem.

use std::path::Path;

use crate::error::{Error, Result};

pub const BUILTIN_PREFIX: &str = "builtin://";

const FILES: &[(&str, &str)] = &[
    ("configs/default.yaml", include_str!("../configs/default.yaml")),
    ("configs/models/clip_toy_base.yaml", include_str!("../configs/models/clip_toy_base.yaml")),
    ("configs/models/albef_toy_base.yaml", include_str!("../configs/models/albef_toy_base.yaml")),
    ("configs/models/blip_toy_caption.yaml", include_str!("../configs/models/blip_toy_caption.yaml")),
    ("configs/models/blip_toy_vqa.yaml", include_str!("../configs/models/blip_toy_vqa.yaml")),
    ("configs/datasets/shapes_caption.yaml", include_str!("../configs/datasets/shapes_caption.yaml")),
    ("configs/datasets/shapes_retrieval.yaml", include_str!("../configs/datasets/shapes_retrieval.yaml")),
    ("configs/datasets/shapes_vqa.yaml", include_str!("../configs/datasets/shapes_vqa.yaml")),
    (
        "configs/datasets/shapes_classification.yaml",
        include_str!("../configs/datasets/shapes_classification.yaml"),
    ),
];

pub fn builtin(rel: &str) -> String {
    format!("{BUILTIN_PREFIX}{rel}")
}

pub fn read_text(path: &Path) -> Result<String> {
    let as_str = path.to_string_lossy();
    if let Some(rel) = as_str.strip_prefix(BUILTIN_PREFIX) {
        return FILES
            .iter()
            .find(|(p, _)| *p == rel)
            .map(|(_, text)| text.to_string())
            .ok_or_else(|| Error::FileMissing(path.to_path_buf()));
    }
    match std::fs::read_to_string(path) {
        Ok(s) => Ok(s),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(Error::FileMissing(path.to_path_buf())),
        Err(e) => Err(e.into()),
    }
}
