//! Synthetic "shapes" corpus: one colored shape per 64×64 image on white,
//! captioned "a <color> <shape>".
//!
//! Record `i` shows color `COLORS[(i % 16) / 4]` and shape `SHAPES[i % 4]`,
//! so any 16 consecutive records cover every combination. Position and size
//! jitter come from a ChaCha stream seeded with `seed`. Records are split by
//! index into train / val / test with `floor(n / 10)` each for val and test.

use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{sha256_hex, write_annotations, Answer, AnnotationRecord, Caption, DatasetCard, SplitInfo};
use crate::error::{Error, Result};

pub const COLORS: [&str; 4] = ["red", "green", "blue", "yellow"];
pub const SHAPES: [&str; 4] = ["circle", "square", "triangle", "cross"];

const RGB: [[u8; 3]; 4] = [[220, 30, 30], [30, 160, 50], [30, 60, 220], [230, 200, 20]];
const SIZE: u32 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapesLayout {
    Caption,
    Vqa,
    Classification,
}

pub fn combo(i: usize) -> (usize, usize) {
    ((i % 16) / 4, i % 4)
}

pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let val = n / 10;
    let test = n / 10;
    (n - val - test, val, test)
}

fn inside(shape: usize, dx: f32, dy: f32, r: f32) -> bool {
    match shape {
        0 => dx * dx + dy * dy <= r * r,
        1 => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
        2 => {
            // apex up, base at dy = 0.8 r
            let t = (dy + r) / (1.8 * r);
            (0.0..=1.0).contains(&t) && dx.abs() <= t * r
        }
        _ => {
            let arm = r / 3.0;
            (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
        }
    }
}

fn render(color: usize, shape: usize, cx: f32, cy: f32, r: f32) -> RgbImage {
    RgbImage::from_fn(SIZE, SIZE, |x, y| {
        let (dx, dy) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
        if inside(shape, dx, dy, r) {
            Rgb(RGB[color])
        } else {
            Rgb([255, 255, 255])
        }
    })
}

/// Writes the caption-shaped corpus to `out_dir` and returns its card.
pub fn gen_shapes_dataset(n: usize, seed: u64, out_dir: &Path) -> Result<DatasetCard> {
    gen_shapes_dataset_as(n, seed, out_dir, "shapes_caption", ShapesLayout::Caption)
}

/// Layout: `images/NNNNN.png`, `source/<split>.ann`, `card.json`. The card's
/// media root is `out_dir`, and record image paths are relative to it.
pub fn gen_shapes_dataset_as(
    n: usize,
    seed: u64,
    out_dir: &Path,
    name: &str,
    layout: ShapesLayout,
) -> Result<DatasetCard> {
    if n < 4 || n % 4 != 0 {
        return Err(Error::Precondition(format!(
            "shapes corpus size must be a positive multiple of 4, got {n}"
        )));
    }
    let images = out_dir.join("images");
    let source = out_dir.join("source");
    fs::create_dir_all(&images)?;
    fs::create_dir_all(&source)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_image = Vec::with_capacity(n);
    for i in 0..n {
        let (color, shape) = combo(i);
        let cx = 32.0 + rng.gen_range(-8.0f32..=8.0);
        let cy = 32.0 + rng.gen_range(-8.0f32..=8.0);
        let r = rng.gen_range(12.0f32..=18.0);
        let rel = format!("images/{i:05}.png");
        render(color, shape, cx, cy, r)
            .save_with_format(out_dir.join(&rel), image::ImageFormat::Png)
            .map_err(|e| Error::Image(e.to_string()))?;
        per_image.push(records_for(i, &rel, color, shape, layout));
    }

    let (train, val, _) = split_sizes(n);
    let bounds = [("train", 0, train), ("val", train, train + val), ("test", train + val, n)];
    let mut splits = Vec::new();
    for (split, lo, hi) in bounds {
        let recs: Vec<AnnotationRecord> = per_image[lo..hi].iter().flatten().cloned().collect();
        let text = write_annotations(&recs);
        let path = source.join(format!("{split}.ann"));
        fs::write(&path, &text)?;
        splits.push(SplitInfo {
            split_name: split.to_string(),
            url: path.to_string_lossy().into_owned(),
            sha256: sha256_hex(text.as_bytes()),
            record_count: recs.len(),
        });
    }
    let card = DatasetCard {
        name: name.to_string(),
        splits,
        media_root: out_dir.to_string_lossy().into_owned(),
        description: format!("synthetic shapes corpus n={n} seed={seed}"),
    };
    fs::write(out_dir.join("card.json"), serde_json::to_string_pretty(&card)?)?;
    Ok(card)
}

fn records_for(i: usize, rel: &str, color: usize, shape: usize, layout: ShapesLayout) -> Vec<AnnotationRecord> {
    let base = AnnotationRecord {
        instance_id: i.to_string(),
        image: rel.to_string(),
        caption: None,
        question: None,
        answers: None,
        label: None,
    };
    match layout {
        ShapesLayout::Caption => vec![AnnotationRecord {
            caption: Some(Caption::One(format!("a {} {}", COLORS[color], SHAPES[shape]))),
            ..base
        }],
        ShapesLayout::Classification => vec![AnnotationRecord {
            label: Some(shape),
            ..base
        }],
        ShapesLayout::Vqa => {
            let qa = |suffix: &str, q: &str, a: &str| AnnotationRecord {
                instance_id: format!("{i}_{suffix}"),
                question: Some(q.to_string()),
                answers: Some(vec![Answer {
                    answer: a.to_string(),
                    weight: 1.0,
                }]),
                ..base.clone()
            };
            vec![
                qa("color", "what color is the shape?", COLORS[color]),
                qa("shape", "what shape is this?", SHAPES[shape]),
            ]
        }
    }
}
