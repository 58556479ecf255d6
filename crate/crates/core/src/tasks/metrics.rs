//! Rank-based retrieval recall, sentence BLEU-4 and VQA accuracy.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};

/// Gallery indices of one row sorted by descending score, ties to the lower index.
pub fn rank_row(scores: &[f32]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecallResult {
    /// k → fraction of queries with a ground-truth item in the top k.
    pub recall: BTreeMap<usize, f64>,
    /// Median over queries of the 1-based rank of the best ground-truth item.
    pub median_rank: f64,
}

pub fn recall_at_k(scores: &[Vec<f32>], ground_truth: &[Vec<usize>], ks: &[usize]) -> Result<RecallResult> {
    if scores.len() != ground_truth.len() {
        return Err(Error::Shape(format!(
            "{} score rows vs {} ground-truth rows",
            scores.len(),
            ground_truth.len()
        )));
    }
    let rankings: Vec<Vec<usize>> = scores.iter().map(|r| rank_row(r)).collect();
    recall_from_rankings(&rankings, ground_truth, ks)
}

/// Recall over precomputed per-query rankings (e.g. after reranking).
pub fn recall_from_rankings(rankings: &[Vec<usize>], ground_truth: &[Vec<usize>], ks: &[usize]) -> Result<RecallResult> {
    if rankings.len() != ground_truth.len() {
        return Err(Error::Shape(format!(
            "{} rankings vs {} ground-truth rows",
            rankings.len(),
            ground_truth.len()
        )));
    }
    let mut first_hits = Vec::with_capacity(rankings.len());
    for (q, (ranking, gt)) in rankings.iter().zip(ground_truth).enumerate() {
        if gt.is_empty() {
            return Err(Error::EmptyGroundTruth(q));
        }
        let pos = ranking
            .iter()
            .position(|g| gt.contains(g))
            .ok_or_else(|| Error::Shape(format!("query {q}: ground truth outside the gallery")))?;
        first_hits.push(pos + 1);
    }
    let n = first_hits.len().max(1) as f64;
    let recall = ks
        .iter()
        .map(|&k| (k, first_hits.iter().filter(|&&r| r <= k).count() as f64 / n))
        .collect();
    Ok(RecallResult {
        recall,
        median_rank: median(&mut first_hits),
    })
}

fn median(v: &mut [usize]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_unstable();
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m] as f64
    } else {
        (v[m - 1] + v[m]) as f64 / 2.0
    }
}

fn ngram_counts<'a>(tokens: &[&'a str], n: usize) -> HashMap<Vec<&'a str>, usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    out
}

/// Sentence BLEU-4: geometric mean of clipped 1..4-gram precisions with
/// weights 1/4, where an order with zero matches uses `(0 + 1) / (total + 1)`,
/// times the brevity penalty against the closest reference length (ties to
/// the shorter). An empty candidate scores 0.
pub fn bleu4(candidate: &str, references: &[&str]) -> f64 {
    let cand: Vec<&str> = candidate.split_whitespace().collect();
    let refs: Vec<Vec<&str>> = references.iter().map(|r| r.split_whitespace().collect()).collect();
    if cand.is_empty() || refs.is_empty() {
        return 0.0;
    }
    let mut log_p = 0.0;
    for n in 1..=4 {
        let counts = ngram_counts(&cand, n);
        let total: usize = counts.values().sum();
        let mut max_ref: HashMap<Vec<&str>, usize> = HashMap::new();
        for r in &refs {
            for (g, c) in ngram_counts(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        let matched: usize = counts
            .iter()
            .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
            .sum();
        let p = if matched == 0 {
            1.0 / (total as f64 + 1.0)
        } else {
            matched as f64 / total as f64
        };
        log_p += 0.25 * p.ln();
    }
    let c = cand.len();
    let r = refs
        .iter()
        .map(|r| r.len())
        .min_by(|a, b| (a.abs_diff(c)).cmp(&b.abs_diff(c)).then(a.cmp(b)))
        .unwrap_or(0);
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    bp * log_p.exp()
}

/// `min(#matching annotations / 3, 1)` with at least three annotations,
/// otherwise exact match against the first annotation.
pub fn vqa_accuracy(prediction: &str, answers: &[String]) -> f64 {
    if answers.len() >= 3 {
        let hits = answers.iter().filter(|a| a.as_str() == prediction).count();
        (hits as f64 / 3.0).min(1.0)
    } else {
        match answers.first() {
            Some(a) if a == prediction => 1.0,
            _ => 0.0,
        }
    }
}
