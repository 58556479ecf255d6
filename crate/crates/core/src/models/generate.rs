//! Decoding helpers that only see per-step log-probabilities.

use std::cmp::Ordering;

use super::tokenizer::{BOS, EOS, PAD, UNK};
use crate::error::Result;

/// Tokens never emitted during generation.
const BANNED: [u32; 3] = [PAD, BOS, UNK];

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Generated ids, starting with BOS; ends with EOS unless truncated.
    pub tokens: Vec<u32>,
    pub score: f64,
}

/// Beam search from BOS. `step` receives the live prefixes and returns one
/// row of next-token log-probabilities per prefix.
///
/// Each step keeps the `num_beams` best extensions over all live beams
/// (ties: lower beam index, then lower token id). Extensions ending in EOS
/// retire into the finished pool. Stops after `max_len` generated tokens or
/// once no live beam can beat the best finished score.
pub fn beam_search<F>(mut step: F, max_len: usize, num_beams: usize) -> Result<Hypothesis>
where
    F: FnMut(&[Vec<u32>]) -> Result<Vec<Vec<f32>>>,
{
    let num_beams = num_beams.max(1);
    let mut live = vec![Hypothesis {
        tokens: vec![BOS],
        score: 0.0,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_len {
        if live.is_empty() {
            break;
        }
        let prefixes: Vec<Vec<u32>> = live.iter().map(|h| h.tokens.clone()).collect();
        let logps = step(&prefixes)?;
        let mut cands: Vec<(f64, usize, u32)> = Vec::new();
        for (b, row) in logps.iter().enumerate() {
            for (t, &lp) in row.iter().enumerate() {
                if BANNED.contains(&(t as u32)) || !lp.is_finite() {
                    continue;
                }
                cands.push((live[b].score + lp as f64, b, t as u32));
            }
        }
        cands.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        let mut next = Vec::new();
        for (score, b, t) in cands.into_iter().take(num_beams) {
            let mut tokens = live[b].tokens.clone();
            tokens.push(t);
            let h = Hypothesis { tokens, score };
            if t == EOS {
                finished.push(h);
            } else {
                next.push(h);
            }
        }
        live = next;
        let best_done = finished.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
        if live.iter().all(|h| h.score <= best_done) {
            live.clear();
        }
    }
    finished.extend(live);
    let best = finished
        .into_iter()
        .enumerate()
        .max_by(|(ia, a), (ib, b)| {
            a.score
                .partial_cmp(&b.score)
                .unwrap_or(Ordering::Equal)
                .then(ib.cmp(ia))
        })
        .map(|(_, h)| h)
        .unwrap_or(Hypothesis {
            tokens: vec![BOS],
            score: 0.0,
        });
    Ok(best)
}

/// Sum of log-probabilities of `targets[start..]`, where `logps[i]` is the
/// distribution that predicts `targets[i]`.
pub fn sequence_log_likelihood(logps: &[Vec<f32>], targets: &[u32], start: usize) -> f64 {
    targets
        .iter()
        .enumerate()
        .skip(start)
        .map(|(i, &t)| logps[i][t as usize] as f64)
        .sum()
}

/// Index of the highest score; the earliest wins ties.
pub fn argmax_first(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        match best {
            Some(b) if scores[b] >= s => {}
            _ => best = Some(i),
        }
    }
    best
}
