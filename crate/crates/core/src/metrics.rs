//! Sentence/corpus ChrF, corpus BLEU and WER.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::TokenSequence;

/// Parameters of the character n-gram F-score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChrfParams {
    pub max_ngram_order: usize,
    pub beta: f64,
    pub strip_whitespace: bool,
}

impl Default for ChrfParams {
    fn default() -> Self {
        ChrfParams {
            max_ngram_order: 6,
            beta: 2.0,
            strip_whitespace: true,
        }
    }
}

impl ChrfParams {
    pub fn validate(&self) -> Result<()> {
        if self.max_ngram_order == 0 {
            return Err(Error::input("chrF max n-gram order must be >= 1"));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::input("chrF beta must be positive"));
        }
        Ok(())
    }
}

/// One row of evaluation results.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Corpus BLEU in `[0, 100]`.
    pub bleu: f64,
    /// Mean sentence ChrF in `[0, 1]`.
    pub chrf: f64,
    /// Corpus WER over items with a gold transcript; 0 when none have one.
    pub wer: f64,
    pub n_sentences: usize,
}

fn ngram_counts<T: Eq + Hash>(items: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if items.len() >= n {
        for w in items.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped match count between two n-gram multisets.
fn clipped_matches<T: Eq + Hash>(hyp: &HashMap<&[T], usize>, reference: &HashMap<&[T], usize>) -> usize {
    hyp.iter()
        .map(|(g, &c)| reference.get(g).map_or(0, |&r| c.min(r)))
        .sum()
}

/// Sentence-level ChrF in `[0, 1]`.
///
/// Precision and recall are averaged uniformly over the orders `1..=n` for
/// which the reference has at least one n-gram. An order the hypothesis is
/// too short for contributes precision 0. Two empty strings score 1.
pub fn sentence_chrf(hypothesis: &str, reference: &str, params: &ChrfParams) -> f64 {
    let prep = |s: &str| -> Vec<char> {
        if params.strip_whitespace {
            s.chars().filter(|c| !c.is_whitespace()).collect()
        } else {
            s.chars().collect()
        }
    };
    let hyp = prep(hypothesis);
    let reference = prep(reference);

    if hyp.is_empty() && reference.is_empty() {
        log::debug!("chrF of two empty strings defined as 1.0");
        return 1.0;
    }

    let mut precision_sum = 0.0;
    let mut recall_sum = 0.0;
    let mut orders = 0usize;
    for n in 1..=params.max_ngram_order {
        if reference.len() < n {
            break;
        }
        let ref_counts = ngram_counts(&reference, n);
        let hyp_counts = ngram_counts(&hyp, n);
        let matches = clipped_matches(&hyp_counts, &ref_counts) as f64;
        let hyp_total = hyp.len().saturating_sub(n - 1) as f64;
        let ref_total = (reference.len() - (n - 1)) as f64;
        if hyp_total > 0.0 {
            precision_sum += matches / hyp_total;
        }
        recall_sum += matches / ref_total;
        orders += 1;
    }
    if orders == 0 {
        return 0.0;
    }
    let chrp = precision_sum / orders as f64;
    let chrr = recall_sum / orders as f64;
    let beta2 = params.beta * params.beta;
    let denom = beta2 * chrp + chrr;
    if denom <= 0.0 {
        0.0
    } else {
        (1.0 + beta2) * chrp * chrr / denom
    }
}

/// Mean sentence ChrF over aligned hypothesis/reference lists.
pub fn corpus_chrf(hypotheses: &[String], references: &[String], params: &ChrfParams) -> Result<f64> {
    check_lengths(hypotheses.len(), references.len())?;
    let total: f64 = hypotheses
        .iter()
        .zip(references)
        .map(|(h, r)| sentence_chrf(h, r, params))
        .sum();
    Ok(total / hypotheses.len() as f64)
}

fn check_lengths(h: usize, r: usize) -> Result<()> {
    if h != r {
        return Err(Error::input(format!("{h} hypotheses but {r} references")));
    }
    if h == 0 {
        return Err(Error::input("empty corpus"));
    }
    Ok(())
}

pub const BLEU_MAX_ORDER: usize = 4;

/// Corpus BLEU in `[0, 100]`, unsmoothed.
///
/// An order with no hypothesis n-grams at all scores precision 1 when the
/// references have none either, otherwise 0.
pub fn corpus_bleu(hypotheses: &[TokenSequence], references: &[TokenSequence]) -> Result<f64> {
    check_lengths(hypotheses.len(), references.len())?;

    let mut matches = [0usize; BLEU_MAX_ORDER];
    let mut hyp_totals = [0usize; BLEU_MAX_ORDER];
    let mut ref_totals = [0usize; BLEU_MAX_ORDER];
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;

    for (h, r) in hypotheses.iter().zip(references) {
        let (h, r) = (h.tokens(), r.tokens());
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=BLEU_MAX_ORDER {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(r, n);
            matches[n - 1] += clipped_matches(&hc, &rc);
            hyp_totals[n - 1] += h.len().saturating_sub(n - 1);
            ref_totals[n - 1] += r.len().saturating_sub(n - 1);
        }
    }

    let mut log_precision = 0.0;
    for n in 0..BLEU_MAX_ORDER {
        let p = if hyp_totals[n] == 0 {
            if ref_totals[n] == 0 {
                1.0
            } else {
                0.0
            }
        } else {
            matches[n] as f64 / hyp_totals[n] as f64
        };
        if p == 0.0 {
            return Ok(0.0);
        }
        log_precision += p.ln() / BLEU_MAX_ORDER as f64;
    }

    let brevity = if hyp_len == 0 {
        if ref_len == 0 {
            1.0
        } else {
            0.0
        }
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).min(0.0).exp()
    };
    Ok((100.0 * brevity * log_precision.exp()).clamp(0.0, 100.0))
}

/// Unit-cost Levenshtein distance over arbitrary symbols.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Word error rate: edit distance over reference length.
pub fn wer(hypothesis: &TokenSequence, reference: &TokenSequence) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::input("WER needs a non-empty reference"));
    }
    Ok(levenshtein(hypothesis.tokens(), reference.tokens()) as f64 / reference.len() as f64)
}

/// Corpus WER: total edits over total reference words.
pub fn corpus_wer(hypotheses: &[TokenSequence], references: &[TokenSequence]) -> Result<f64> {
    check_lengths(hypotheses.len(), references.len())?;
    let mut edits = 0usize;
    let mut words = 0usize;
    for (h, r) in hypotheses.iter().zip(references) {
        edits += levenshtein(h.tokens(), r.tokens());
        words += r.len();
    }
    if words == 0 {
        return Err(Error::input("WER needs non-empty references"));
    }
    Ok(edits as f64 / words as f64)
}
