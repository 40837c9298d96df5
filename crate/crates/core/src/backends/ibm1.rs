//! Lexical translation model (IBM Model 1) estimated with weighted EM.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::levenshtein;
use crate::selection::{FineTuneRecord, RecordOrigin};
use crate::text::{split_tokens, TokenSequence};

/// Source-side token that every target token may align to.
pub const NULL_TOKEN: &str = "<null>";

/// `t(e | f)` for every source token `f` (including [`NULL_TOKEN`]).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TranslationTable {
    probs: BTreeMap<String, BTreeMap<String, f64>>,
}

/// A weighted sentence pair.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedPair {
    pub source: TokenSequence,
    pub target: TokenSequence,
    pub weight: f64,
}

impl WeightedPair {
    pub fn new(source: TokenSequence, target: TokenSequence, weight: f64) -> Self {
        WeightedPair {
            source,
            target,
            weight,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmStats {
    /// Pairs with an empty side, ignored by EM.
    pub skipped_pairs: usize,
    /// Weighted corpus log-likelihood before each iteration's M-step.
    pub log_likelihood: Vec<f64>,
}

impl TranslationTable {
    pub fn prob(&self, target: &str, source: &str) -> f64 {
        self.probs
            .get(source)
            .and_then(|row| row.get(target))
            .copied()
            .unwrap_or(0.0)
    }

    pub fn contains_source(&self, source: &str) -> bool {
        source != NULL_TOKEN && self.probs.contains_key(source)
    }

    /// Source vocabulary without the NULL token.
    pub fn source_vocab(&self) -> impl Iterator<Item = &str> {
        self.probs.keys().map(String::as_str).filter(|s| *s != NULL_TOKEN)
    }

    pub fn target_vocab(&self) -> BTreeSet<&str> {
        self.probs
            .values()
            .flat_map(|row| row.keys().map(String::as_str))
            .collect()
    }

    pub fn row(&self, source: &str) -> Option<&BTreeMap<String, f64>> {
        self.probs.get(source)
    }

    /// Largest `|sum_e t(e|f) - 1|` over all rows.
    pub fn normalization_error(&self) -> f64 {
        self.probs
            .values()
            .map(|row| (row.values().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Most probable translation of an in-vocabulary source token.
    ///
    /// Ties go to the lexicographically smallest target.
    pub fn best_translation(&self, source: &str) -> Option<&str> {
        let row = self.probs.get(source).filter(|_| source != NULL_TOKEN)?;
        let mut best: Option<(&str, f64)> = None;
        for (e, &p) in row {
            // BTreeMap iterates in lexicographic order, so strict > keeps the smallest on ties
            if best.is_none_or(|(_, bp)| p > bp) {
                best = Some((e.as_str(), p));
            }
        }
        best.map(|(e, _)| e)
    }

    /// Weighted corpus log-likelihood `sum_s w_s sum_j ln(sum_i t(e_j|f_i) / (l+1))`.
    pub fn log_likelihood(&self, corpus: &[WeightedPair]) -> f64 {
        self.weighted_log_likelihood(corpus)
    }

    fn weighted_log_likelihood<'a>(&self, corpus: impl IntoIterator<Item = &'a WeightedPair>) -> f64 {
        corpus
            .into_iter()
            .filter(|p| !p.source.is_empty() && !p.target.is_empty())
            .map(|p| {
                let norm = (p.source.len() + 1) as f64;
                let inner: f64 = p
                    .target
                    .tokens()
                    .iter()
                    .map(|e| {
                        let s: f64 = std::iter::once(NULL_TOKEN)
                            .chain(p.source.tokens().iter().map(String::as_str))
                            .map(|f| self.prob(e, f))
                            .sum();
                        (s / norm).ln()
                    })
                    .sum();
                p.weight * inner
            })
            .sum()
    }
}

/// One EM pass: expected counts under `t`, normalized per source token.
fn em_step(
    corpus: &[&WeightedPair],
    t: impl Fn(&str, &str) -> f64,
) -> BTreeMap<String, BTreeMap<String, f64>> {
    // ordered maps keep the floating-point summation order reproducible
    let mut counts: BTreeMap<&str, BTreeMap<&str, f64>> = BTreeMap::new();
    for pair in corpus {
        let sources: Vec<&str> = std::iter::once(NULL_TOKEN)
            .chain(pair.source.tokens().iter().map(String::as_str))
            .collect();
        for e in pair.target.tokens() {
            let probs: Vec<f64> = sources.iter().map(|f| t(e, f)).collect();
            let z: f64 = probs.iter().sum();
            if z <= 0.0 {
                continue;
            }
            for (f, p) in sources.iter().zip(probs) {
                if p > 0.0 {
                    *counts.entry(f).or_default().entry(e).or_default() += pair.weight * p / z;
                }
            }
        }
    }
    counts
        .into_iter()
        .filter_map(|(f, row)| {
            let total: f64 = row.values().sum();
            (total > 0.0).then(|| {
                (
                    f.to_owned(),
                    row.into_iter().map(|(e, c)| (e.to_owned(), c / total)).collect(),
                )
            })
        })
        .collect()
}

fn usable(corpus: &[WeightedPair]) -> Result<(Vec<&WeightedPair>, usize)> {
    if let Some(p) = corpus.iter().find(|p| !(p.weight > 0.0) || !p.weight.is_finite()) {
        return Err(Error::input(format!("invalid pair weight {}", p.weight)));
    }
    let kept: Vec<&WeightedPair> = corpus
        .iter()
        .filter(|p| !p.source.is_empty() && !p.target.is_empty())
        .collect();
    let skipped = corpus.len() - kept.len();
    if skipped > 0 {
        log::warn!("EM skipped {skipped} pairs with an empty side");
    }
    Ok((kept, skipped))
}

/// Classical IBM Model 1 EM from a uniform start, with per-pair weights
/// multiplying the expected counts.
pub fn ibm1_em(corpus: &[WeightedPair], iterations: usize) -> Result<(TranslationTable, EmStats)> {
    if corpus.is_empty() {
        return Err(Error::input("EM needs a non-empty corpus"));
    }
    if iterations == 0 {
        return Err(Error::input("EM needs at least one iteration"));
    }
    let (kept, skipped) = usable(corpus)?;
    if kept.is_empty() {
        return Err(Error::input("every sentence pair has an empty side"));
    }
    let target_vocab: BTreeSet<&str> = kept
        .iter()
        .flat_map(|p| p.target.tokens().iter().map(String::as_str))
        .collect();
    let uniform = 1.0 / target_vocab.len() as f64;

    let mut stats = EmStats {
        skipped_pairs: skipped,
        ..Default::default()
    };
    let mut table: Option<TranslationTable> = None;
    for _ in 0..iterations {
        let probs = match &table {
            None => {
                stats.log_likelihood.push(uniform_log_likelihood(&kept, uniform));
                em_step(&kept, |_, _| uniform)
            }
            Some(t) => {
                stats
                    .log_likelihood
                    .push(t.weighted_log_likelihood(kept.iter().copied()));
                em_step(&kept, |e, f| t.prob(e, f))
            }
        };
        table = Some(TranslationTable { probs });
    }
    let table = table.expect("iterations >= 1");
    stats
        .log_likelihood
        .push(table.weighted_log_likelihood(kept.iter().copied()));
    Ok((table, stats))
}

fn uniform_log_likelihood(corpus: &[&WeightedPair], uniform: f64) -> f64 {
    // with t uniform, sum_i t / (l+1) == uniform
    corpus
        .iter()
        .map(|p| p.weight * p.target.len() as f64 * uniform.ln())
        .sum()
}

/// What to do with a source token the table has never seen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OovPolicy {
    /// Translate as the nearest known source token within `ceil(len / 4)`
    /// edits; copy through when there is none.
    NearestOrCopy,
    Copy,
}

/// Nearest in-vocabulary source token within `ceil(|token| / 4)` character
/// edits. Ties go to the lexicographically smallest token.
pub fn nearest_source<'a>(table: &'a TranslationTable, token: &str) -> Option<&'a str> {
    let chars: Vec<char> = token.chars().collect();
    let limit = chars.len().div_ceil(4);
    let mut best: Option<(usize, &str)> = None;
    for cand in table.source_vocab() {
        let cand_chars: Vec<char> = cand.chars().collect();
        if cand_chars.len().abs_diff(chars.len()) > limit {
            continue;
        }
        let d = levenshtein(&chars, &cand_chars);
        if d <= limit && best.is_none_or(|(bd, _)| d < bd) {
            best = Some((d, cand));
        }
    }
    best.map(|(_, c)| c)
}

/// Monotone word-by-word decoding: each source token becomes its most
/// probable target.
pub fn mt_decode(source: &TokenSequence, table: &TranslationTable, oov: OovPolicy) -> TokenSequence {
    source
        .tokens()
        .iter()
        .map(|f| {
            if let Some(e) = table.best_translation(f) {
                return e.to_owned();
            }
            if oov == OovPolicy::NearestOrCopy {
                if let Some(e) = nearest_source(table, f).and_then(|near| table.best_translation(near)) {
                    return e.to_owned();
                }
            }
            f.clone()
        })
        .collect()
}

/// Share of the uniform distribution mixed into a known row when
/// warm-starting fine-tuning EM.
pub const WARM_START_UNIFORM_MIX: f64 = 0.1;

/// Fine-tunes on MT adaptation records: weighted EM warm-started from the
/// prior table, then `new = (1 - eta) * prior + eta * em` for rows the prior
/// knows. Rows for new source tokens take the EM estimate as is.
pub fn mt_fine_tune(
    table: &TranslationTable,
    records: &[FineTuneRecord],
    em_iterations: usize,
    eta: f64,
) -> Result<TranslationTable> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::input("interpolation ratio must lie in [0, 1]"));
    }
    if let Some(r) = records.iter().find(|r| r.origin != RecordOrigin::MtAdapt) {
        return Err(Error::input(format!(
            "record for {} is not an MT adaptation record",
            r.utterance_id
        )));
    }
    if records.is_empty() || eta == 0.0 {
        return Ok(table.clone());
    }
    if em_iterations == 0 {
        return Err(Error::input("EM needs at least one iteration"));
    }
    let corpus: Vec<WeightedPair> = records
        .iter()
        .map(|r| {
            WeightedPair::new(
                split_tokens(&r.input_text),
                split_tokens(&r.target_text),
                r.weight,
            )
        })
        .collect();
    let (kept, _) = usable(&corpus)?;
    if kept.is_empty() {
        return Ok(table.clone());
    }

    let target_vocab: BTreeSet<&str> = kept
        .iter()
        .flat_map(|p| p.target.tokens().iter().map(String::as_str))
        .chain(table.target_vocab())
        .collect();
    let uniform = 1.0 / target_vocab.len() as f64;
    let warm = |e: &str, f: &str| match table.probs.get(f) {
        Some(row) => {
            (1.0 - WARM_START_UNIFORM_MIX) * row.get(e).copied().unwrap_or(0.0)
                + WARM_START_UNIFORM_MIX * uniform
        }
        None => uniform,
    };
    let mut estimate = TranslationTable {
        probs: em_step(&kept, warm),
    };
    for _ in 1..em_iterations {
        estimate = TranslationTable {
            probs: em_step(&kept, |e, f| estimate.prob(e, f)),
        };
    }

    let mut probs = table.probs.clone();
    for (f, em_row) in estimate.probs {
        match probs.get_mut(&f) {
            Some(prior_row) => {
                let keys: BTreeSet<String> = prior_row.keys().chain(em_row.keys()).cloned().collect();
                let mixed = keys
                    .into_iter()
                    .map(|e| {
                        let p = prior_row.get(&e).copied().unwrap_or(0.0);
                        let q = em_row.get(&e).copied().unwrap_or(0.0);
                        (e, (1.0 - eta) * p + eta * q)
                    })
                    .filter(|(_, v)| *v > 0.0)
                    .collect();
                *prior_row = mixed;
            }
            None => {
                probs.insert(f, em_row);
            }
        }
    }
    Ok(TranslationTable { probs })
}
