//! Turning k-best transcriptions and their translations into weighted
//! fine-tuning data for the MT and ASR components.
//!
//! Every hypothesis is translated and its translation scored with sentence
//! ChrF against the reference translation. Hypotheses at or above a
//! threshold are kept, and the kept ones of an utterance share a total weight
//! of 1 proportional to `chrf^alpha`. The MT set pairs each kept transcription
//! with the reference translation; the ASR set pairs the observation with the
//! kept transcription (the gold transcript is never consulted).

use std::cmp::Ordering;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{sentence_chrf, ChrfParams};
use crate::text::{KBestList, Utterance};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub utterance_id: String,
    pub hypothesis_rank: usize,
    pub transcription: String,
    pub translation: String,
    pub chrf: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RecordOrigin {
    MtAdapt,
    AsrAdapt,
}

/// A weighted training pair produced by selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FineTuneRecord {
    pub utterance_id: String,
    pub input_text: String,
    pub target_text: String,
    pub weight: f64,
    pub origin: RecordOrigin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    pub k: usize,
    pub mt_threshold: f64,
    pub asr_threshold: f64,
    pub weight_exponent: f64,
    pub chrf_params: ChrfParams,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            k: 8,
            mt_threshold: 0.4,
            asr_threshold: 0.6,
            weight_exponent: 1.0,
            chrf_params: ChrfParams::default(),
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::input("k must be >= 1"));
        }
        for (name, t) in [
            ("mt_threshold", self.mt_threshold),
            ("asr_threshold", self.asr_threshold),
        ] {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::input(format!("{name} must lie in [0, 1]")));
            }
        }
        if !self.weight_exponent.is_finite() {
            return Err(Error::input("weight exponent must be finite"));
        }
        self.chrf_params.validate()
    }
}

/// One utterance with its k-best list and the translation of every hypothesis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodedUtterance {
    pub utterance: Utterance,
    pub kbest: KBestList,
    pub translations: Vec<String>,
}

/// Scores each hypothesis by the ChrF of its translation, best first.
///
/// Ties keep the original hypothesis order.
pub fn score_candidates(
    kbest: &KBestList,
    translations: &[String],
    reference: &str,
    params: &ChrfParams,
) -> Result<Vec<ScoredCandidate>> {
    if translations.len() != kbest.hypotheses.len() {
        return Err(Error::input(format!(
            "{}: {} hypotheses but {} translations",
            kbest.utterance_id,
            kbest.hypotheses.len(),
            translations.len()
        )));
    }
    let mut scored: Vec<ScoredCandidate> = kbest
        .hypotheses
        .iter()
        .zip(translations)
        .map(|(h, t)| ScoredCandidate {
            utterance_id: kbest.utterance_id.clone(),
            hypothesis_rank: h.rank,
            transcription: h.text.clone(),
            translation: t.clone(),
            chrf: sentence_chrf(t, reference, params),
        })
        .collect();
    scored.sort_by(|a, b| {
        b.chrf
            .partial_cmp(&a.chrf)
            .unwrap_or(Ordering::Equal)
            .then(a.hypothesis_rank.cmp(&b.hypothesis_rank))
    });
    Ok(scored)
}

/// Ranks of all candidates scoring at least `threshold`, in input order.
pub fn select_indices(scored: &[ScoredCandidate], threshold: f64) -> Vec<usize> {
    scored
        .iter()
        .filter(|c| c.chrf >= threshold)
        .map(|c| c.hypothesis_rank)
        .collect()
}

/// Normalized power-law weights `chrf_i^alpha / sum_j chrf_j^alpha`.
pub fn compute_weights(selected_chrf: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if selected_chrf.is_empty() {
        return Err(Error::input("cannot weight an empty selection"));
    }
    if let Some(bad) = selected_chrf.iter().find(|&&c| !(c > 0.0 && c <= 1.0)) {
        return Err(Error::input(format!("selected chrF {bad} outside (0, 1]")));
    }
    let raw: Vec<f64> = selected_chrf.iter().map(|c| c.powf(alpha)).collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / total).collect())
}

/// Counters describing one selection pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SelectionStats {
    pub n_utterances: usize,
    pub n_skipped: usize,
    pub n_records: usize,
    /// Mean ChrF of the selected candidates; 0 when nothing was selected.
    pub mean_selected_chrf: f64,
}

/// Per-utterance kept candidates with weights.
fn select_weighted(
    item: &DecodedUtterance,
    threshold: f64,
    cfg: &SelectionConfig,
) -> Result<Vec<(ScoredCandidate, f64)>> {
    let scored = score_candidates(
        &item.kbest,
        &item.translations,
        &item.utterance.reference_translation,
        &cfg.chrf_params,
    )?;
    // a zero score cannot be weighted; only reachable with threshold 0
    let kept: Vec<ScoredCandidate> = scored
        .into_iter()
        .filter(|c| c.chrf >= threshold && c.chrf > 0.0)
        .collect();
    if kept.is_empty() {
        return Ok(Vec::new());
    }
    let chrfs: Vec<f64> = kept.iter().map(|c| c.chrf).collect();
    let weights = compute_weights(&chrfs, cfg.weight_exponent)?;
    Ok(kept.into_iter().zip(weights).collect())
}

fn build_set(
    batch: &[DecodedUtterance],
    cfg: &SelectionConfig,
    origin: RecordOrigin,
) -> Result<(Vec<FineTuneRecord>, SelectionStats)> {
    let threshold = match origin {
        RecordOrigin::MtAdapt => cfg.mt_threshold,
        RecordOrigin::AsrAdapt => cfg.asr_threshold,
    };
    let mut records = Vec::new();
    let mut stats = SelectionStats {
        n_utterances: batch.len(),
        ..Default::default()
    };
    let mut chrf_sum = 0.0;
    for item in batch {
        let kept = select_weighted(item, threshold, cfg)?;
        if kept.is_empty() {
            stats.n_skipped += 1;
            continue;
        }
        for (cand, weight) in kept {
            chrf_sum += cand.chrf;
            let (input_text, target_text) = match origin {
                RecordOrigin::MtAdapt => (cand.transcription, item.utterance.reference_translation.clone()),
                RecordOrigin::AsrAdapt => (item.utterance.observation.clone(), cand.transcription),
            };
            records.push(FineTuneRecord {
                utterance_id: item.utterance.id.clone(),
                input_text,
                target_text,
                weight,
                origin,
            });
        }
    }
    stats.n_records = records.len();
    if !records.is_empty() {
        stats.mean_selected_chrf = chrf_sum / records.len() as f64;
    }
    Ok((records, stats))
}

/// MT adaptation data: kept transcriptions paired with the reference translation.
pub fn build_mt_finetune_set(
    batch: &[DecodedUtterance],
    cfg: &SelectionConfig,
) -> Result<(Vec<FineTuneRecord>, SelectionStats)> {
    build_set(batch, cfg, RecordOrigin::MtAdapt)
}

/// ASR self-training data: the observation paired with each kept transcription.
pub fn build_asr_finetune_set(
    batch: &[DecodedUtterance],
    cfg: &SelectionConfig,
) -> Result<(Vec<FineTuneRecord>, SelectionStats)> {
    build_set(batch, cfg, RecordOrigin::AsrAdapt)
}

/// Writes a record set as JSONL for the per-iteration audit trail.
pub fn write_records(path: &Path, records: &[FineTuneRecord]) -> Result<()> {
    crate::text::write_jsonl(path, records)
}
