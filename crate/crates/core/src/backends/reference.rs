use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::char_lm::CharLm;
use super::decoder::{ChannelScorer, DecoderConfig};
use super::error_model::{reestimate_error_model, ErrorModel};
use super::ibm1::{ibm1_em, mt_decode, mt_fine_tune, OovPolicy, TranslationTable, WeightedPair};
use super::{decode_snapshot, encode_snapshot, AsrBackend, MtBackend};
use crate::error::{Error, Result};
use crate::selection::{FineTuneRecord, RecordOrigin};
use crate::text::{split_tokens, KBestList, Utterance};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AsrConfig {
    pub decoder: DecoderConfig,
    pub lm_order: usize,
    pub lm_smoothing: f64,
    pub channel_smoothing: f64,
    /// Weight of the fresh estimate when interpolating with the prior model.
    pub interpolation: f64,
    /// Multiplier on the weighted counts of self-training transcriptions
    /// added to the LM adaptation layer.
    pub lm_adapt_scale: f64,
    pub adapt_error_model: bool,
}

impl Default for AsrConfig {
    fn default() -> Self {
        AsrConfig {
            decoder: DecoderConfig::default(),
            lm_order: 3,
            lm_smoothing: 0.1,
            channel_smoothing: 0.1,
            interpolation: 0.5,
            lm_adapt_scale: 1.0,
            adapt_error_model: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AsrState {
    config: AsrConfig,
    error_model: ErrorModel,
    lm: CharLm,
}

/// Noisy-channel recognizer over character observations.
#[derive(Debug, Clone)]
pub struct ReferenceAsr {
    state: AsrState,
    scorer: ChannelScorer,
}

impl ReferenceAsr {
    pub const KIND: &'static str = "reference-asr";

    pub fn new(error_model: ErrorModel, lm: CharLm, config: AsrConfig) -> Self {
        let scorer = ChannelScorer::new(&error_model, &lm);
        ReferenceAsr {
            state: AsrState {
                config,
                error_model,
                lm,
            },
            scorer,
        }
    }

    /// Pre-trains on `(observation, gold transcript)` pairs.
    pub fn pretrain<'a>(
        pairs: impl IntoIterator<Item = (&'a str, &'a str)> + Clone,
        config: AsrConfig,
    ) -> Result<Self> {
        let error_model = ErrorModel::train(
            pairs.clone().into_iter().map(|(o, g)| (o, g, 1.0)),
            config.channel_smoothing,
        )?;
        let lm = CharLm::train(
            pairs.into_iter().map(|(_, g)| (g, 1.0)),
            error_model.alphabet().iter().copied(),
            config.lm_order,
            config.lm_smoothing,
        )?;
        Ok(Self::new(error_model, lm, config))
    }

    /// Restores a recognizer from a snapshot blob.
    pub fn from_snapshot(blob: &[u8]) -> Result<Self> {
        let state: AsrState = decode_snapshot(Self::KIND, blob)?;
        Ok(Self::new(state.error_model, state.lm, state.config))
    }

    pub fn error_model(&self) -> &ErrorModel {
        &self.state.error_model
    }

    pub fn lm(&self) -> &CharLm {
        &self.state.lm
    }

    pub fn config(&self) -> &AsrConfig {
        &self.state.config
    }

    pub fn set_error_model(&mut self, error_model: ErrorModel) {
        self.state.error_model = error_model;
        self.rebuild();
    }

    fn rebuild(&mut self) {
        self.scorer = ChannelScorer::new(&self.state.error_model, &self.state.lm);
    }
}

impl AsrBackend for ReferenceAsr {
    fn kind(&self) -> &str {
        Self::KIND
    }

    fn transcribe_kbest(&self, utterance: &Utterance, k: usize) -> Result<KBestList> {
        self.scorer.decode(
            &utterance.id,
            &utterance.observation,
            &self.state.config.decoder,
            k,
        )
    }

    /// Re-estimates the channel from the alignments of the selected
    /// transcriptions and blends them into the LM adaptation layer.
    fn fine_tune(&mut self, records: &[FineTuneRecord]) -> Result<()> {
        if records.is_empty() {
            return Ok(());
        }
        if let Some(r) = records.iter().find(|r| r.origin != RecordOrigin::AsrAdapt) {
            return Err(Error::input(format!("{} is not an ASR record", r.utterance_id)));
        }
        let cfg = self.state.config.clone();
        if cfg.adapt_error_model {
            let observations: BTreeMap<&str, &str> = records
                .iter()
                .map(|r| (r.utterance_id.as_str(), r.input_text.as_str()))
                .collect();
            self.state.error_model = reestimate_error_model(
                &self.state.error_model,
                records,
                |id| observations.get(id).map(|s| s.to_string()),
                cfg.channel_smoothing,
                cfg.interpolation,
            )?;
        }
        self.state.lm.adapt(
            records.iter().map(|r| (r.target_text.as_str(), r.weight)),
            cfg.lm_adapt_scale,
            cfg.interpolation,
        );
        self.rebuild();
        Ok(())
    }

    fn snapshot(&self) -> Result<Vec<u8>> {
        encode_snapshot(Self::KIND, &self.state)
    }

    fn restore(&mut self, blob: &[u8]) -> Result<()> {
        *self = Self::from_snapshot(blob)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MtConfig {
    pub pretrain_em_iterations: usize,
    pub finetune_em_iterations: usize,
    /// Weight of the fine-tuning estimate when interpolating with the prior table.
    pub interpolation: f64,
    pub oov_policy: OovPolicy,
}

impl Default for MtConfig {
    fn default() -> Self {
        MtConfig {
            pretrain_em_iterations: 10,
            finetune_em_iterations: 5,
            interpolation: 0.5,
            oov_policy: OovPolicy::NearestOrCopy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct MtState {
    config: MtConfig,
    table: TranslationTable,
}

/// Monotone lexical translator backed by an IBM Model 1 table.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceMt {
    state: MtState,
}

impl ReferenceMt {
    pub const KIND: &'static str = "reference-mt";

    pub fn new(table: TranslationTable, config: MtConfig) -> Self {
        ReferenceMt {
            state: MtState { config, table },
        }
    }

    /// Pre-trains on `(source, target)` sentence pairs.
    pub fn pretrain<'a>(
        pairs: impl IntoIterator<Item = (&'a str, &'a str)>,
        config: MtConfig,
    ) -> Result<Self> {
        let corpus: Vec<WeightedPair> = pairs
            .into_iter()
            .map(|(s, t)| WeightedPair::new(split_tokens(s), split_tokens(t), 1.0))
            .collect();
        let (table, _) = ibm1_em(&corpus, config.pretrain_em_iterations)?;
        Ok(Self::new(table, config))
    }

    pub fn from_snapshot(blob: &[u8]) -> Result<Self> {
        let state: MtState = decode_snapshot(Self::KIND, blob)?;
        Ok(ReferenceMt { state })
    }

    pub fn table(&self) -> &TranslationTable {
        &self.state.table
    }

    pub fn config(&self) -> &MtConfig {
        &self.state.config
    }
}

impl MtBackend for ReferenceMt {
    fn kind(&self) -> &str {
        Self::KIND
    }

    fn translate(&self, source: &str) -> Result<String> {
        Ok(mt_decode(
            &split_tokens(source),
            &self.state.table,
            self.state.config.oov_policy,
        )
        .join())
    }

    fn fine_tune(&mut self, records: &[FineTuneRecord]) -> Result<()> {
        let cfg = &self.state.config;
        self.state.table = mt_fine_tune(
            &self.state.table,
            records,
            cfg.finetune_em_iterations,
            cfg.interpolation,
        )?;
        Ok(())
    }

    fn snapshot(&self) -> Result<Vec<u8>> {
        encode_snapshot(Self::KIND, &self.state)
    }

    fn restore(&mut self, blob: &[u8]) -> Result<()> {
        *self = Self::from_snapshot(blob)?;
        Ok(())
    }
}
