//! ASR and MT backend contracts and the statistical reference backends.
//!
//! The adaptation loop only talks to [`AsrBackend`] and [`MtBackend`]. The
//! reference implementations ([`ReferenceAsr`], [`ReferenceMt`]) make the
//! loop runnable without neural training; [`external`] speaks a line-delimited
//! JSON protocol so out-of-process systems can be plugged in.

pub mod char_lm;
pub mod decoder;
pub mod error_model;
pub mod external;
pub mod ibm1;
mod reference;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::selection::FineTuneRecord;
use crate::text::{KBestList, Utterance};

pub use reference::{AsrConfig, MtConfig, ReferenceAsr, ReferenceMt};

/// Speech recognizer producing k-best transcriptions.
///
/// `transcribe_kbest` must be deterministic for a given model state. Inference
/// takes `&self` and may run concurrently; `fine_tune` and `restore` need
/// exclusive access.
pub trait AsrBackend: Send + Sync {
    fn kind(&self) -> &str;

    fn transcribe_kbest(&self, utterance: &Utterance, k: usize) -> Result<KBestList>;

    /// Fine-tunes on weighted ASR self-training records.
    fn fine_tune(&mut self, records: &[FineTuneRecord]) -> Result<()>;

    /// Canonical serialization of the full model state.
    fn snapshot(&self) -> Result<Vec<u8>>;

    fn restore(&mut self, blob: &[u8]) -> Result<()>;
}

/// Text translator.
///
/// `translate` must be deterministic for a given model state. Fine-tuning on
/// an empty record set leaves the model unchanged.
pub trait MtBackend: Send + Sync {
    fn kind(&self) -> &str;

    fn translate(&self, source: &str) -> Result<String>;

    /// Fine-tunes on weighted (transcription, reference translation) records.
    fn fine_tune(&mut self, records: &[FineTuneRecord]) -> Result<()>;

    fn snapshot(&self) -> Result<Vec<u8>>;

    fn restore(&mut self, blob: &[u8]) -> Result<()>;
}

pub const SNAPSHOT_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Envelope {
    backend_kind: String,
    format_version: u32,
    state: serde_json::Value,
}

/// Serializes `state` under a kind/version header with sorted keys.
pub fn encode_snapshot<T: Serialize>(kind: &str, state: &T) -> Result<Vec<u8>> {
    // serde_json::Value maps are ordered, which makes the bytes canonical
    let value = serde_json::to_value(Envelope {
        backend_kind: kind.to_owned(),
        format_version: SNAPSHOT_FORMAT_VERSION,
        state: serde_json::to_value(state)?,
    })?;
    Ok(serde_json::to_vec(&value)?)
}

/// Inverse of [`encode_snapshot`]; rejects other kinds and versions.
pub fn decode_snapshot<T: DeserializeOwned>(kind: &str, blob: &[u8]) -> Result<T> {
    let env: Envelope =
        serde_json::from_slice(blob).map_err(|e| Error::input(format!("malformed snapshot: {e}")))?;
    if env.backend_kind != kind {
        return Err(Error::input(format!(
            "snapshot is for backend {:?}, expected {kind:?}",
            env.backend_kind
        )));
    }
    if env.format_version != SNAPSHOT_FORMAT_VERSION {
        return Err(Error::input(format!(
            "unsupported snapshot format version {}",
            env.format_version
        )));
    }
    serde_json::from_value(env.state).map_err(|e| Error::input(format!("malformed snapshot state: {e}")))
}

/// Reads the `backend_kind` tag of a snapshot blob.
pub fn snapshot_kind(blob: &[u8]) -> Result<String> {
    let env: Envelope =
        serde_json::from_slice(blob).map_err(|e| Error::input(format!("malformed snapshot: {e}")))?;
    Ok(env.backend_kind)
}
