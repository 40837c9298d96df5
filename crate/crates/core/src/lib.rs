//! Cyclic feedback adaptation for cascaded speech translation.
//!
//! An ASR system produces k-best transcriptions, an MT system translates each
//! of them, and the ChrF of every translation against the reference decides
//! which transcriptions are used (and how strongly) to fine-tune the MT system
//! on noisy inputs and to self-train the ASR system. The two adaptation loops
//! alternate until the cascade stops improving on a dev set.
//!
//! The crate ships statistical reference backends (a noisy-channel character
//! decoder and an IBM Model 1 lexical translator) so that the whole cycle runs
//! at desk scale, plus a synthetic task generator and an experiment harness.

pub mod backends;
pub mod cycle;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod selection;
pub mod text;

pub use error::{Error, Result};
