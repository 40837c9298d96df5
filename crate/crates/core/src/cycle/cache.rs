use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::text::KBestList;

/// Hex SHA-256 of a snapshot blob.
pub fn state_hash(blob: &[u8]) -> String {
    hex::encode(Sha256::digest(blob))
}

/// Maps keyed by a model-state hash, evicting the least recently used state.
#[derive(Debug)]
struct StateLru<V> {
    capacity: usize,
    order: VecDeque<String>,
    entries: HashMap<String, HashMap<String, V>>,
}

impl<V> StateLru<V> {
    fn new(capacity: usize) -> Self {
        StateLru {
            capacity: capacity.max(1),
            order: VecDeque::new(),
            entries: HashMap::new(),
        }
    }

    fn touch(&mut self, state: &str) -> &mut HashMap<String, V> {
        if let Some(pos) = self.order.iter().position(|s| s == state) {
            let s = self.order.remove(pos).expect("position is valid");
            self.order.push_back(s);
        } else {
            if self.order.len() == self.capacity {
                let evicted = self.order.pop_front().expect("capacity >= 1");
                self.entries.remove(&evicted);
            }
            self.order.push_back(state.to_owned());
        }
        self.entries.entry(state.to_owned()).or_default()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub kbest_hits: usize,
    pub kbest_misses: usize,
    pub translation_hits: usize,
    pub translation_misses: usize,
}

/// Decodes remembered per backend state, so a state that was already run on
/// an input is never asked again.
#[derive(Debug)]
pub struct DecodeCache {
    kbest: StateLru<KBestList>,
    translations: StateLru<String>,
    pub stats: CacheStats,
}

impl DecodeCache {
    pub fn new(asr_states: usize, mt_states: usize) -> Self {
        DecodeCache {
            kbest: StateLru::new(asr_states),
            translations: StateLru::new(mt_states),
            stats: CacheStats::default(),
        }
    }

    pub fn kbest<E>(
        &mut self,
        asr_state: &str,
        utterance_id: &str,
        decode: impl FnOnce() -> Result<KBestList, E>,
    ) -> Result<KBestList, E> {
        let map = self.kbest.touch(asr_state);
        if let Some(hit) = map.get(utterance_id) {
            self.stats.kbest_hits += 1;
            return Ok(hit.clone());
        }
        self.stats.kbest_misses += 1;
        let fresh = decode()?;
        map.insert(utterance_id.to_owned(), fresh.clone());
        Ok(fresh)
    }

    pub fn translation<E>(
        &mut self,
        mt_state: &str,
        source: &str,
        translate: impl FnOnce() -> Result<String, E>,
    ) -> Result<String, E> {
        let map = self.translations.touch(mt_state);
        if let Some(hit) = map.get(source) {
            self.stats.translation_hits += 1;
            return Ok(hit.clone());
        }
        self.stats.translation_misses += 1;
        let fresh = translate()?;
        map.insert(source.to_owned(), fresh.clone());
        Ok(fresh)
    }
}
