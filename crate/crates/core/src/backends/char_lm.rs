//! Character n-gram language model with add-λ smoothing and backoff to
//! shorter contexts when a context was never observed.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sentence-start padding symbol.
pub const BOS: char = '\u{2}';
/// Sentence-end symbol.
pub const EOS: char = '\u{3}';

pub const MAX_ORDER: usize = 4;

type Counts = BTreeMap<String, BTreeMap<char, f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharLm {
    order: usize,
    smoothing: f64,
    vocab: Vec<char>,
    /// Pre-training counts, all context lengths `0..order`.
    base: Counts,
    /// In-domain counts added by adaptation.
    adapted: Counts,
}

fn accumulate(counts: &mut Counts, order: usize, text: &str, weight: f64) {
    let mut history: Vec<char> = vec![BOS; order - 1];
    for next in text.chars().chain(std::iter::once(EOS)) {
        for len in 0..order {
            let ctx: String = history[history.len() - len..].iter().collect();
            *counts.entry(ctx).or_default().entry(next).or_default() += weight;
        }
        history.push(next);
    }
}

impl CharLm {
    /// Trains on weighted sentences over the given vocabulary.
    ///
    /// Characters of the training text outside `vocab` are rejected.
    pub fn train<'a>(
        sentences: impl IntoIterator<Item = (&'a str, f64)>,
        vocab: impl IntoIterator<Item = char>,
        order: usize,
        smoothing: f64,
    ) -> Result<Self> {
        if order == 0 || order > MAX_ORDER {
            return Err(Error::input(format!("LM order must lie in 1..={MAX_ORDER}")));
        }
        if !(smoothing > 0.0) {
            return Err(Error::input("LM smoothing must be positive"));
        }
        let vocab: Vec<char> = vocab.into_iter().collect::<BTreeSet<_>>().into_iter().collect();
        if vocab.contains(&BOS) || vocab.contains(&EOS) {
            return Err(Error::input("vocabulary contains reserved LM symbols"));
        }
        let mut base = Counts::new();
        for (text, weight) in sentences {
            if let Some(c) = text.chars().find(|c| vocab.binary_search(c).is_err()) {
                return Err(Error::input(format!("character {c:?} outside LM vocabulary")));
            }
            accumulate(&mut base, order, text, weight);
        }
        Ok(CharLm {
            order,
            smoothing,
            vocab,
            base,
            adapted: Counts::new(),
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn vocab(&self) -> &[char] {
        &self.vocab
    }

    /// Blends weighted in-domain sentences into the adaptation layer:
    /// `adapted = (1 - rho) * adapted + rho * scale * counts(sentences)`.
    ///
    /// Characters outside the vocabulary are dropped from the new text.
    pub fn adapt<'a>(&mut self, sentences: impl IntoIterator<Item = (&'a str, f64)>, scale: f64, rho: f64) {
        let mut fresh = Counts::new();
        for (text, weight) in sentences {
            let kept: String = text
                .chars()
                .filter(|c| self.vocab.binary_search(c).is_ok())
                .collect();
            accumulate(&mut fresh, self.order, &kept, weight * scale * rho);
        }
        for row in self.adapted.values_mut() {
            for v in row.values_mut() {
                *v *= 1.0 - rho;
            }
        }
        for (ctx, row) in fresh {
            let target = self.adapted.entry(ctx).or_default();
            for (c, v) in row {
                *target.entry(c).or_default() += v;
            }
        }
    }

    fn count(&self, ctx: &str, next: char) -> f64 {
        let get = |m: &Counts| m.get(ctx).and_then(|r| r.get(&next)).copied().unwrap_or(0.0);
        get(&self.base) + get(&self.adapted)
    }

    fn total(&self, ctx: &str) -> f64 {
        let get = |m: &Counts| m.get(ctx).map_or(0.0, |r| r.values().sum());
        get(&self.base) + get(&self.adapted)
    }

    /// `P(next | history)`; `history` is the text produced so far (unpadded).
    pub fn prob(&self, history: &[char], next: char) -> f64 {
        let mut padded: Vec<char> = vec![BOS; self.order - 1];
        padded.extend_from_slice(history);
        let outcomes = (self.vocab.len() + 1) as f64;
        for len in (0..self.order).rev() {
            let ctx: String = padded[padded.len() - len..].iter().collect();
            let total = self.total(&ctx);
            if total > 0.0 || len == 0 {
                return (self.count(&ctx, next) + self.smoothing) / (total + self.smoothing * outcomes);
            }
        }
        unreachable!("order >= 1")
    }

    /// Log-probability of a full sentence including the end symbol.
    pub fn log_prob_sentence(&self, text: &str) -> f64 {
        let chars: Vec<char> = text.chars().collect();
        let mut lp = 0.0;
        for i in 0..=chars.len() {
            let next = chars.get(i).copied().unwrap_or(EOS);
            lp += self.prob(&chars[..i], next).ln();
        }
        lp
    }

    /// Dense log-probability table over `alphabet` for fast decoding.
    pub(crate) fn compile(&self, alphabet: &[char]) -> CompiledLm {
        let base = alphabet.len() + 1; // alphabet + BOS
        let width = alphabet.len() + 1; // alphabet + EOS
        let ctx_len = self.order - 1;
        let n_ctx = base.pow(ctx_len as u32);
        let mut table = vec![0.0; n_ctx * width];
        let sym = |i: usize| if i == alphabet.len() { BOS } else { alphabet[i] };
        let mut ctx = vec![0usize; ctx_len];
        for code in 0..n_ctx {
            let mut rest = code;
            for slot in ctx.iter_mut().rev() {
                *slot = rest % base;
                rest /= base;
            }
            // BOS only ever appears as a prefix of the padded history
            let history: Vec<char> = ctx.iter().map(|&i| sym(i)).skip_while(|&c| c == BOS).collect();
            for (j, &c) in alphabet.iter().chain(std::iter::once(&EOS)).enumerate() {
                table[code * width + j] = self.prob(&history, c).ln();
            }
        }
        CompiledLm {
            base,
            width,
            ctx_len,
            n_ctx,
            table,
        }
    }
}

/// Log-probabilities indexed by an integer context code.
#[derive(Debug, Clone)]
pub(crate) struct CompiledLm {
    base: usize,
    width: usize,
    ctx_len: usize,
    n_ctx: usize,
    table: Vec<f64>,
}

impl CompiledLm {
    /// Code of the all-BOS start context.
    pub fn start(&self) -> usize {
        if self.ctx_len == 0 {
            0
        } else {
            self.n_ctx - 1
        }
    }

    /// Context code after appending alphabet symbol `sym`.
    pub fn advance(&self, ctx: usize, sym: usize) -> usize {
        if self.ctx_len == 0 {
            0
        } else {
            (ctx * self.base + sym) % self.n_ctx
        }
    }

    pub fn log_prob(&self, ctx: usize, sym: usize) -> f64 {
        self.table[ctx * self.width + sym]
    }

    pub fn log_prob_end(&self, ctx: usize) -> f64 {
        self.table[ctx * self.width + self.width - 1]
    }
}
