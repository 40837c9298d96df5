//! Noisy-channel k-best decoding.
//!
//! A candidate transcription is scored by `log P_lm(candidate) +
//! log P_channel(observation | candidate)`, maximized over edit paths. The
//! search walks the observation left to right; each step either emits a clean
//! character that produced the current observed character (match or
//! substitution), consumes an observed character as an insertion, or emits a
//! clean character that the channel deleted. Hypotheses are synchronized on
//! the observation position and pruned to the beam after every step.
//!
//! The number of edits is bounded per word: the counter resets whenever an
//! observed space is matched by a clean space. When characters outside the
//! alphabet leave no path within the budget, the observation is decoded again
//! with the budget raised to its longest word.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::backends::char_lm::{CharLm, CompiledLm};
use crate::backends::error_model::{EditOp, ErrorModel, UNSEEN_LOG_PROB};
use crate::error::{Error, Result};
use crate::text::KBestList;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    /// `usize::MAX` disables pruning.
    pub beam_width: usize,
    pub max_edits_per_word: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            beam_width: 16,
            max_edits_per_word: 2,
        }
    }
}

/// A decoded candidate together with the best edit path that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedPath {
    pub text: String,
    pub score: f64,
    pub ops: Vec<EditOp>,
}

/// Dense log-probability tables for one (error model, LM) pair.
#[derive(Debug, Clone)]
pub struct ChannelScorer {
    alphabet: Vec<char>,
    lm: CompiledLm,
    /// `[clean][observed]`, observed index `alphabet.len()` is the unseen bucket.
    emit: Vec<f64>,
    delete: Vec<f64>,
    insert: Vec<f64>,
    space: Option<usize>,
}

fn ln_or_floor(p: f64) -> f64 {
    if p > 0.0 {
        p.ln()
    } else {
        UNSEEN_LOG_PROB
    }
}

impl ChannelScorer {
    pub fn new(error_model: &ErrorModel, lm: &CharLm) -> Self {
        let alphabet = error_model.alphabet().to_vec();
        let a = alphabet.len();
        let mut emit = vec![UNSEEN_LOG_PROB; a * (a + 1)];
        for (ci, &c) in alphabet.iter().enumerate() {
            for (oi, &o) in alphabet.iter().enumerate() {
                emit[ci * (a + 1) + oi] = ln_or_floor(error_model.emission_prob(c, o));
            }
        }
        let delete = alphabet
            .iter()
            .map(|&c| ln_or_floor(error_model.deletion_prob(c)))
            .collect();
        let mut insert: Vec<f64> = alphabet
            .iter()
            .map(|&o| ln_or_floor(error_model.insertion_prob(o)))
            .collect();
        insert.push(UNSEEN_LOG_PROB);
        let space = alphabet.binary_search(&' ').ok();
        ChannelScorer {
            lm: lm.compile(&alphabet),
            alphabet,
            emit,
            delete,
            insert,
            space,
        }
    }

    pub fn alphabet(&self) -> &[char] {
        &self.alphabet
    }

    fn observed_index(&self, c: char) -> usize {
        self.alphabet.binary_search(&c).unwrap_or(self.alphabet.len())
    }

    fn emit(&self, clean: usize, observed: usize) -> f64 {
        self.emit[clean * (self.alphabet.len() + 1) + observed]
    }

    /// k-best decoding of one observation.
    pub fn decode(
        &self,
        utterance_id: &str,
        observation: &str,
        cfg: &DecoderConfig,
        k: usize,
    ) -> Result<KBestList> {
        let paths = self.decode_paths(observation, cfg, k)?;
        KBestList::from_scored(
            utterance_id,
            paths.into_iter().map(|p| (p.text, p.score)).collect(),
        )
    }

    /// k-best decoding that also returns the winning edit path per candidate.
    pub fn decode_paths(&self, observation: &str, cfg: &DecoderConfig, k: usize) -> Result<Vec<DecodedPath>> {
        if k == 0 {
            return Err(Error::input("k must be >= 1"));
        }
        if k > cfg.beam_width {
            return Err(Error::input(format!(
                "k ({k}) exceeds the beam width ({})",
                cfg.beam_width
            )));
        }
        let paths = Search::new(self, cfg).run(observation, k)?;
        if !paths.is_empty() {
            return Ok(paths);
        }
        // only characters outside the alphabet can exhaust the budget
        let longest = match self.space {
            Some(_) => observation
                .split(' ')
                .map(|w| w.chars().count())
                .max()
                .unwrap_or(0),
            None => observation.chars().count(),
        };
        let relaxed = DecoderConfig {
            max_edits_per_word: longest.max(cfg.max_edits_per_word),
            ..*cfg
        };
        Search::new(self, &relaxed).run(observation, k)
    }
}

/// Convenience wrapper building the scorer on the fly.
pub fn noisy_channel_decode(
    utterance_id: &str,
    observation: &str,
    error_model: &ErrorModel,
    lm: &CharLm,
    cfg: &DecoderConfig,
    k: usize,
) -> Result<KBestList> {
    ChannelScorer::new(error_model, lm).decode(utterance_id, observation, cfg, k)
}

#[derive(Debug, Clone)]
struct Partial {
    text: Vec<u16>,
    ctx: usize,
    edits: usize,
    score: f64,
    node: usize,
}

#[derive(Debug, Clone, Copy)]
struct Node {
    parent: usize,
    op: EditOp,
}

#[derive(Debug, Clone, Copy)]
struct Expansion {
    parent: usize,
    /// Clean symbol appended to the text, if any.
    sym: Option<usize>,
    op: EditOp,
    score: f64,
    edits: usize,
    reset: bool,
}

struct Search<'a> {
    scorer: &'a ChannelScorer,
    cfg: &'a DecoderConfig,
    arena: Vec<Node>,
}

const ROOT: usize = usize::MAX;

impl<'a> Search<'a> {
    fn new(scorer: &'a ChannelScorer, cfg: &'a DecoderConfig) -> Self {
        Search {
            scorer,
            cfg,
            arena: Vec::new(),
        }
    }

    fn run(mut self, observation: &str, k: usize) -> Result<Vec<DecodedPath>> {
        let obs: Vec<char> = observation.chars().collect();
        let mut pool = vec![Partial {
            text: Vec::new(),
            ctx: self.scorer.lm.start(),
            edits: 0,
            score: 0.0,
            node: ROOT,
        }];
        for j in 0..=obs.len() {
            pool = self.deletion_closure(pool);
            if j == obs.len() {
                break;
            }
            let o = obs[j];
            let expansions = self.consume(&pool, o);
            pool = self.materialize(&pool, expansions);
        }
        Ok(self.finish(pool, k))
    }

    fn budget(&self) -> usize {
        self.cfg.max_edits_per_word
    }

    fn consume(&self, pool: &[Partial], o: char) -> Vec<Expansion> {
        let s = self.scorer;
        let oi = s.observed_index(o);
        let is_space = s.space.is_some_and(|sp| sp == oi);
        let mut out = Vec::with_capacity(pool.len() * (s.alphabet.len() + 1));
        for (pi, p) in pool.iter().enumerate() {
            for (ci, &c) in s.alphabet.iter().enumerate() {
                let is_match = ci == oi;
                let edits = p.edits + usize::from(!is_match);
                if edits > self.budget() {
                    continue;
                }
                out.push(Expansion {
                    parent: pi,
                    sym: Some(ci),
                    op: if is_match {
                        EditOp::Match(c)
                    } else {
                        EditOp::Substitute(c, o)
                    },
                    score: p.score + s.lm.log_prob(p.ctx, ci) + s.emit(ci, oi),
                    edits,
                    reset: is_match && is_space,
                });
            }
            if p.edits < self.budget() {
                out.push(Expansion {
                    parent: pi,
                    sym: None,
                    op: EditOp::Insert(o),
                    score: p.score + s.insert[oi],
                    edits: p.edits + 1,
                    reset: false,
                });
            }
        }
        out
    }

    fn deletions(&self, pool: &[Partial], frontier: &[usize]) -> Vec<Expansion> {
        let s = self.scorer;
        let mut out = Vec::new();
        for &pi in frontier {
            let p = &pool[pi];
            if p.edits >= self.budget() {
                continue;
            }
            for (ci, &c) in s.alphabet.iter().enumerate() {
                out.push(Expansion {
                    parent: pi,
                    sym: Some(ci),
                    op: EditOp::Delete(c),
                    score: p.score + s.lm.log_prob(p.ctx, ci) + s.delete[ci],
                    edits: p.edits + 1,
                    reset: false,
                });
            }
        }
        out
    }

    /// Adds hypotheses that emit deleted characters at the current position,
    /// up to the edit budget.
    fn deletion_closure(&mut self, pool: Vec<Partial>) -> Vec<Partial> {
        let mut pool = pool;
        let mut frontier: Vec<usize> = (0..pool.len()).collect();
        for _ in 0..self.budget() {
            let expansions = self.deletions(&pool, &frontier);
            if expansions.is_empty() {
                break;
            }
            let before = pool.len();
            let fresh = self.materialize(&pool, expansions);
            // merge: existing hypotheses first so they win exact ties
            let mut merged = pool;
            merged.extend(fresh);
            let (kept, origin) = self.dedup_and_prune(merged);
            frontier = origin
                .iter()
                .enumerate()
                .filter(|(_, &src)| src >= before)
                .map(|(i, _)| i)
                .collect();
            pool = kept;
            if frontier.is_empty() {
                break;
            }
        }
        pool
    }

    /// Turns the best expansions into hypotheses, then dedups and prunes.
    fn materialize(&mut self, pool: &[Partial], mut expansions: Vec<Expansion>) -> Vec<Partial> {
        let beam = self.cfg.beam_width;
        if expansions.len() > beam.saturating_mul(2) {
            expansions.sort_by(|a, b| b.score.total_cmp(&a.score));
            expansions.truncate(beam * 2);
        }
        let mut out = Vec::with_capacity(expansions.len());
        for e in expansions {
            let parent = &pool[e.parent];
            let mut text = parent.text.clone();
            let mut ctx = parent.ctx;
            if let Some(sym) = e.sym {
                text.push(sym as u16);
                ctx = self.scorer.lm.advance(ctx, sym);
            }
            self.arena.push(Node {
                parent: parent.node,
                op: e.op,
            });
            out.push(Partial {
                text,
                ctx,
                edits: if e.reset { 0 } else { e.edits },
                score: e.score,
                node: self.arena.len() - 1,
            });
        }
        self.dedup_and_prune(out).0
    }

    /// Keeps the best hypothesis per `(text, edits)` and the top `beam` overall.
    ///
    /// Also returns, for each survivor, its index in the input.
    fn dedup_and_prune(&self, hyps: Vec<Partial>) -> (Vec<Partial>, Vec<usize>) {
        let mut best: HashMap<(&[u16], usize), usize> = HashMap::with_capacity(hyps.len());
        for (i, h) in hyps.iter().enumerate() {
            best.entry((h.text.as_slice(), h.edits))
                .and_modify(|cur| {
                    if h.score > hyps[*cur].score {
                        *cur = i;
                    }
                })
                .or_insert(i);
        }
        let mut order: Vec<usize> = best.into_values().collect();
        order.sort_by(|&a, &b| {
            hyps[b]
                .score
                .total_cmp(&hyps[a].score)
                .then_with(|| hyps[a].text.cmp(&hyps[b].text))
                .then(hyps[a].edits.cmp(&hyps[b].edits))
        });
        order.truncate(self.cfg.beam_width);
        let mut slots: Vec<Option<Partial>> = hyps.into_iter().map(Some).collect();
        let kept = order
            .iter()
            .map(|&i| slots[i].take().expect("unique index"))
            .collect();
        (kept, order)
    }

    fn path(&self, mut node: usize) -> Vec<EditOp> {
        let mut ops = Vec::new();
        while node != ROOT {
            ops.push(self.arena[node].op);
            node = self.arena[node].parent;
        }
        ops.reverse();
        ops
    }

    fn finish(self, pool: Vec<Partial>, k: usize) -> Vec<DecodedPath> {
        let mut best: HashMap<Vec<u16>, (f64, usize)> = HashMap::new();
        for p in pool {
            let score = p.score + self.scorer.lm.log_prob_end(p.ctx);
            best.entry(p.text)
                .and_modify(|cur| {
                    if score > cur.0 {
                        *cur = (score, p.node);
                    }
                })
                .or_insert((score, p.node));
        }
        let mut finals: Vec<(Vec<u16>, f64, usize)> = best.into_iter().map(|(t, (s, n))| (t, s, n)).collect();
        finals.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        finals.truncate(k);
        finals
            .into_iter()
            .map(|(text, score, node)| DecodedPath {
                text: text.iter().map(|&i| self.scorer.alphabet[i as usize]).collect(),
                score,
                ops: self.path(node),
            })
            .collect()
    }
}
