//! Seeded synthetic speech-translation task.
//!
//! Source sentences are drawn from a Zipfian unigram model over a random
//! syllable vocabulary and translated word by word through a ground-truth
//! lexicon. Observations are the source transcripts passed through a hidden
//! character noise channel. Pre-training splits follow an out-of-domain word
//! distribution that never uses the in-domain-only words; the fine-tune, dev
//! and test splits follow the in-domain distribution.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::Path;

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::levenshtein;
use crate::text::{read_corpus, write_corpus, Utterance};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticTaskConfig {
    pub source_vocab_size: usize,
    pub target_vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Seed of the vocabularies and lexicon; defaults to `seed`.
    pub lexicon_seed: Option<u64>,
    /// Share of source words with a second translation.
    pub ambiguous_fraction: f64,
    /// Share of source words that never occur in pre-training data.
    pub in_domain_only_fraction: f64,
    /// Zipf exponent of the in-domain unigram distribution.
    pub zipf_exponent: f64,
    /// Zipf exponent of the pre-training unigram distribution.
    pub pretrain_zipf_exponent: f64,
    /// 0 ranks pre-training words independently of their in-domain rank,
    /// 1 reverses the in-domain ranking.
    pub domain_shift: f64,
    pub p_noise: f64,
    /// Relative shares of substitutions, insertions and deletions.
    pub noise_split: [f64; 3],
    pub n_pretrain_asr: usize,
    pub n_pretrain_mt: usize,
    pub n_finetune: usize,
    pub n_dev: usize,
    pub n_test: usize,
    /// Noisy observations per fine-tune transcript.
    pub observations_per_transcript: usize,
    pub seed: u64,
}

impl Default for SyntheticTaskConfig {
    fn default() -> Self {
        SyntheticTaskConfig {
            source_vocab_size: 200,
            target_vocab_size: 200,
            min_len: 4,
            max_len: 10,
            lexicon_seed: None,
            ambiguous_fraction: 0.1,
            in_domain_only_fraction: 0.1,
            zipf_exponent: 1.0,
            pretrain_zipf_exponent: 1.3,
            domain_shift: 0.5,
            p_noise: 0.15,
            noise_split: [0.6, 0.2, 0.2],
            n_pretrain_asr: 2000,
            n_pretrain_mt: 5000,
            n_finetune: 500,
            n_dev: 200,
            n_test: 500,
            observations_per_transcript: 1,
            seed: 7,
        }
    }
}

impl SyntheticTaskConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=0.5).contains(&self.p_noise) {
            return Err(Error::input("p_noise must lie in [0, 0.5]"));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::input("need 1 <= min_len <= max_len"));
        }
        if self.source_vocab_size < 2 || self.target_vocab_size < 2 {
            return Err(Error::input("vocabularies need at least two words"));
        }
        if self.noise_split.iter().any(|&x| !(x >= 0.0)) || self.noise_split.iter().sum::<f64>() <= 0.0 {
            return Err(Error::input("noise split must be non-negative and not all zero"));
        }
        for (name, f) in [
            ("ambiguous_fraction", self.ambiguous_fraction),
            ("in_domain_only_fraction", self.in_domain_only_fraction),
        ] {
            if !(0.0..1.0).contains(&f) {
                return Err(Error::input(format!("{name} must lie in [0, 1)")));
            }
        }
        if !(self.zipf_exponent >= 0.0 && self.pretrain_zipf_exponent >= 0.0) {
            return Err(Error::input("Zipf exponents must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.domain_shift) {
            return Err(Error::input("domain_shift must lie in [0, 1]"));
        }
        if self.observations_per_transcript == 0 {
            return Err(Error::input("observations_per_transcript must be >= 1"));
        }
        if self.n_finetune == 0 || self.n_dev == 0 || self.n_test == 0 {
            return Err(Error::input("fine-tune, dev and test splits must be non-empty"));
        }
        Ok(())
    }

    fn n_sentences(&self) -> usize {
        self.n_pretrain_asr + self.n_pretrain_mt + self.n_finetune + self.n_dev + self.n_test
    }
}

const SOURCE_ONSETS: &[&str] = &[
    "b", "d", "f", "g", "h", "k", "l", "m", "n", "p", "r", "s", "t", "w", "z", "sch", "st",
];
const SOURCE_NUCLEI: &[&str] = &["a", "e", "i", "o", "u", "ä", "ö", "ü", "ei", "au"];
const SOURCE_CODAS: &[&str] = &["", "", "", "n", "r", "s", "l", "t"];
const TARGET_ONSETS: &[&str] = &[
    "b", "c", "d", "f", "g", "h", "j", "l", "m", "n", "p", "r", "s", "t", "v", "w", "th", "sh",
];
const TARGET_NUCLEI: &[&str] = &["a", "e", "i", "o", "u", "ea", "oo", "ay"];
const TARGET_CODAS: &[&str] = &["", "", "n", "r", "s", "ck", "ll"];

fn make_vocab(rng: &mut ChaCha8Rng, n: usize, parts: [&[&str]; 3]) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut words = Vec::with_capacity(n);
    while words.len() < n {
        let syllables = rng.gen_range(1..=3);
        let w: String = (0..syllables)
            .map(|_| {
                parts
                    .iter()
                    .map(|p| *p.choose(rng).expect("non-empty"))
                    .collect::<String>()
            })
            .collect();
        if seen.insert(w.clone()) {
            words.push(w);
        }
    }
    words
}

/// Word-level ground truth: each source word has a primary translation and
/// possibly an alternative one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lexicon {
    pub source: Vec<String>,
    pub target: Vec<String>,
    pub primary: Vec<usize>,
    /// `(target index, probability of using it)`
    pub alternative: Vec<Option<(usize, f64)>>,
}

impl Lexicon {
    fn generate(cfg: &SyntheticTaskConfig, rng: &mut ChaCha8Rng) -> Self {
        let source = make_vocab(
            rng,
            cfg.source_vocab_size,
            [SOURCE_ONSETS, SOURCE_NUCLEI, SOURCE_CODAS],
        );
        let target = make_vocab(
            rng,
            cfg.target_vocab_size,
            [TARGET_ONSETS, TARGET_NUCLEI, TARGET_CODAS],
        );
        let mut perm: Vec<usize> = (0..cfg.target_vocab_size).collect();
        perm.shuffle(rng);
        let primary: Vec<usize> = (0..cfg.source_vocab_size)
            .map(|i| perm[i % cfg.target_vocab_size])
            .collect();
        let n_ambiguous = (cfg.ambiguous_fraction * cfg.source_vocab_size as f64).round() as usize;
        let mut ids: Vec<usize> = (0..cfg.source_vocab_size).collect();
        ids.shuffle(rng);
        let mut alternative = vec![None; cfg.source_vocab_size];
        for &i in &ids[..n_ambiguous] {
            let mut alt = rng.gen_range(0..cfg.target_vocab_size);
            while alt == primary[i] {
                alt = rng.gen_range(0..cfg.target_vocab_size);
            }
            alternative[i] = Some((alt, rng.gen_range(0.2..0.45)));
        }
        Lexicon {
            source,
            target,
            primary,
            alternative,
        }
    }

    fn translate(&self, word: usize, rng: &mut ChaCha8Rng) -> &str {
        match self.alternative[word] {
            Some((alt, p)) if rng.gen_bool(p) => &self.target[alt],
            _ => &self.target[self.primary[word]],
        }
    }
}

/// The hidden corruption process turning transcripts into observations.
///
/// Spaces are never corrupted and never inserted.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoiseChannel {
    p_noise: f64,
    /// substitution, insertion, deletion
    split: [f64; 3],
    alphabet: Vec<char>,
    confusions: BTreeMap<char, Vec<(char, f64)>>,
    insertions: Vec<f64>,
}

impl NoiseChannel {
    fn generate(alphabet: Vec<char>, p_noise: f64, split: [f64; 3], rng: &mut ChaCha8Rng) -> Self {
        let mut confusions = BTreeMap::new();
        for &c in &alphabet {
            let mut partners: Vec<char> = alphabet.iter().copied().filter(|&o| o != c).collect();
            partners.shuffle(rng);
            let w: f64 = rng.gen_range(0.55..0.85);
            confusions.insert(c, vec![(partners[0], w), (partners[1], 1.0 - w)]);
        }
        let insertions = alphabet.iter().map(|_| rng.gen_range(0.2..1.0)).collect();
        let total: f64 = split.iter().sum();
        NoiseChannel {
            p_noise,
            split: split.map(|x| x / total),
            alphabet,
            confusions,
            insertions,
        }
    }

    pub fn corrupt(&self, text: &str, rng: &mut ChaCha8Rng) -> String {
        if self.p_noise == 0.0 {
            return text.to_owned();
        }
        let insert = WeightedIndex::new(&self.insertions).expect("positive weights");
        let mut out = String::with_capacity(text.len() + 4);
        let mut kept_in_word = 0;
        let mut chars = text.chars().peekable();
        while let Some(c) = chars.next() {
            if c == ' ' {
                out.push(c);
                kept_in_word = 0;
                continue;
            }
            let word_ends = chars.peek().is_none_or(|&n| n == ' ');
            kept_in_word += 1;
            if !rng.gen_bool(self.p_noise) {
                out.push(c);
                continue;
            }
            let u: f64 = rng.gen();
            if u < self.split[0] {
                let partners = &self.confusions[&c];
                out.push(if rng.gen_bool(partners[0].1) {
                    partners[0].0
                } else {
                    partners[1].0
                });
            } else if u < self.split[0] + self.split[1] {
                out.push(c);
                out.push(self.alphabet[insert.sample(rng)]);
            } else if word_ends && kept_in_word == 1 {
                // never delete a whole word
                out.push(c);
            } else {
                kept_in_word -= 1;
            }
        }
        out
    }

    /// The channel parameters as JSON.
    pub fn parameter_block(&self) -> String {
        serde_json::to_string(self).expect("plain data serializes")
    }

    /// Digest of the channel parameters. Neither it nor the parameter block
    /// may appear in anything a model or corpus file contains.
    pub fn fingerprint(&self) -> String {
        format!(
            "noise-channel-{}",
            hex::encode(Sha256::digest(self.parameter_block()))
        )
    }
}

/// Corpus statistics recorded next to the generated splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskStats {
    pub sentences: BTreeMap<String, usize>,
    pub mean_sentence_length: BTreeMap<String, f64>,
    /// Share of fine-tune transcript tokens unseen in either pre-training split.
    pub finetune_oov_rate: f64,
    /// Same for the test split.
    pub test_oov_rate: f64,
    /// Character error rate of the test observations.
    pub test_observation_cer: f64,
}

/// All splits of one generated task.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub pretrain_asr: Vec<Utterance>,
    pub pretrain_mt: Vec<Utterance>,
    pub finetune: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
    /// Gold transcripts of the fine-tune split, never written to disk.
    pub finetune_transcripts: Vec<String>,
    pub lexicon: Lexicon,
    pub channel: NoiseChannel,
}

pub const SPLITS: [&str; 5] = ["pretrain_asr", "pretrain_mt", "finetune", "dev", "test"];

fn zipf_weights(order: &[usize], exponent: f64) -> Vec<(usize, f64)> {
    order
        .iter()
        .enumerate()
        .map(|(rank, &w)| (w, 1.0 / ((rank + 1) as f64).powf(exponent)))
        .collect()
}

struct SentenceSampler {
    words: Vec<usize>,
    dist: WeightedIndex<f64>,
}

impl SentenceSampler {
    fn new(weights: Vec<(usize, f64)>) -> Self {
        let (words, w): (Vec<usize>, Vec<f64>) = weights.into_iter().unzip();
        SentenceSampler {
            words,
            dist: WeightedIndex::new(w).expect("positive weights"),
        }
    }

    fn sample(&self, len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        (0..len).map(|_| self.words[self.dist.sample(rng)]).collect()
    }
}

fn capacity(vocab: usize, min_len: usize, max_len: usize) -> f64 {
    (min_len..=max_len).map(|l| (vocab as f64).powi(l as i32)).sum()
}

/// Generates all splits from `cfg`.
pub fn generate_synthetic_task(cfg: &SyntheticTaskConfig) -> Result<SyntheticTask> {
    cfg.validate()?;
    let mut lex_rng = ChaCha8Rng::seed_from_u64(cfg.lexicon_seed.unwrap_or(cfg.seed));
    let lexicon = Lexicon::generate(cfg, &mut lex_rng);

    let n_only = (cfg.in_domain_only_fraction * cfg.source_vocab_size as f64).round() as usize;
    let mut in_order: Vec<usize> = (0..cfg.source_vocab_size).collect();
    in_order.shuffle(&mut lex_rng);
    // spread over the in-domain ranks, skipping the very top
    let step = (cfg.source_vocab_size / n_only.max(1)).max(1);
    let only: BTreeSet<usize> = in_order
        .iter()
        .copied()
        .skip(step.min(3))
        .step_by(step)
        .take(n_only)
        .collect();
    let n = cfg.source_vocab_size as f64;
    let mut keyed: Vec<(f64, usize)> = in_order
        .iter()
        .enumerate()
        .filter(|(_, w)| !only.contains(w))
        .map(|(rank, &w)| {
            let u: f64 = lex_rng.gen();
            (
                cfg.domain_shift * (n - rank as f64) + (1.0 - cfg.domain_shift) * u * n,
                w,
            )
        })
        .collect();
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let out_order: Vec<usize> = keyed.into_iter().map(|(_, w)| w).collect();
    // this many sentences drawn from the out-of-domain vocabulary must fit
    let out_capacity = capacity(out_order.len(), cfg.min_len, cfg.max_len);
    if capacity(cfg.source_vocab_size, cfg.min_len, cfg.max_len) < cfg.n_sentences() as f64
        || out_capacity < (cfg.n_pretrain_asr + cfg.n_pretrain_mt) as f64
    {
        return Err(Error::input(
            "vocabulary too small for the requested number of distinct sentences",
        ));
    }

    let alphabet: Vec<char> = lexicon
        .source
        .iter()
        .flat_map(|w| w.chars())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut channel_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    channel_rng.set_stream(1);
    let channel = NoiseChannel::generate(alphabet, cfg.p_noise, cfg.noise_split, &mut channel_rng);

    let in_domain = SentenceSampler::new(zipf_weights(&in_order, cfg.zipf_exponent));
    let out_domain = SentenceSampler::new(zipf_weights(&out_order, cfg.pretrain_zipf_exponent));

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let mut seen: HashSet<Vec<usize>> = HashSet::new();
    let mut draw = |sampler: &SentenceSampler, rng: &mut ChaCha8Rng| -> Result<Vec<usize>> {
        for _ in 0..10_000 {
            let len = rng.gen_range(cfg.min_len..=cfg.max_len);
            let s = sampler.sample(len, rng);
            if seen.insert(s.clone()) {
                return Ok(s);
            }
        }
        Err(Error::input(
            "vocabulary too small for the requested number of distinct sentences",
        ))
    };

    let mut hidden = Vec::new();
    let mut make_split =
        |name: &str, n: usize, sampler: &SentenceSampler, rng: &mut ChaCha8Rng| -> Result<Vec<Utterance>> {
            let mut out = Vec::with_capacity(n);
            for i in 0..n {
                let words = draw(sampler, rng)?;
                let transcript = words
                    .iter()
                    .map(|&w| lexicon.source[w].as_str())
                    .collect::<Vec<_>>()
                    .join(" ");
                let reference = words
                    .iter()
                    .map(|&w| lexicon.translate(w, rng))
                    .collect::<Vec<_>>()
                    .join(" ");
                let copies = if name == "finetune" {
                    cfg.observations_per_transcript
                } else {
                    1
                };
                for r in 0..copies {
                    let observation = match name {
                        "pretrain_mt" => transcript.clone(),
                        _ => channel.corrupt(&transcript, rng),
                    };
                    let id = if copies == 1 {
                        format!("{name}-{i:05}")
                    } else {
                        format!("{name}-{i:05}-r{r}")
                    };
                    if name == "finetune" {
                        hidden.push(transcript.clone());
                    }
                    out.push(Utterance {
                        id,
                        observation,
                        gold_transcript: (name != "finetune").then(|| transcript.clone()),
                        reference_translation: reference.clone(),
                    });
                }
            }
            Ok(out)
        };

    let pretrain_asr = make_split("pretrain_asr", cfg.n_pretrain_asr, &out_domain, &mut rng)?;
    let pretrain_mt = make_split("pretrain_mt", cfg.n_pretrain_mt, &out_domain, &mut rng)?;
    let finetune = make_split("finetune", cfg.n_finetune, &in_domain, &mut rng)?;
    let dev = make_split("dev", cfg.n_dev, &in_domain, &mut rng)?;
    let test = make_split("test", cfg.n_test, &in_domain, &mut rng)?;
    Ok(SyntheticTask {
        pretrain_asr,
        pretrain_mt,
        finetune,
        dev,
        test,
        finetune_transcripts: hidden,
        lexicon,
        channel,
    })
}

fn mean_len(split: &[Utterance]) -> f64 {
    if split.is_empty() {
        return 0.0;
    }
    let total: usize = split
        .iter()
        .map(|u| {
            u.gold_transcript
                .as_deref()
                .unwrap_or(&u.observation)
                .split(' ')
                .count()
        })
        .sum();
    total as f64 / split.len() as f64
}

impl SyntheticTask {
    pub fn split(&self, name: &str) -> Option<&[Utterance]> {
        Some(match name {
            "pretrain_asr" => &self.pretrain_asr,
            "pretrain_mt" => &self.pretrain_mt,
            "finetune" => &self.finetune,
            "dev" => &self.dev,
            "test" => &self.test,
            _ => return None,
        })
    }

    pub fn stats(&self) -> TaskStats {
        let known: HashSet<&str> = self
            .pretrain_asr
            .iter()
            .chain(&self.pretrain_mt)
            .flat_map(|u| u.gold_transcript.as_deref().unwrap_or_default().split(' '))
            .collect();
        let oov = |transcripts: &mut dyn Iterator<Item = &str>| {
            let (mut unseen, mut total) = (0usize, 0usize);
            for t in transcripts.flat_map(|t| t.split(' ')) {
                total += 1;
                unseen += usize::from(!known.contains(t));
            }
            unseen as f64 / total.max(1) as f64
        };
        let (errors, chars) = self.test.iter().fold((0usize, 0usize), |(e, n), u| {
            let gold: Vec<char> = u.gold_transcript.as_deref().unwrap_or_default().chars().collect();
            let obs: Vec<char> = u.observation.chars().collect();
            (e + levenshtein(&obs, &gold), n + gold.len())
        });
        TaskStats {
            sentences: SPLITS
                .iter()
                .map(|&s| (s.to_owned(), self.split(s).unwrap().len()))
                .collect(),
            mean_sentence_length: SPLITS
                .iter()
                .map(|&s| (s.to_owned(), mean_len(self.split(s).unwrap())))
                .collect(),
            finetune_oov_rate: oov(&mut self.finetune_transcripts.iter().map(String::as_str)),
            test_oov_rate: oov(&mut self
                .test
                .iter()
                .map(|u| u.gold_transcript.as_deref().unwrap_or_default())),
            test_observation_cer: errors as f64 / chars.max(1) as f64,
        }
    }

    /// Writes every split as `<dir>/<split>.jsonl` plus `stats.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for name in SPLITS {
            write_corpus(&dir.join(format!("{name}.jsonl")), self.split(name).unwrap())?;
        }
        fs::write(dir.join("stats.json"), serde_json::to_vec_pretty(&self.stats())?)?;
        Ok(())
    }
}

/// Splits of a task read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskCorpora {
    pub pretrain_asr: Vec<Utterance>,
    pub pretrain_mt: Vec<Utterance>,
    pub finetune: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

impl TaskCorpora {
    pub fn read(dir: &Path) -> Result<Self> {
        let read = |name: &str| {
            let path = dir.join(format!("{name}.jsonl"));
            if !path.exists() {
                return Err(Error::input(format!("missing split {}", path.display())));
            }
            read_corpus(&path)
        };
        Ok(TaskCorpora {
            pretrain_asr: read("pretrain_asr")?,
            pretrain_mt: read("pretrain_mt")?,
            finetune: read("finetune")?,
            dev: read("dev")?,
            test: read("test")?,
        })
    }
}

impl From<SyntheticTask> for TaskCorpora {
    fn from(t: SyntheticTask) -> Self {
        TaskCorpora {
            pretrain_asr: t.pretrain_asr,
            pretrain_mt: t.pretrain_mt,
            finetune: t.finetune,
            dev: t.dev,
            test: t.test,
        }
    }
}
