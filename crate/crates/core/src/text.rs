//! Shared data model, text normalization and tokenization.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One input item of a speech-translation corpus.
///
/// `observation` is the acoustic stand-in. The reference backends treat it as
/// a (noisy) character sequence; external backends may interpret it as a path
/// to an audio feature file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub id: String,
    pub observation: String,
    pub gold_transcript: Option<String>,
    pub reference_translation: String,
}

/// Spelled-out forms used when a standalone digit sequence is normalized.
pub const DIGIT_WORDS: [&str; 10] = [
    "null", "eins", "zwei", "drei", "vier", "fünf", "sechs", "sieben", "acht", "neun",
];

fn punctuation() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r#"[\p{P}§„“”‚‘’«»‹›"']"#).expect("valid punctuation class"))
}

/// Lowercase, strip punctuation, collapse whitespace and spell out digits.
///
/// A token made only of ASCII digits becomes one word per digit, so
/// `"42"` turns into `"vier zwei"`.
pub fn normalize_source_text(raw: &str) -> String {
    let lowered = raw.to_lowercase();
    let stripped = punctuation().replace_all(&lowered, "");
    let mut out = String::with_capacity(stripped.len());
    for word in stripped.split_whitespace() {
        if word.bytes().all(|b| b.is_ascii_digit()) {
            for digit in word.bytes() {
                push_word(&mut out, DIGIT_WORDS[(digit - b'0') as usize]);
            }
        } else {
            push_word(&mut out, word);
        }
    }
    out
}

fn push_word(out: &mut String, word: &str) {
    if !out.is_empty() {
        out.push(' ');
    }
    out.push_str(word);
}

/// An ordered list of whitespace-free tokens.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSequence(Vec<String>);

impl TokenSequence {
    /// Builds a sequence, rejecting empty tokens and tokens containing whitespace.
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if let Some(bad) = tokens
            .iter()
            .find(|t| t.is_empty() || t.chars().any(char::is_whitespace))
        {
            return Err(Error::input(format!("invalid token {bad:?}")));
        }
        Ok(TokenSequence(tokens))
    }

    pub fn tokens(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn join(&self) -> String {
        self.0.join(" ")
    }

    pub fn into_inner(self) -> Vec<String> {
        self.0
    }
}

impl fmt::Display for TokenSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.join())
    }
}

impl<S: Into<String>> FromIterator<S> for TokenSequence {
    fn from_iter<I: IntoIterator<Item = S>>(iter: I) -> Self {
        TokenSequence(iter.into_iter().map(Into::into).collect())
    }
}

/// Splits normalized text on single spaces.
///
/// The input must already be normalized; doubled or edge spaces trip a debug
/// assertion. In release builds empty pieces are dropped.
pub fn tokenize(text: &str) -> TokenSequence {
    debug_assert!(
        !text.starts_with(' ') && !text.ends_with(' ') && !text.contains("  "),
        "tokenize expects normalized text, got {text:?}"
    );
    TokenSequence(
        text.split(' ')
            .filter(|t| !t.is_empty())
            .map(str::to_owned)
            .collect(),
    )
}

/// Whitespace-tolerant tokenization for text that may not be normalized,
/// such as raw decoder output.
pub fn split_tokens(text: &str) -> TokenSequence {
    TokenSequence(text.split_whitespace().map(str::to_owned).collect())
}

/// A single transcription hypothesis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub text: String,
    /// Log-domain model score, higher is better.
    pub model_score: f64,
    pub rank: usize,
}

/// Ranked transcription hypotheses for one utterance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KBestList {
    pub utterance_id: String,
    pub hypotheses: Vec<Hypothesis>,
}

impl KBestList {
    /// Builds a list from `(text, score)` pairs already sorted best-first.
    ///
    /// Ranks are assigned from position. Fails on an empty list, duplicate
    /// texts, or scores that increase with rank.
    pub fn from_scored(utterance_id: impl Into<String>, scored: Vec<(String, f64)>) -> Result<Self> {
        let hypotheses = scored
            .into_iter()
            .enumerate()
            .map(|(rank, (text, model_score))| Hypothesis {
                text,
                model_score,
                rank,
            })
            .collect();
        let list = KBestList {
            utterance_id: utterance_id.into(),
            hypotheses,
        };
        list.validate()?;
        Ok(list)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hypotheses.is_empty() {
            return Err(Error::input(format!(
                "k-best list for {} is empty",
                self.utterance_id
            )));
        }
        let mut seen = HashSet::new();
        for (i, h) in self.hypotheses.iter().enumerate() {
            if h.rank != i {
                return Err(Error::input(format!(
                    "hypothesis rank {} at position {i}",
                    h.rank
                )));
            }
            if !h.model_score.is_finite() && h.model_score != f64::NEG_INFINITY {
                return Err(Error::input("hypothesis score is NaN or +inf"));
            }
            if !seen.insert(h.text.as_str()) {
                return Err(Error::input(format!("duplicate hypothesis {:?}", h.text)));
            }
            if i > 0 && h.model_score > self.hypotheses[i - 1].model_score {
                return Err(Error::input("hypothesis scores increase with rank"));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.hypotheses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hypotheses.is_empty()
    }

    pub fn best(&self) -> &Hypothesis {
        &self.hypotheses[0]
    }
}

/// Reads a JSONL corpus: one [`Utterance`] object per line.
pub fn read_corpus(path: &Path) -> Result<Vec<Utterance>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let utt: Utterance = serde_json::from_str(&line)
            .map_err(|e| Error::input(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        if !ids.insert(utt.id.clone()) {
            return Err(Error::input(format!(
                "{}: duplicate utterance id {}",
                path.display(),
                utt.id
            )));
        }
        out.push(utt);
    }
    Ok(out)
}

/// Writes utterances as JSONL with LF line endings.
pub fn write_corpus(path: &Path, corpus: &[Utterance]) -> Result<()> {
    write_jsonl(path, corpus)
}

pub(crate) fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
