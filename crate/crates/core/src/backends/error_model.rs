//! Character-level channel model `P(observation | clean text)` and its
//! weighted maximum-likelihood re-estimation.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::selection::{FineTuneRecord, RecordOrigin};

/// Log-probability charged for observation characters outside the alphabet.
pub const UNSEEN_LOG_PROB: f64 = -16.0;

/// One step of an edit script turning clean text into an observation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EditOp {
    Match(char),
    /// `(clean, observed)`
    Substitute(char, char),
    /// Clean character missing from the observation.
    Delete(char),
    /// Observed character with no clean counterpart.
    Insert(char),
}

impl EditOp {
    pub fn is_edit(&self) -> bool {
        !matches!(self, EditOp::Match(_))
    }

    /// The clean-side character this step emits, if any.
    pub fn clean(&self) -> Option<char> {
        match *self {
            EditOp::Match(c) | EditOp::Substitute(c, _) | EditOp::Delete(c) => Some(c),
            EditOp::Insert(_) => None,
        }
    }
}

/// Minimum unit-cost edit script from `clean` to `observed`.
///
/// Among co-optimal scripts the backtrace prefers match, then substitute,
/// then delete, then insert.
pub fn align(clean: &[char], observed: &[char]) -> Vec<EditOp> {
    let (n, m) = (clean.len(), observed.len());
    let width = m + 1;
    let mut d = vec![0usize; (n + 1) * width];
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        d[i * width] = i;
        for j in 1..=m {
            let diag = d[(i - 1) * width + j - 1] + usize::from(clean[i - 1] != observed[j - 1]);
            let del = d[(i - 1) * width + j] + 1;
            let ins = d[i * width + j - 1] + 1;
            d[i * width + j] = diag.min(del).min(ins);
        }
    }

    let mut ops = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * width + j];
        if i > 0 && j > 0 {
            let diag = d[(i - 1) * width + j - 1];
            let (c, o) = (clean[i - 1], observed[j - 1]);
            if c == o && here == diag {
                ops.push(EditOp::Match(c));
                i -= 1;
                j -= 1;
                continue;
            }
            if c != o && here == diag + 1 {
                ops.push(EditOp::Substitute(c, o));
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && here == d[(i - 1) * width + j] + 1 {
            ops.push(EditOp::Delete(clean[i - 1]));
            i -= 1;
        } else {
            ops.push(EditOp::Insert(observed[j - 1]));
            j -= 1;
        }
    }
    ops.reverse();
    ops
}

/// Weighted edit counts accumulated from alignments.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AlignmentCounts {
    /// `(clean, observed)` emissions, matches included.
    pub emissions: BTreeMap<(char, char), f64>,
    pub deletions: BTreeMap<char, f64>,
    pub insertions: BTreeMap<char, f64>,
    /// Slots where no insertion happened: one per clean character plus one
    /// at the end of each pair.
    pub no_insertion: f64,
}

impl AlignmentCounts {
    pub fn add_pair(&mut self, observed: &str, clean: &str, weight: f64) {
        let clean: Vec<char> = clean.chars().collect();
        let observed: Vec<char> = observed.chars().collect();
        for op in align(&clean, &observed) {
            match op {
                EditOp::Match(c) => *self.emissions.entry((c, c)).or_default() += weight,
                EditOp::Substitute(c, o) => *self.emissions.entry((c, o)).or_default() += weight,
                EditOp::Delete(c) => *self.deletions.entry(c).or_default() += weight,
                EditOp::Insert(o) => *self.insertions.entry(o).or_default() += weight,
            }
        }
        self.no_insertion += weight * (clean.len() + 1) as f64;
    }

    fn clean_total(&self, c: char) -> f64 {
        let emitted: f64 = self
            .emissions
            .range((c, char::MIN)..=(c, char::MAX))
            .map(|(_, v)| v)
            .sum();
        emitted + self.deletions.get(&c).copied().unwrap_or(0.0)
    }
}

/// Per-character substitution/deletion distributions plus an insertion
/// distribution, all add-λ smoothed over a closed alphabet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorModel {
    alphabet: Vec<char>,
    /// `clean -> observed -> P(observed | clean)`
    substitution: BTreeMap<char, BTreeMap<char, f64>>,
    /// `clean -> P(deleted | clean)`
    deletion: BTreeMap<char, f64>,
    /// `observed -> P(insert observed)`
    insertion: BTreeMap<char, f64>,
    no_insertion: f64,
    smoothing: f64,
}

impl ErrorModel {
    /// A channel that keeps each character with probability `1 - noise` and
    /// spreads `noise` evenly over the other outcomes.
    pub fn identity(alphabet: impl IntoIterator<Item = char>, noise: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&noise) || noise <= 0.0 {
            return Err(Error::input("identity channel noise must lie in (0, 1)"));
        }
        let alphabet: Vec<char> = alphabet
            .into_iter()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        if alphabet.is_empty() {
            return Err(Error::input("empty alphabet"));
        }
        // outcomes per clean char: |A| emissions + deletion
        let spread = noise / alphabet.len() as f64;
        let mut substitution = BTreeMap::new();
        let mut deletion = BTreeMap::new();
        for &c in &alphabet {
            let row = alphabet
                .iter()
                .map(|&o| (o, if o == c { 1.0 - noise } else { spread }))
                .collect();
            substitution.insert(c, row);
            deletion.insert(c, spread);
        }
        let ins = noise / (alphabet.len() + 1) as f64;
        let insertion = alphabet.iter().map(|&o| (o, ins)).collect();
        Ok(ErrorModel {
            alphabet,
            substitution,
            deletion,
            insertion,
            no_insertion: 1.0 - noise + ins,
            smoothing: 0.0,
        })
    }

    /// Maximum-likelihood estimate from `(observed, clean, weight)` pairs.
    ///
    /// The alphabet is every character seen on either side.
    pub fn train<'a>(
        pairs: impl IntoIterator<Item = (&'a str, &'a str, f64)>,
        smoothing: f64,
    ) -> Result<Self> {
        if !(smoothing > 0.0) {
            return Err(Error::input("smoothing must be positive"));
        }
        let mut counts = AlignmentCounts::default();
        let mut alphabet = BTreeSet::new();
        for (observed, clean, weight) in pairs {
            alphabet.extend(observed.chars());
            alphabet.extend(clean.chars());
            counts.add_pair(observed, clean, weight);
        }
        if alphabet.is_empty() {
            return Err(Error::input("no characters to train an error model on"));
        }
        let alphabet: Vec<char> = alphabet.into_iter().collect();
        let mut model = ErrorModel {
            substitution: BTreeMap::new(),
            deletion: BTreeMap::new(),
            insertion: BTreeMap::new(),
            no_insertion: 0.0,
            smoothing,
            alphabet,
        };
        let estimate = Estimator { smoothing };
        for &c in &model.alphabet.clone() {
            let (row, del) = estimate.row(&model.alphabet, &counts, c);
            model.substitution.insert(c, row);
            model.deletion.insert(c, del);
        }
        let (ins, none) = estimate.insertion(&model.alphabet, &counts);
        model.insertion = ins;
        model.no_insertion = none;
        Ok(model)
    }

    pub fn alphabet(&self) -> &[char] {
        &self.alphabet
    }

    pub fn smoothing(&self) -> f64 {
        self.smoothing
    }

    pub fn index_of(&self, c: char) -> Option<usize> {
        self.alphabet.binary_search(&c).ok()
    }

    /// `P(observed | clean)`; 0 for characters outside the alphabet.
    pub fn emission_prob(&self, clean: char, observed: char) -> f64 {
        self.substitution
            .get(&clean)
            .and_then(|row| row.get(&observed))
            .copied()
            .unwrap_or(0.0)
    }

    pub fn deletion_prob(&self, clean: char) -> f64 {
        self.deletion.get(&clean).copied().unwrap_or(0.0)
    }

    pub fn insertion_prob(&self, observed: char) -> f64 {
        self.insertion.get(&observed).copied().unwrap_or(0.0)
    }

    pub fn no_insertion_prob(&self) -> f64 {
        self.no_insertion
    }

    /// Log-probability of one edit step under the channel.
    pub fn op_log_prob(&self, op: EditOp) -> f64 {
        let p = match op {
            EditOp::Match(c) => self.emission_prob(c, c),
            EditOp::Substitute(c, o) => self.emission_prob(c, o),
            EditOp::Delete(c) => self.deletion_prob(c),
            EditOp::Insert(o) => self.insertion_prob(o),
        };
        if p > 0.0 {
            p.ln()
        } else {
            UNSEEN_LOG_PROB
        }
    }

    /// Largest deviation from 1 over all conditional distributions.
    pub fn normalization_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for &c in &self.alphabet {
            let total: f64 = self.substitution[&c].values().sum::<f64>() + self.deletion[&c];
            worst = worst.max((total - 1.0).abs());
        }
        let ins: f64 = self.insertion.values().sum::<f64>() + self.no_insertion;
        worst.max((ins - 1.0).abs())
    }

    /// Smallest probability stored in the model.
    pub fn min_prob(&self) -> f64 {
        self.substitution
            .values()
            .flat_map(|row| row.values())
            .chain(self.deletion.values())
            .chain(self.insertion.values())
            .chain(std::iter::once(&self.no_insertion))
            .copied()
            .fold(f64::INFINITY, f64::min)
    }
}

struct Estimator {
    smoothing: f64,
}

impl Estimator {
    /// Smoothed emission row and deletion probability for clean char `c`.
    fn row(&self, alphabet: &[char], counts: &AlignmentCounts, c: char) -> (BTreeMap<char, f64>, f64) {
        let outcomes = (alphabet.len() + 1) as f64;
        let denom = counts.clean_total(c) + self.smoothing * outcomes;
        let row = alphabet
            .iter()
            .map(|&o| {
                let n = counts.emissions.get(&(c, o)).copied().unwrap_or(0.0);
                (o, (n + self.smoothing) / denom)
            })
            .collect();
        let del = (counts.deletions.get(&c).copied().unwrap_or(0.0) + self.smoothing) / denom;
        (row, del)
    }

    fn insertion(&self, alphabet: &[char], counts: &AlignmentCounts) -> (BTreeMap<char, f64>, f64) {
        let outcomes = (alphabet.len() + 1) as f64;
        let inserted: f64 = alphabet
            .iter()
            .map(|o| counts.insertions.get(o).copied().unwrap_or(0.0))
            .sum();
        let denom = inserted + counts.no_insertion + self.smoothing * outcomes;
        let dist = alphabet
            .iter()
            .map(|&o| {
                let n = counts.insertions.get(&o).copied().unwrap_or(0.0);
                (o, (n + self.smoothing) / denom)
            })
            .collect();
        (dist, (counts.no_insertion + self.smoothing) / denom)
    }
}

/// Counts the alignments of ASR self-training records.
///
/// `resolve` maps an utterance id to its observation. Characters outside the
/// model alphabet are ignored.
pub fn count_records(
    records: &[FineTuneRecord],
    resolve: impl Fn(&str) -> Option<String>,
) -> Result<AlignmentCounts> {
    let mut counts = AlignmentCounts::default();
    for r in records {
        if r.origin != RecordOrigin::AsrAdapt {
            return Err(Error::input(format!(
                "record for {} is not an ASR adaptation record",
                r.utterance_id
            )));
        }
        if !(r.weight > 0.0) {
            return Err(Error::input(format!(
                "non-positive weight for {}",
                r.utterance_id
            )));
        }
        let observation = resolve(&r.utterance_id)
            .ok_or_else(|| Error::input(format!("unknown utterance id {}", r.utterance_id)))?;
        counts.add_pair(&observation, &r.target_text, r.weight);
    }
    Ok(counts)
}

/// Weighted re-estimation from self-training records, interpolated with
/// the prior model: `new = (1 - rho) * prior + rho * estimate`.
///
/// Clean characters that never occur in the records keep their prior row.
pub fn reestimate_error_model(
    model: &ErrorModel,
    records: &[FineTuneRecord],
    resolve: impl Fn(&str) -> Option<String>,
    smoothing: f64,
    rho: f64,
) -> Result<ErrorModel> {
    if records.is_empty() {
        return Err(Error::input("re-estimation needs at least one record"));
    }
    if !(smoothing > 0.0) || !(0.0..=1.0).contains(&rho) {
        return Err(Error::input("invalid smoothing or interpolation ratio"));
    }
    let counts = count_records(records, resolve)?;
    Ok(interpolate_counts(model, &counts, smoothing, rho))
}

pub(crate) fn interpolate_counts(
    model: &ErrorModel,
    counts: &AlignmentCounts,
    smoothing: f64,
    rho: f64,
) -> ErrorModel {
    let est = Estimator { smoothing };
    let mix = |prior: f64, update: f64| (1.0 - rho) * prior + rho * update;
    let mut out = model.clone();
    for &c in &model.alphabet {
        if counts.clean_total(c) <= 0.0 {
            continue;
        }
        let (row, del) = est.row(&model.alphabet, counts, c);
        let prior_row = &model.substitution[&c];
        let mixed = row.into_iter().map(|(o, p)| (o, mix(prior_row[&o], p))).collect();
        out.substitution.insert(c, mixed);
        out.deletion.insert(c, mix(model.deletion[&c], del));
    }
    let (ins, none) = est.insertion(&model.alphabet, counts);
    out.insertion = ins
        .into_iter()
        .map(|(o, p)| (o, mix(model.insertion[&o], p)))
        .collect();
    out.no_insertion = mix(model.no_insertion, none);
    out
}
