//! Independent reference implementations and test doubles shared by the
//! integration tests. Nothing here calls into the code it checks.

#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};

use cascade_feedback::backends::char_lm::CharLm;
use cascade_feedback::backends::error_model::{ErrorModel, UNSEEN_LOG_PROB};
use cascade_feedback::backends::{AsrBackend, MtBackend};
use cascade_feedback::selection::FineTuneRecord;
use cascade_feedback::text::{KBestList, Utterance};
use cascade_feedback::{Error, Result};

/// Character n-gram F-score counted by listing every substring.
pub fn brute_chrf(hyp: &str, reference: &str, max_order: usize, beta: f64, strip_ws: bool) -> f64 {
    let prep = |s: &str| -> Vec<char> { s.chars().filter(|c| !(strip_ws && c.is_whitespace())).collect() };
    let h = prep(hyp);
    let r = prep(reference);
    if h.is_empty() && r.is_empty() {
        return 1.0;
    }
    let grams = |s: &[char], n: usize| -> Vec<String> {
        if s.len() < n {
            return Vec::new();
        }
        (0..=s.len() - n).map(|i| s[i..i + n].iter().collect()).collect()
    };
    let mut p_sum = 0.0;
    let mut r_sum = 0.0;
    let mut orders = 0;
    for n in 1..=max_order {
        let rg = grams(&r, n);
        if rg.is_empty() {
            continue;
        }
        let hg = grams(&h, n);
        let mut distinct: Vec<&String> = Vec::new();
        for g in &hg {
            if !distinct.contains(&g) {
                distinct.push(g);
            }
        }
        let mut matched = 0usize;
        for g in distinct {
            let in_h = hg.iter().filter(|x| *x == g).count();
            let in_r = rg.iter().filter(|x| *x == g).count();
            matched += in_h.min(in_r);
        }
        if !hg.is_empty() {
            p_sum += matched as f64 / hg.len() as f64;
        }
        r_sum += matched as f64 / rg.len() as f64;
        orders += 1;
    }
    if orders == 0 {
        return 0.0;
    }
    let p = p_sum / orders as f64;
    let rc = r_sum / orders as f64;
    let b2 = beta * beta;
    if b2 * p + rc == 0.0 {
        0.0
    } else {
        (1.0 + b2) * p * rc / (b2 * p + rc)
    }
}

/// Edit distance from the full DP table.
pub fn brute_edit_distance(a: &[String], b: &[String]) -> usize {
    let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        d[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let cost = if a[i - 1] == b[j - 1] { 0 } else { 1 };
            d[i][j] = (d[i - 1][j - 1] + cost).min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    d[a.len()][b.len()]
}

/// Dense IBM Model 1 EM. Returns the final table and the weighted
/// log-likelihood before every iteration plus after the last one.
pub fn brute_ibm1(
    corpus: &[(Vec<String>, Vec<String>, f64)],
    iterations: usize,
) -> (BTreeMap<(String, String), f64>, Vec<f64>) {
    let null = "<null>".to_string();
    let pairs: Vec<_> = corpus
        .iter()
        .filter(|(s, t, _)| !s.is_empty() && !t.is_empty())
        .map(|(s, t, w)| {
            let mut src = vec![null.clone()];
            src.extend(s.iter().cloned());
            (src, t.clone(), *w)
        })
        .collect();
    let mut fs: Vec<String> = pairs.iter().flat_map(|p| p.0.clone()).collect();
    fs.sort();
    fs.dedup();
    let mut es: Vec<String> = pairs.iter().flat_map(|p| p.1.clone()).collect();
    es.sort();
    es.dedup();
    let fi = |f: &String| fs.iter().position(|x| x == f).unwrap();
    let ei = |e: &String| es.iter().position(|x| x == e).unwrap();

    let mut t = vec![vec![1.0 / es.len() as f64; es.len()]; fs.len()];
    let loglik = |t: &Vec<Vec<f64>>| -> f64 {
        let mut ll = 0.0;
        for (src, tgt, w) in &pairs {
            for e in tgt {
                let s: f64 = src.iter().map(|f| t[fi(f)][ei(e)]).sum();
                ll += w * (s / src.len() as f64).ln();
            }
        }
        ll
    };
    let mut history = Vec::new();
    for _ in 0..iterations {
        history.push(loglik(&t));
        let mut c = vec![vec![0.0; es.len()]; fs.len()];
        for (src, tgt, w) in &pairs {
            for e in tgt {
                let z: f64 = src.iter().map(|f| t[fi(f)][ei(e)]).sum();
                for f in src {
                    c[fi(f)][ei(e)] += w * t[fi(f)][ei(e)] / z;
                }
            }
        }
        for (row, counts) in t.iter_mut().zip(&c) {
            let total: f64 = counts.iter().sum();
            for (p, n) in row.iter_mut().zip(counts) {
                *p = n / total;
            }
        }
    }
    history.push(loglik(&t));
    let mut table = BTreeMap::new();
    for (a, f) in fs.iter().enumerate() {
        for (b, e) in es.iter().enumerate() {
            table.insert((f.clone(), e.clone()), t[a][b]);
        }
    }
    (table, history)
}

fn ln_floor(p: f64) -> f64 {
    if p > 0.0 {
        p.ln()
    } else {
        UNSEEN_LOG_PROB
    }
}

/// Best score of every clean text reachable from `observation`, found by
/// walking every edit path allowed under a per-word edit budget.
pub fn enumerate_decodings(
    observation: &str,
    em: &ErrorModel,
    lm: &CharLm,
    budget: usize,
) -> HashMap<String, f64> {
    struct Walk<'a> {
        obs: Vec<char>,
        em: &'a ErrorModel,
        alphabet: Vec<char>,
        budget: usize,
        out: HashMap<String, f64>,
        lm: &'a CharLm,
    }
    impl Walk<'_> {
        // at position j: optionally delete, then consume obs[j] or finish
        fn step(&mut self, j: usize, text: &mut Vec<char>, edits: usize, channel: f64) {
            if edits < self.budget {
                for c in self.alphabet.clone() {
                    text.push(c);
                    self.step(j, text, edits + 1, channel + ln_floor(self.em.deletion_prob(c)));
                    text.pop();
                }
            }
            if j == self.obs.len() {
                let s: String = text.iter().collect();
                let score = channel + self.lm.log_prob_sentence(&s);
                let e = self.out.entry(s).or_insert(f64::NEG_INFINITY);
                if score > *e {
                    *e = score;
                }
                return;
            }
            let o = self.obs[j];
            for c in self.alphabet.clone() {
                let matched = c == o;
                let next = edits + usize::from(!matched);
                if next > self.budget {
                    continue;
                }
                let reset = matched && c == ' ';
                text.push(c);
                self.step(
                    j + 1,
                    text,
                    if reset { 0 } else { next },
                    channel + ln_floor(self.em.emission_prob(c, o)),
                );
                text.pop();
            }
            if edits < self.budget {
                self.step(
                    j + 1,
                    text,
                    edits + 1,
                    channel + ln_floor(self.em.insertion_prob(o)),
                );
            }
        }
    }
    let mut w = Walk {
        obs: observation.chars().collect(),
        em,
        alphabet: em.alphabet().to_vec(),
        budget,
        out: HashMap::new(),
        lm,
    };
    w.step(0, &mut Vec::new(), 0, 0.0);
    w.out
}

/// Recognizer returning fixed k-best lists; fine-tuning is rejected.
pub struct FixedAsr {
    pub lists: HashMap<String, Vec<String>>,
}

impl AsrBackend for FixedAsr {
    fn kind(&self) -> &str {
        "fixed-asr"
    }

    fn transcribe_kbest(&self, u: &Utterance, k: usize) -> Result<KBestList> {
        let texts = self
            .lists
            .get(&u.id)
            .ok_or_else(|| Error::input(format!("no list for {}", u.id)))?;
        KBestList::from_scored(
            u.id.clone(),
            texts
                .iter()
                .take(k)
                .enumerate()
                .map(|(i, t)| (t.clone(), -(i as f64)))
                .collect(),
        )
    }

    fn fine_tune(&mut self, _records: &[FineTuneRecord]) -> Result<()> {
        Err(Error::backend("fixed recognizer cannot be fine-tuned"))
    }

    fn snapshot(&self) -> Result<Vec<u8>> {
        let mut keys: Vec<_> = self.lists.iter().collect();
        keys.sort();
        Ok(serde_json::to_vec(&keys)?)
    }

    fn restore(&mut self, _blob: &[u8]) -> Result<()> {
        Ok(())
    }
}

/// Translator whose output quality follows a fixed schedule: after `v`
/// fine-tunes it keeps the first `quality[v]` share of each reference.
pub struct ScheduledMt {
    pub references: HashMap<String, String>,
    pub quality: Vec<f64>,
    pub version: usize,
}

impl MtBackend for ScheduledMt {
    fn kind(&self) -> &str {
        "scheduled-mt"
    }

    fn translate(&self, source: &str) -> Result<String> {
        let reference = self.references.get(source).map(String::as_str).unwrap_or("");
        let words: Vec<&str> = reference.split(' ').collect();
        let q = self.quality[self.version.min(self.quality.len() - 1)];
        let keep = (q * words.len() as f64).round() as usize;
        Ok(words[..keep].join(" "))
    }

    fn fine_tune(&mut self, records: &[FineTuneRecord]) -> Result<()> {
        if !records.is_empty() {
            self.version += 1;
        }
        Ok(())
    }

    fn snapshot(&self) -> Result<Vec<u8>> {
        Ok(self.version.to_string().into_bytes())
    }

    fn restore(&mut self, blob: &[u8]) -> Result<()> {
        self.version = std::str::from_utf8(blob)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::input("bad snapshot"))?;
        Ok(())
    }
}
