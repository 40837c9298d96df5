//! The cyclic feedback controller.
//!
//! Each cycle runs an MT-adaptation loop and then an ASR-adaptation loop.
//! Every iteration decodes the fine-tuning corpus into k-best transcriptions
//! and their translations, selects the candidates whose translation scores
//! well against the reference, fine-tunes one backend on them and re-scores
//! the whole cascade on the dev set. A loop stops after `patience`
//! iterations without an improvement of at least `min_delta` and leaves the
//! backends at the best dev state seen so far.

mod cache;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use cache::{state_hash, CacheStats, DecodeCache};

use crate::backends::{AsrBackend, MtBackend};
use crate::error::{Error, Result};
use crate::metrics::{corpus_bleu, corpus_chrf, corpus_wer, ChrfParams, MetricsReport};
use crate::selection::{
    build_asr_finetune_set, build_mt_finetune_set, DecodedUtterance, SelectionConfig, SelectionStats,
};
use crate::text::{split_tokens, Utterance};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DevMetric {
    Chrf,
    Bleu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Phase {
    MtAdapt,
    AsrAdapt,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::MtAdapt => "MT_ADAPT",
            Phase::AsrAdapt => "ASR_ADAPT",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopConfig {
    pub selection: SelectionConfig,
    pub max_mt_iters: usize,
    pub max_asr_iters: usize,
    pub max_cycles: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub dev_metric: DevMetric,
    pub seed: u64,
    /// Also score the test split after every iteration.
    pub log_test_scores: bool,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            selection: SelectionConfig::default(),
            max_mt_iters: 5,
            max_asr_iters: 5,
            max_cycles: 3,
            patience: 2,
            min_delta: 1e-4,
            dev_metric: DevMetric::Chrf,
            seed: 0,
            log_test_scores: false,
        }
    }
}

impl LoopConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_mt_iters == 0 || self.max_asr_iters == 0 || self.max_cycles == 0 {
            return Err(Error::input("iteration and cycle bounds must be >= 1"));
        }
        if self.patience == 0 {
            return Err(Error::input("patience must be >= 1"));
        }
        if !(self.min_delta >= 0.0) {
            return Err(Error::input("min_delta must be non-negative"));
        }
        self.selection.validate()
    }
}

/// One row of the iteration log. Row 0 scores the starting cascade.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub cycle: usize,
    pub phase: Phase,
    pub iteration: usize,
    pub n_records_selected: usize,
    pub mean_selected_chrf: f64,
    pub dev_score: f64,
    pub test_score: Option<f64>,
    pub wall_time_s: f64,
}

pub const ITERATIONS_CSV_HEADER: &str =
    "cycle,phase,iteration,n_records_selected,mean_selected_chrf,dev_score,test_score";

#[derive(Serialize)]
struct CsvRow<'a> {
    cycle: usize,
    phase: &'a str,
    iteration: usize,
    n_records_selected: usize,
    mean_selected_chrf: String,
    dev_score: String,
    test_score: String,
}

/// Writes the log as CSV. Wall times are left out so that identical runs
/// produce identical files.
pub fn write_iterations_csv(path: &Path, log: &[IterationLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    for r in log {
        w.serialize(CsvRow {
            cycle: r.cycle,
            phase: r.phase.as_str(),
            iteration: r.iteration,
            n_records_selected: r.n_records_selected,
            mean_selected_chrf: format!("{:.6}", r.mean_selected_chrf),
            dev_score: format!("{:.6}", r.dev_score),
            test_score: r.test_score.map(|s| format!("{s:.6}")).unwrap_or_default(),
        })
        .map_err(csv_error)?;
    }
    if log.is_empty() {
        w.write_record(ITERATIONS_CSV_HEADER.split(','))
            .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::input(format!("csv: {other:?}")),
    }
}

/// Patience-based stopping with best tracking.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StoppingRule {
    pub patience: usize,
    pub min_delta: f64,
    pub best: f64,
    pub stale: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Verdict {
    /// The score is a new maximum.
    pub new_best: bool,
    pub stop: bool,
}

impl StoppingRule {
    pub fn new(patience: usize, min_delta: f64, best: f64) -> Self {
        StoppingRule {
            patience,
            min_delta,
            best,
            stale: 0,
        }
    }

    pub fn observe(&mut self, score: f64) -> Verdict {
        if score >= self.best + self.min_delta {
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        let new_best = score > self.best;
        if new_best {
            self.best = score;
        }
        Verdict {
            new_best,
            stop: self.stale >= self.patience,
        }
    }
}

/// Serializable progress of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopState {
    pub cycle: usize,
    pub phase: Phase,
    /// Dev score of every evaluated state, starting with the initial one.
    pub dev_history: Vec<f64>,
    pub best_dev: f64,
    pub best_asr_hash: String,
    pub best_mt_hash: String,
    /// State hashes after each fine-tune.
    pub asr_history: Vec<String>,
    pub mt_history: Vec<String>,
    pub log: Vec<IterationLog>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub cycle: usize,
    pub phase: Phase,
    pub iteration: usize,
    pub dev_score: f64,
    pub asr_snapshot: String,
    pub mt_snapshot: String,
}

/// Summary of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    /// `Some("mt_only")` for the ablation.
    pub ablation: Option<String>,
    pub seed: u64,
    pub dev_metric: DevMetric,
    pub n_cycles: usize,
    pub initial_dev: f64,
    pub final_dev: f64,
    pub untuned_test: Option<MetricsReport>,
    pub final_test: Option<MetricsReport>,
    pub asr_snapshot_sha256: String,
    pub mt_snapshot_sha256: String,
    pub cache: CacheStats,
    pub wall_time_s: f64,
    pub iterations: Vec<IterationLog>,
}

/// Builds a metrics report from 1-best transcriptions and their translations.
fn cascade_metrics(
    transcripts: &[String],
    translations: &[String],
    corpus: &[Utterance],
    params: &ChrfParams,
) -> Result<MetricsReport> {
    let references: Vec<String> = corpus.iter().map(|u| u.reference_translation.clone()).collect();
    let hyp_tokens: Vec<_> = translations.iter().map(|t| split_tokens(t)).collect();
    let ref_tokens: Vec<_> = references.iter().map(|t| split_tokens(t)).collect();
    let (asr_hyps, golds): (Vec<_>, Vec<_>) = transcripts
        .iter()
        .zip(corpus)
        .filter_map(|(t, u)| {
            u.gold_transcript
                .as_ref()
                .map(|g| (split_tokens(t), split_tokens(g)))
        })
        .unzip();
    Ok(MetricsReport {
        bleu: corpus_bleu(&hyp_tokens, &ref_tokens)?,
        chrf: corpus_chrf(translations, &references, params)?,
        wer: if golds.is_empty() {
            0.0
        } else {
            corpus_wer(&asr_hyps, &golds)?
        },
        n_sentences: corpus.len(),
    })
}

/// Scores the cascade: 1-best transcription, then translation.
pub fn evaluate_cascade(
    asr: &dyn AsrBackend,
    mt: &dyn MtBackend,
    corpus: &[Utterance],
) -> Result<MetricsReport> {
    if corpus.is_empty() {
        return Err(Error::input("cannot evaluate an empty corpus"));
    }
    let mut transcripts = Vec::with_capacity(corpus.len());
    let mut translations = Vec::with_capacity(corpus.len());
    for u in corpus {
        let text = asr.transcribe_kbest(u, 1)?.best().text.clone();
        translations.push(mt.translate(&text)?);
        transcripts.push(text);
    }
    cascade_metrics(&transcripts, &translations, corpus, &ChrfParams::default())
}

/// The feedback loop over one pair of backends and fixed corpora.
pub struct FeedbackLoop<'a> {
    asr: &'a mut dyn AsrBackend,
    mt: &'a mut dyn MtBackend,
    data: &'a [Utterance],
    dev: &'a [Utterance],
    test: Option<&'a [Utterance]>,
    cfg: LoopConfig,
    cache: DecodeCache,
    asr_hash: String,
    mt_hash: String,
    best_asr: Vec<u8>,
    best_mt: Vec<u8>,
    current_dev: f64,
    state: LoopState,
    run_dir: Option<PathBuf>,
    manifest: Vec<ManifestEntry>,
    untuned_test: Option<MetricsReport>,
    started: Instant,
}

impl<'a> FeedbackLoop<'a> {
    /// Scores the starting cascade on dev (and test, when given).
    pub fn new(
        asr: &'a mut dyn AsrBackend,
        mt: &'a mut dyn MtBackend,
        data: &'a [Utterance],
        dev: &'a [Utterance],
        test: Option<&'a [Utterance]>,
        cfg: LoopConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() || dev.is_empty() || test.is_some_and(<[_]>::is_empty) {
            return Err(Error::input("fine-tune, dev and test corpora must be non-empty"));
        }
        let started = Instant::now();
        let best_asr = asr.snapshot()?;
        let best_mt = mt.snapshot()?;
        let asr_hash = state_hash(&best_asr);
        let mt_hash = state_hash(&best_mt);
        let states = cfg.max_mt_iters.max(cfg.max_asr_iters) + 2;
        let mut lp = FeedbackLoop {
            asr,
            mt,
            data,
            dev,
            test,
            cache: DecodeCache::new(states, states),
            state: LoopState {
                cycle: 0,
                phase: Phase::MtAdapt,
                dev_history: Vec::new(),
                best_dev: f64::NEG_INFINITY,
                best_asr_hash: asr_hash.clone(),
                best_mt_hash: mt_hash.clone(),
                asr_history: Vec::new(),
                mt_history: Vec::new(),
                log: Vec::new(),
                seed: cfg.seed,
            },
            cfg,
            asr_hash,
            mt_hash,
            best_asr,
            best_mt,
            current_dev: f64::NEG_INFINITY,
            run_dir: None,
            manifest: Vec::new(),
            untuned_test: None,
            started,
        };
        let dev_score = lp.dev_score()?;
        lp.current_dev = dev_score;
        lp.state.best_dev = dev_score;
        lp.state.dev_history.push(dev_score);
        if let Some(test) = lp.test {
            lp.untuned_test = Some(lp.evaluate(test)?);
        }
        let test_score = lp.untuned_test.map(|m| lp.metric_value(&m));
        lp.state.log.push(IterationLog {
            cycle: 0,
            phase: Phase::MtAdapt,
            iteration: 0,
            n_records_selected: 0,
            mean_selected_chrf: 0.0,
            dev_score,
            test_score: test_score.filter(|_| lp.cfg.log_test_scores),
            wall_time_s: started.elapsed().as_secs_f64(),
        });
        Ok(lp)
    }

    /// Persists snapshots, logs and the report under `dir`.
    pub fn with_run_dir(mut self, dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(dir.join("snapshots"))?;
        fs::create_dir_all(dir.join("logs"))?;
        self.run_dir = Some(dir);
        self.record_best(0, Phase::MtAdapt, 0)?;
        Ok(self)
    }

    pub fn state(&self) -> &LoopState {
        &self.state
    }

    pub fn cache_stats(&self) -> CacheStats {
        self.cache.stats
    }

    pub fn untuned_test(&self) -> Option<MetricsReport> {
        self.untuned_test
    }

    fn metric_value(&self, m: &MetricsReport) -> f64 {
        match self.cfg.dev_metric {
            DevMetric::Chrf => 100.0 * m.chrf,
            DevMetric::Bleu => m.bleu,
        }
    }

    fn kbest(&mut self, u: &Utterance) -> Result<crate::text::KBestList> {
        let k = self.cfg.selection.k;
        let asr = &*self.asr;
        self.cache
            .kbest(&self.asr_hash, &u.id, || asr.transcribe_kbest(u, k))
    }

    fn translate(&mut self, source: &str) -> Result<String> {
        let mt = &*self.mt;
        self.cache
            .translation(&self.mt_hash, source, || mt.translate(source))
    }

    /// k-best transcriptions of `corpus` with the translation of every hypothesis.
    pub fn decode_batch(&mut self, corpus: &[Utterance]) -> Result<Vec<DecodedUtterance>> {
        corpus
            .iter()
            .map(|u| {
                let kbest = self.kbest(u)?;
                let translations = kbest
                    .hypotheses
                    .iter()
                    .map(|h| self.translate(&h.text))
                    .collect::<Result<Vec<_>>>()?;
                Ok(DecodedUtterance {
                    utterance: u.clone(),
                    kbest,
                    translations,
                })
            })
            .collect()
    }

    /// Cascade metrics of the current state on `corpus`.
    pub fn evaluate(&mut self, corpus: &[Utterance]) -> Result<MetricsReport> {
        let mut transcripts = Vec::with_capacity(corpus.len());
        let mut translations = Vec::with_capacity(corpus.len());
        for u in corpus {
            let text = self.kbest(u)?.best().text.clone();
            translations.push(self.translate(&text)?);
            transcripts.push(text);
        }
        cascade_metrics(
            &transcripts,
            &translations,
            corpus,
            &self.cfg.selection.chrf_params,
        )
    }

    fn dev_score(&mut self) -> Result<f64> {
        let m = self.evaluate(self.dev)?;
        Ok(self.metric_value(&m))
    }

    fn snapshot_path(&self, kind: &str, hash: &str) -> Option<PathBuf> {
        self.run_dir
            .as_ref()
            .map(|d| d.join("snapshots").join(format!("{kind}-{}.json", &hash[..16])))
    }

    fn record_best(&mut self, cycle: usize, phase: Phase, iteration: usize) -> Result<()> {
        let Some(dir) = self.run_dir.clone() else {
            return Ok(());
        };
        let asr_path = self
            .snapshot_path(self.asr.kind(), &self.state.best_asr_hash)
            .expect("run dir");
        let mt_path = self
            .snapshot_path(self.mt.kind(), &self.state.best_mt_hash)
            .expect("run dir");
        if !asr_path.exists() {
            fs::write(&asr_path, &self.best_asr)?;
        }
        if !mt_path.exists() {
            fs::write(&mt_path, &self.best_mt)?;
        }
        let name = |p: &Path| p.file_name().unwrap().to_string_lossy().into_owned();
        self.manifest.push(ManifestEntry {
            cycle,
            phase,
            iteration,
            dev_score: self.state.best_dev,
            asr_snapshot: name(&asr_path),
            mt_snapshot: name(&mt_path),
        });
        fs::write(
            dir.join("snapshots").join("manifest.json"),
            serde_json::to_vec_pretty(&self.manifest)?,
        )?;
        Ok(())
    }

    fn refresh_hash(&mut self, phase: Phase) -> Result<()> {
        match phase {
            Phase::MtAdapt => {
                self.mt_hash = state_hash(&self.mt.snapshot()?);
                self.state.mt_history.push(self.mt_hash.clone());
            }
            Phase::AsrAdapt => {
                self.asr_hash = state_hash(&self.asr.snapshot()?);
                self.state.asr_history.push(self.asr_hash.clone());
            }
        }
        Ok(())
    }

    /// Restores the backend adapted in `phase` to the best snapshot.
    fn restore_best(&mut self, phase: Phase) -> Result<()> {
        match phase {
            Phase::MtAdapt if self.mt_hash != self.state.best_mt_hash => {
                self.mt.restore(&self.best_mt)?;
                self.mt_hash = self.state.best_mt_hash.clone();
            }
            Phase::AsrAdapt if self.asr_hash != self.state.best_asr_hash => {
                self.asr.restore(&self.best_asr)?;
                self.asr_hash = self.state.best_asr_hash.clone();
            }
            _ => {}
        }
        self.current_dev = self.state.best_dev;
        Ok(())
    }

    fn select(&mut self, phase: Phase) -> Result<(Vec<crate::selection::FineTuneRecord>, SelectionStats)> {
        let batch = self.decode_batch(self.data)?;
        match phase {
            Phase::MtAdapt => build_mt_finetune_set(&batch, &self.cfg.selection),
            Phase::AsrAdapt => build_asr_finetune_set(&batch, &self.cfg.selection),
        }
    }

    /// Runs one adaptation loop and restores the best state on exit.
    pub fn adaptation_loop(&mut self, phase: Phase) -> Result<()> {
        self.state.phase = phase;
        let max_iters = match phase {
            Phase::MtAdapt => self.cfg.max_mt_iters,
            Phase::AsrAdapt => self.cfg.max_asr_iters,
        };
        let mut rule = StoppingRule::new(self.cfg.patience, self.cfg.min_delta, self.state.best_dev);
        for iteration in 1..=max_iters {
            let t0 = Instant::now();
            let (records, stats) = self.select(phase)?;
            if records.is_empty() {
                log::warn!(
                    "cycle {} {} iteration {iteration}: nothing selected",
                    self.state.cycle,
                    phase.as_str()
                );
            } else {
                match phase {
                    Phase::MtAdapt => self.mt.fine_tune(&records)?,
                    Phase::AsrAdapt => self.asr.fine_tune(&records)?,
                }
                self.refresh_hash(phase)?;
                self.current_dev = self.dev_score()?;
            }
            let dev = self.current_dev;
            let test_score = match (self.test, self.cfg.log_test_scores) {
                (Some(test), true) => {
                    let m = self.evaluate(test)?;
                    Some(self.metric_value(&m))
                }
                _ => None,
            };
            self.state.dev_history.push(dev);
            self.state.log.push(IterationLog {
                cycle: self.state.cycle,
                phase,
                iteration,
                n_records_selected: stats.n_records,
                mean_selected_chrf: stats.mean_selected_chrf,
                dev_score: dev,
                test_score,
                wall_time_s: t0.elapsed().as_secs_f64(),
            });
            log::info!(
                "cycle {} {} iteration {iteration}: {} records, dev {dev:.4}",
                self.state.cycle,
                phase.as_str(),
                stats.n_records
            );
            let verdict = rule.observe(dev);
            if verdict.new_best {
                self.state.best_dev = dev;
                match phase {
                    Phase::MtAdapt => {
                        self.best_mt = self.mt.snapshot()?;
                        self.state.best_mt_hash = self.mt_hash.clone();
                    }
                    Phase::AsrAdapt => {
                        self.best_asr = self.asr.snapshot()?;
                        self.state.best_asr_hash = self.asr_hash.clone();
                    }
                }
                self.record_best(self.state.cycle, phase, iteration)?;
            }
            if verdict.stop {
                break;
            }
        }
        self.restore_best(phase)
    }

    /// Alternates MT and ASR loops until a cycle stops improving dev.
    pub fn run(&mut self, adapt_asr: bool) -> Result<()> {
        let result = self.run_inner(adapt_asr);
        if result.is_err() {
            if let Some(dir) = &self.run_dir {
                if let Ok(bytes) = serde_json::to_vec_pretty(&self.state) {
                    let _ = fs::write(dir.join("state.json"), bytes);
                }
            }
        }
        result
    }

    fn run_inner(&mut self, adapt_asr: bool) -> Result<()> {
        for cycle in 1..=self.cfg.max_cycles {
            self.state.cycle = cycle;
            let start = self.state.best_dev;
            self.adaptation_loop(Phase::MtAdapt)?;
            if adapt_asr {
                self.adaptation_loop(Phase::AsrAdapt)?;
            }
            if self.state.best_dev < start + self.cfg.min_delta {
                break;
            }
        }
        Ok(())
    }

    /// Scores the final state and writes the run directory, if any.
    pub fn finish(mut self, ablation: Option<&str>) -> Result<RunReport> {
        let final_test = match self.test {
            Some(test) => Some(self.evaluate(test)?),
            None => None,
        };
        let report = RunReport {
            ablation: ablation.map(str::to_owned),
            seed: self.cfg.seed,
            dev_metric: self.cfg.dev_metric,
            n_cycles: self.state.cycle,
            initial_dev: self.state.dev_history[0],
            final_dev: self.current_dev,
            untuned_test: self.untuned_test,
            final_test,
            asr_snapshot_sha256: self.asr_hash.clone(),
            mt_snapshot_sha256: self.mt_hash.clone(),
            cache: self.cache.stats,
            wall_time_s: self.started.elapsed().as_secs_f64(),
            iterations: self.state.log.clone(),
        };
        if let Some(dir) = &self.run_dir {
            write_iterations_csv(&dir.join("logs").join("iterations.csv"), &report.iterations)?;
            fs::write(dir.join("report.json"), serde_json::to_vec_pretty(&report)?)?;
        }
        Ok(report)
    }
}

fn run(
    asr: &mut dyn AsrBackend,
    mt: &mut dyn MtBackend,
    data: &[Utterance],
    dev: &[Utterance],
    test: Option<&[Utterance]>,
    cfg: &LoopConfig,
    run_dir: Option<&Path>,
    adapt_asr: bool,
) -> Result<RunReport> {
    let mut lp = FeedbackLoop::new(asr, mt, data, dev, test, cfg.clone())?;
    if let Some(dir) = run_dir {
        lp = lp.with_run_dir(dir)?;
    }
    lp.run(adapt_asr)?;
    lp.finish(if adapt_asr { None } else { Some("mt_only") })
}

/// Full cyclic feedback, starting with MT adaptation.
pub fn run_cycles(
    asr: &mut dyn AsrBackend,
    mt: &mut dyn MtBackend,
    data: &[Utterance],
    dev: &[Utterance],
    test: Option<&[Utterance]>,
    cfg: &LoopConfig,
    run_dir: Option<&Path>,
) -> Result<RunReport> {
    run(asr, mt, data, dev, test, cfg, run_dir, true)
}

/// Cycles with the ASR loop disabled; the recognizer is never modified.
pub fn run_ablation_mt_only(
    asr: &mut dyn AsrBackend,
    mt: &mut dyn MtBackend,
    data: &[Utterance],
    dev: &[Utterance],
    test: Option<&[Utterance]>,
    cfg: &LoopConfig,
    run_dir: Option<&Path>,
) -> Result<RunReport> {
    let before = asr.snapshot()?;
    let report = run(asr, mt, data, dev, test, cfg, run_dir, false)?;
    if asr.snapshot()? != before {
        return Err(Error::backend("ASR state changed during the MT-only ablation"));
    }
    Ok(report)
}
