//! Acceptance suite. Each test prints one `PASS`/`FAIL` line and then asserts.
//!
//! Tests share one lock so that timings are not distorted by the others, and
//! the experiment runs are cached so the grid can reuse the 100-100 seeds.

mod common;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cascade_feedback::backends::char_lm::CharLm;
use cascade_feedback::backends::decoder::noisy_channel_decode;
use cascade_feedback::backends::decoder::DecoderConfig;
use cascade_feedback::backends::error_model::ErrorModel;
use cascade_feedback::backends::ibm1::{ibm1_em, mt_decode, WeightedPair};
use cascade_feedback::backends::{AsrBackend, MtBackend, MtConfig, ReferenceMt};
use cascade_feedback::cycle::{
    evaluate_cascade, run_ablation_mt_only, run_cycles, FeedbackLoop, LoopConfig, Phase,
};
use cascade_feedback::harness::{
    generate_synthetic_task, pretrain_reference, run_preset, ExperimentConfig, ExperimentPreset,
    SyntheticTaskConfig, TaskCorpora,
};
use cascade_feedback::metrics::{corpus_bleu, sentence_chrf, wer, ChrfParams};
use cascade_feedback::selection::{
    build_asr_finetune_set, build_mt_finetune_set, DecodedUtterance, FineTuneRecord, SelectionConfig,
};
use cascade_feedback::text::{split_tokens, KBestList, TokenSequence, Utterance};

use common::*;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

/// Writes straight to stderr so the line shows up even when output is captured.
fn report(n: usize, title: &str, pass: bool, detail: &str, elapsed: Duration) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let line = format!(
        "criterion {n} [{title}]: {verdict} ({detail}; {:.1}s)\n",
        elapsed.as_secs_f64()
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn toks(s: &str) -> TokenSequence {
    split_tokens(s)
}

// ---------------------------------------------------------------- criterion 1

const CHARS: [char; 12] = ['a', 'b', 'c', 'd', ' ', 'ä', 'ö', 'ß', 'é', '€', '日', '本'];

fn random_string(rng: &mut ChaCha8Rng, max_len: usize) -> String {
    let len = rng.gen_range(0..=max_len);
    (0..len).map(|_| *CHARS.choose(rng).unwrap()).collect()
}

/// `(hypotheses, references, expected BLEU)`, worked out by hand.
fn bleu_micro_corpora() -> Vec<(Vec<&'static str>, Vec<&'static str>, f64)> {
    let q = |x: f64| x.powf(0.25);
    vec![
        (
            vec!["the cat sat on the mat"],
            vec!["the cat sat on the mat"],
            100.0,
        ),
        // p = 5/5, 3/4, 2/3, 1/2 and a short hypothesis (5 vs 6)
        (
            vec!["the cat sat on mat"],
            vec!["the cat sat on the mat"],
            100.0 * (-0.2f64).exp() * q(1.0 * 0.75 * (2.0 / 3.0) * 0.5),
        ),
        (vec!["a b c d"], vec!["a b c e"], 0.0),
        // no 3- or 4-grams on either side
        (vec!["a b"], vec!["a b"], 100.0),
        // the reference has a trigram the hypothesis cannot match
        (vec!["a b"], vec!["a b c"], 0.0),
        (
            vec!["a b c d", "e f g h"],
            vec!["a b c d", "e f g x"],
            100.0 * q(7.0 / 8.0 * 5.0 / 6.0 * 3.0 / 4.0 * 0.5),
        ),
        // clipping: every n-gram is repeated in the hypothesis
        (
            vec!["x y z w x y z w"],
            vec!["x y z w q"],
            100.0 * q(0.5 * 3.0 / 7.0 * 2.0 / 6.0 * 1.0 / 5.0),
        ),
        (
            vec!["a b c d e"],
            vec!["a b c d"],
            100.0 * q(4.0 / 5.0 * 3.0 / 4.0 * 2.0 / 3.0 * 0.5),
        ),
        // an empty hypothesis only shortens the corpus
        (
            vec!["", "a b c d"],
            vec!["x y", "a b c d"],
            100.0 * (-0.5f64).exp(),
        ),
        (
            vec!["über die straße gehen", "ich möchte tee"],
            vec!["über die straße gehen", "ich möchte kaffee trinken"],
            100.0 * (1.0f64 - 8.0 / 7.0).exp() * q(6.0 / 7.0 * 4.0 / 5.0 * 2.0 / 3.0),
        ),
    ]
}

#[test]
fn criterion_1_metric_oracles() {
    let _g = serial();
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let variants = [
        ChrfParams::default(),
        ChrfParams {
            max_ngram_order: 3,
            beta: 1.0,
            strip_whitespace: false,
        },
    ];
    let mut chrf_worst: f64 = 0.0;
    let mut wer_mismatches = 0;
    for _ in 0..1000 {
        let h = random_string(&mut rng, 40);
        let r = random_string(&mut rng, 40);
        for p in &variants {
            let got = sentence_chrf(&h, &r, p);
            let want = brute_chrf(&h, &r, p.max_ngram_order, p.beta, p.strip_whitespace);
            chrf_worst = chrf_worst.max((got - want).abs());
        }
        let words = ["das", "haus", "ist", "groß", "日本"];
        let hyp: Vec<String> = (0..rng.gen_range(0..=15))
            .map(|_| words.choose(&mut rng).unwrap().to_string())
            .collect();
        let reference: Vec<String> = (0..rng.gen_range(1..=15))
            .map(|_| words.choose(&mut rng).unwrap().to_string())
            .collect();
        let got = wer(
            &TokenSequence::new(hyp.clone()).unwrap(),
            &TokenSequence::new(reference.clone()).unwrap(),
        )
        .unwrap();
        let want = brute_edit_distance(&hyp, &reference) as f64 / reference.len() as f64;
        if got != want {
            wer_mismatches += 1;
        }
    }
    let mut bleu_worst: f64 = 0.0;
    for (hyps, refs, want) in bleu_micro_corpora() {
        let h: Vec<_> = hyps.iter().map(|s| toks(s)).collect();
        let r: Vec<_> = refs.iter().map(|s| toks(s)).collect();
        bleu_worst = bleu_worst.max((corpus_bleu(&h, &r).unwrap() - want).abs());
    }
    let elapsed = t0.elapsed();
    let pass =
        chrf_worst <= 1e-9 && wer_mismatches == 0 && bleu_worst <= 1e-9 && elapsed.as_secs_f64() < 10.0;
    report(
        1,
        "metric oracles",
        pass,
        &format!(
            "max chrF diff {chrf_worst:.2e}, WER mismatches {wer_mismatches}, max BLEU diff {bleu_worst:.2e}"
        ),
        elapsed,
    );
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 2

const WORDS: [&str; 8] = ["the", "house", "is", "small", "a", "dog", "barks", "loud"];

fn random_sentence(rng: &mut ChaCha8Rng, min: usize, max: usize) -> String {
    (0..rng.gen_range(min..=max))
        .map(|_| *WORDS.choose(rng).unwrap())
        .collect::<Vec<_>>()
        .join(" ")
}

fn perturb(rng: &mut ChaCha8Rng, s: &str) -> String {
    let mut words: Vec<&str> = s.split(' ').filter(|w| !w.is_empty()).collect();
    for _ in 0..rng.gen_range(0..4) {
        match rng.gen_range(0..3) {
            0 if !words.is_empty() => {
                let i = rng.gen_range(0..words.len());
                words[i] = WORDS.choose(rng).unwrap();
            }
            1 if !words.is_empty() => {
                words.remove(rng.gen_range(0..words.len()));
            }
            _ => words.push(WORDS.choose(rng).unwrap()),
        }
    }
    words.join(" ")
}

fn random_batch(rng: &mut ChaCha8Rng) -> Vec<DecodedUtterance> {
    (0..rng.gen_range(1..=6))
        .map(|u| {
            let reference = random_sentence(rng, 1, 6);
            let k = rng.gen_range(1..=6);
            let mut texts = BTreeSet::new();
            let mut scored = Vec::new();
            while scored.len() < k {
                let t = format!("{} {}", random_sentence(rng, 1, 4), scored.len());
                if texts.insert(t.clone()) {
                    scored.push((t, -(scored.len() as f64)));
                }
            }
            let translations = (0..k).map(|_| perturb(rng, &reference)).collect();
            DecodedUtterance {
                utterance: Utterance {
                    id: format!("u{u}"),
                    observation: random_sentence(rng, 1, 5),
                    gold_transcript: None,
                    reference_translation: reference,
                },
                kbest: KBestList::from_scored(format!("u{u}"), scored).unwrap(),
                translations,
            }
        })
        .collect()
}

/// ChrF of the translation behind a selected transcription.
fn rescore(batch: &[DecodedUtterance], id: &str, transcription: &str, params: &ChrfParams) -> f64 {
    let item = batch.iter().find(|d| d.utterance.id == id).unwrap();
    let i = item
        .kbest
        .hypotheses
        .iter()
        .position(|h| h.text == transcription)
        .unwrap();
    sentence_chrf(
        &item.translations[i],
        &item.utterance.reference_translation,
        params,
    )
}

fn weight_sums(records: &[FineTuneRecord]) -> BTreeMap<&str, f64> {
    let mut sums = BTreeMap::new();
    for r in records {
        *sums.entry(r.utterance_id.as_str()).or_insert(0.0) += r.weight;
    }
    sums
}

#[test]
fn criterion_2_selection_invariants() {
    let _g = serial();
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut failures: Vec<String> = Vec::new();
    let mut n_records = 0;
    for b in 0..500 {
        let batch = random_batch(&mut rng);
        let mt_t: f64 = rng.gen_range(0.0..1.0);
        let cfg = SelectionConfig {
            mt_threshold: mt_t,
            asr_threshold: rng.gen_range(mt_t..=1.0),
            weight_exponent: rng.gen_range(0.5..3.0),
            ..Default::default()
        };
        let (mt, _) = build_mt_finetune_set(&batch, &cfg).unwrap();
        let (asr, _) = build_asr_finetune_set(&batch, &cfg).unwrap();
        n_records += mt.len() + asr.len();

        for r in &mt {
            if rescore(&batch, &r.utterance_id, &r.input_text, &cfg.chrf_params) < cfg.mt_threshold {
                failures.push(format!("batch {b}: MT record below threshold"));
            }
        }
        for r in &asr {
            if rescore(&batch, &r.utterance_id, &r.target_text, &cfg.chrf_params) < cfg.asr_threshold {
                failures.push(format!("batch {b}: ASR record below threshold"));
            }
        }
        for (_, s) in weight_sums(&mt).into_iter().chain(weight_sums(&asr)) {
            if (s - 1.0).abs() > 1e-9 {
                failures.push(format!("batch {b}: weights sum to {s}"));
            }
        }

        let key = |r: &FineTuneRecord| {
            (
                r.utterance_id.clone(),
                r.input_text.clone(),
                r.target_text.clone(),
            )
        };
        let raised = SelectionConfig {
            mt_threshold: rng.gen_range(cfg.mt_threshold..=1.0),
            ..cfg.clone()
        };
        let (mt_raised, _) = build_mt_finetune_set(&batch, &raised).unwrap();
        let before: BTreeSet<_> = mt.iter().map(key).collect();
        if !mt_raised.iter().map(key).all(|k| before.contains(&k)) || mt_raised.len() > mt.len() {
            failures.push(format!("batch {b}: raising the threshold added records"));
        }

        let mt_hyps: BTreeSet<_> = mt.iter().map(|r| (&r.utterance_id, &r.input_text)).collect();
        if !asr
            .iter()
            .all(|r| mt_hyps.contains(&(&r.utterance_id, &r.target_text)))
        {
            failures.push(format!("batch {b}: ASR selection not within MT selection"));
        }
    }
    let elapsed = t0.elapsed();
    let pass = failures.is_empty() && elapsed.as_secs_f64() < 10.0;
    report(
        2,
        "selection invariants",
        pass,
        &format!("500 batches, {n_records} records, {} violations", failures.len()),
        elapsed,
    );
    assert!(pass, "{:?}", &failures[..failures.len().min(5)]);
}

// ---------------------------------------------------------------- criterion 3

const ALPHABET: [char; 5] = [' ', 'a', 'b', 'c', 'd'];

fn random_models(rng: &mut ChaCha8Rng) -> (ErrorModel, CharLm) {
    let word = |rng: &mut ChaCha8Rng| -> String {
        (0..rng.gen_range(1..=3))
            .map(|_| ALPHABET[rng.gen_range(1..5)])
            .collect()
    };
    let sentence = |rng: &mut ChaCha8Rng| -> String {
        (0..rng.gen_range(1..=3))
            .map(|_| word(rng))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let clean: Vec<String> = (0..12).map(|_| sentence(rng)).collect();
    let noisy: Vec<String> = clean
        .iter()
        .map(|s| {
            s.chars()
                .filter_map(|c| match rng.gen_range(0..10) {
                    0 => None,
                    1 => Some(ALPHABET[rng.gen_range(1..5)]),
                    _ => Some(c),
                })
                .collect()
        })
        .collect();
    let em = ErrorModel::train(
        noisy
            .iter()
            .zip(&clean)
            .map(|(o, c)| (o.as_str(), c.as_str(), 1.0))
            .chain([(" abcd", " abcd", 1.0)]),
        0.3,
    )
    .unwrap();
    let lm = CharLm::train(clean.iter().map(|s| (s.as_str(), 1.0)), ALPHABET, 3, 0.2).unwrap();
    (em, lm)
}

fn decoder_mismatches(rng: &mut ChaCha8Rng, cases: usize) -> Vec<String> {
    let mut bad = Vec::new();
    for case in 0..cases {
        let (em, lm) = random_models(rng);
        // the path count multiplies per word, so keep the number of words small
        let obs: String = loop {
            let o: String = (0..rng.gen_range(0..=8))
                .map(|_| *ALPHABET.choose(rng).unwrap())
                .collect();
            if o.matches(' ').count() <= 3 {
                break o;
            }
        };
        let budget = if obs.matches(' ').count() <= 1 {
            rng.gen_range(1..=2)
        } else {
            1
        };
        let k = rng.gen_range(1..=8);
        let cfg = DecoderConfig {
            beam_width: usize::MAX,
            max_edits_per_word: budget,
        };
        let got = noisy_channel_decode("u", &obs, &em, &lm, &cfg, k).unwrap();
        let all = enumerate_decodings(&obs, &em, &lm, budget);
        let mut ranked: Vec<(&String, f64)> = all.iter().map(|(t, &s)| (t, s)).collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        if got.len() != k.min(ranked.len()) {
            bad.push(format!(
                "case {case} {obs:?}: {} hypotheses, expected {}",
                got.len(),
                k.min(ranked.len())
            ));
            continue;
        }
        for (h, (_, want)) in got.hypotheses.iter().zip(&ranked) {
            let own = all.get(&h.text).copied().unwrap_or(f64::NEG_INFINITY);
            if (h.model_score - want).abs() > 1e-9 || (h.model_score - own).abs() > 1e-9 {
                bad.push(format!(
                    "case {case} {obs:?}: {:?} scored {} (exhaustive {own}, rank target {want})",
                    h.text, h.model_score
                ));
                break;
            }
        }
    }
    bad
}

fn em_mismatches(rng: &mut ChaCha8Rng, corpora: usize) -> (Vec<String>, f64) {
    let src_vocab = ["das", "haus", "ist", "klein"];
    let tgt_vocab = ["the", "house", "is", "small"];
    let mut bad = Vec::new();
    let mut worst: f64 = 0.0;
    for c in 0..corpora {
        let corpus: Vec<(Vec<String>, Vec<String>, f64)> = (0..rng.gen_range(2..=6))
            .map(|_| {
                let pick = |rng: &mut ChaCha8Rng, v: &[&str]| -> Vec<String> {
                    (0..rng.gen_range(1..=4))
                        .map(|_| v.choose(rng).unwrap().to_string())
                        .collect()
                };
                (
                    pick(rng, &src_vocab),
                    pick(rng, &tgt_vocab),
                    rng.gen_range(0.1..2.0),
                )
            })
            .collect();
        let iterations = rng.gen_range(1..=8);
        let pairs: Vec<WeightedPair> = corpus
            .iter()
            .map(|(s, t, w)| {
                WeightedPair::new(
                    TokenSequence::new(s.clone()).unwrap(),
                    TokenSequence::new(t.clone()).unwrap(),
                    *w,
                )
            })
            .collect();
        let (table, stats) = ibm1_em(&pairs, iterations).unwrap();
        let (want, history) = brute_ibm1(&corpus, iterations);
        for ((f, e), p) in &want {
            worst = worst.max((table.prob(e, f) - p).abs());
        }
        if stats.log_likelihood.len() != history.len() {
            bad.push(format!("corpus {c}: log-likelihood trace length"));
        }
        for (a, b) in stats.log_likelihood.iter().zip(&history) {
            worst = worst.max((a - b).abs());
        }
        if stats.log_likelihood.windows(2).any(|w| w[1] < w[0] - 1e-9) {
            bad.push(format!(
                "corpus {c}: log-likelihood decreased {:?}",
                stats.log_likelihood
            ));
        }
    }
    if worst > 1e-9 {
        bad.push(format!("max EM deviation {worst:.2e}"));
    }
    (bad, worst)
}

#[test]
fn criterion_3_backend_oracles() {
    let _g = serial();
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let decode_bad = decoder_mismatches(&mut rng, 200);
    let (em_bad, em_worst) = em_mismatches(&mut rng, 20);
    let elapsed = t0.elapsed();
    let pass = decode_bad.is_empty() && em_bad.is_empty() && elapsed.as_secs_f64() < 60.0;
    report(
        3,
        "backend oracles",
        pass,
        &format!(
            "decoder mismatches {}/200, EM max diff {em_worst:.2e}, EM issues {}",
            decode_bad.len(),
            em_bad.len()
        ),
        elapsed,
    );
    assert!(pass, "{decode_bad:?} {em_bad:?}");
}

// ------------------------------------------------------------ criteria 4 and 5

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

#[derive(Debug, Clone, Copy)]
struct Outcome {
    untuned: f64,
    mt_only: f64,
    full: f64,
    elapsed: Duration,
}

fn corpora_for(seed: u64) -> TaskCorpora {
    static CACHE: OnceLock<Mutex<HashMap<u64, TaskCorpora>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    let mut map = cache.lock().unwrap();
    map.entry(seed)
        .or_insert_with(|| {
            let cfg = SyntheticTaskConfig {
                seed,
                ..Default::default()
            };
            generate_synthetic_task(&cfg).unwrap().into()
        })
        .clone()
}

fn outcome(preset: &str, seed: u64) -> Outcome {
    static CACHE: OnceLock<Mutex<HashMap<(String, u64), Outcome>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(o) = cache.lock().unwrap().get(&(preset.to_owned(), seed)) {
        return *o;
    }
    let t0 = Instant::now();
    let corpora = corpora_for(seed);
    let mut cfg = ExperimentConfig::default();
    cfg.task.seed = seed;
    cfg.loop_cfg.seed = seed;
    let r = run_preset(&corpora, &ExperimentPreset::parse(preset).unwrap(), &cfg, None).unwrap();
    let o = Outcome {
        untuned: r.untuned.bleu,
        mt_only: r.ablation.final_test.unwrap().bleu,
        full: r.full.final_test.unwrap().bleu,
        elapsed: t0.elapsed(),
    };
    cache.lock().unwrap().insert((preset.to_owned(), seed), o);
    o
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn criterion_4_system_ordering() {
    let _g = serial();
    let outcomes: Vec<Outcome> = SEEDS.iter().map(|&s| outcome("100-100", s)).collect();
    let elapsed: Duration = outcomes.iter().map(|o| o.elapsed).sum();
    let u = mean(outcomes.iter().map(|o| o.untuned));
    let a = mean(outcomes.iter().map(|o| o.mt_only));
    let f = mean(outcomes.iter().map(|o| o.full));
    let pass = u < a && a < f && f - u >= 1.0 && f - a > 0.0 && elapsed.as_secs_f64() < 600.0;
    report(
        4,
        "untuned < MT-only < full",
        pass,
        &format!("mean test BLEU over 5 seeds: untuned {u:.2}, MT-only {a:.2}, full {f:.2}"),
        elapsed,
    );
    assert!(pass);
}

#[test]
fn criterion_5_pretraining_trend() {
    let _g = serial();
    let mut elapsed = Duration::ZERO;
    let mut untuned = Vec::new();
    let mut gains = Vec::new();
    for preset in ["100-100", "25-25", "10-10"] {
        let outcomes: Vec<Outcome> = SEEDS.iter().map(|&s| outcome(preset, s)).collect();
        elapsed += outcomes.iter().map(|o| o.elapsed).sum::<Duration>();
        untuned.push(mean(outcomes.iter().map(|o| o.untuned)));
        gains.push(mean(outcomes.iter().map(|o| o.full - o.untuned)));
    }
    let monotone = untuned.windows(2).all(|w| w[1] <= w[0]);
    let improves = gains.iter().all(|&g| g > 0.0);
    let pass = monotone && improves && elapsed.as_secs_f64() < 1800.0;
    report(
        5,
        "pre-training trend",
        pass,
        &format!(
            "untuned BLEU 100-100/25-25/10-10: {:.2}/{:.2}/{:.2}; mean gain of full: {:.2}/{:.2}/{:.2}",
            untuned[0], untuned[1], untuned[2], gains[0], gains[1], gains[2]
        ),
        elapsed,
    );
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 6

fn small_experiment() -> (TaskCorpora, ExperimentConfig) {
    let mut cfg = ExperimentConfig::default();
    cfg.task = SyntheticTaskConfig {
        source_vocab_size: 60,
        target_vocab_size: 60,
        n_pretrain_asr: 300,
        n_pretrain_mt: 600,
        n_finetune: 120,
        n_dev: 40,
        n_test: 60,
        seed: 11,
        ..Default::default()
    };
    cfg.loop_cfg.max_mt_iters = 3;
    cfg.loop_cfg.max_asr_iters = 3;
    cfg.loop_cfg.max_cycles = 2;
    cfg.loop_cfg.log_test_scores = true;
    (generate_synthetic_task(&cfg.task).unwrap().into(), cfg)
}

fn restoration_on_declining_schedule() -> std::result::Result<(), String> {
    let data: Vec<Utterance> = (0..4)
        .map(|i| Utterance {
            id: format!("u{i}"),
            observation: format!("quelle {i}"),
            gold_transcript: None,
            reference_translation: format!("this is reference number {i} for the loop"),
        })
        .collect();
    let mut asr = FixedAsr {
        lists: data
            .iter()
            .map(|u| (u.id.clone(), vec![u.observation.clone()]))
            .collect(),
    };
    let mut mt = ScheduledMt {
        references: data
            .iter()
            .map(|u| (u.observation.clone(), u.reference_translation.clone()))
            .collect(),
        quality: vec![0.5, 0.75, 1.0, 0.6, 0.4, 0.3],
        version: 0,
    };
    let cfg = LoopConfig {
        max_mt_iters: 5,
        patience: 2,
        selection: SelectionConfig {
            mt_threshold: 0.0,
            ..Default::default()
        },
        ..Default::default()
    };
    let mut lp = FeedbackLoop::new(&mut asr, &mut mt, &data, &data, None, cfg).map_err(|e| e.to_string())?;
    lp.adaptation_loop(Phase::MtAdapt).map_err(|e| e.to_string())?;
    let history = lp.state().dev_history.clone();
    let report = lp.finish(None).map_err(|e| e.to_string())?;
    let max = history.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if report.final_dev != max || history.last() == Some(&max) {
        return Err(format!("final dev {} vs history {history:?}", report.final_dev));
    }
    if mt.version != 2 {
        return Err(format!("restored version {}", mt.version));
    }
    Ok(())
}

#[test]
fn criterion_6_loop_contracts() {
    let _g = serial();
    let t0 = Instant::now();
    let mut problems = Vec::new();

    if let Err(e) = restoration_on_declining_schedule() {
        problems.push(format!("declining schedule: {e}"));
    }

    let (corpora, cfg) = small_experiment();
    let preset = ExperimentPreset::parse("50-50").unwrap();
    let mut csvs = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let (mut asr, mut mt) = pretrain_reference(&corpora, &preset, &cfg.asr, &cfg.mt).unwrap();
        let r = run_cycles(
            &mut asr,
            &mut mt,
            &corpora.finetune,
            &corpora.dev,
            Some(&corpora.test),
            &cfg.loop_cfg,
            Some(dir.path()),
        )
        .unwrap();
        let max = r
            .iterations
            .iter()
            .map(|i| i.dev_score)
            .fold(r.initial_dev, f64::max);
        if r.final_dev != max {
            problems.push(format!("final dev {} but max {max}", r.final_dev));
        }
        let rescored = 100.0 * evaluate_cascade(&asr, &mt, &corpora.dev).unwrap().chrf;
        if (rescored - r.final_dev).abs() > 1e-9 {
            problems.push(format!(
                "restored backends score {rescored}, report says {}",
                r.final_dev
            ));
        }
        csvs.push(std::fs::read(dir.path().join("logs/iterations.csv")).unwrap());
    }
    if csvs[0] != csvs[1] {
        problems.push("iterations.csv differs between identical runs".into());
    }

    let (mut asr, mut mt) = pretrain_reference(&corpora, &preset, &cfg.asr, &cfg.mt).unwrap();
    let before = asr.snapshot().unwrap();
    let r = run_ablation_mt_only(
        &mut asr,
        &mut mt,
        &corpora.finetune,
        &corpora.dev,
        Some(&corpora.test),
        &cfg.loop_cfg,
        None,
    );
    if r.is_err() || asr.snapshot().unwrap() != before {
        problems.push("ablation changed the ASR snapshot".into());
    }

    let elapsed = t0.elapsed();
    let pass = problems.is_empty() && elapsed.as_secs_f64() < 300.0;
    report(
        6,
        "loop contracts",
        pass,
        &if problems.is_empty() {
            "best restored, ablation ASR untouched, iterations.csv reproducible".to_owned()
        } else {
            problems.join("; ")
        },
        elapsed,
    );
    assert!(pass, "{problems:?}");
}

// ---------------------------------------------------------------- criterion 7

fn pretrained_mt() -> ReferenceMt {
    let pairs = [
        ("ich wünschte", "i wish"),
        ("ich sprach von sibylle", "i spoke of sibyl"),
        ("ich habe gesprochen", "i have spoken"),
        ("sibylle", "sibyl"),
        ("zwiebel", "onion"),
        ("die zwiebel", "the onion"),
        ("ich sprach von der zwiebel", "i spoke of the onion"),
        ("die", "the"),
        ("der", "the"),
        ("ich", "i"),
        ("von", "of"),
        ("sprach", "spoke"),
        ("habe", "have"),
        ("wünschte", "wish"),
        ("gesprochen", "spoken"),
    ];
    ReferenceMt::pretrain(pairs.iter().copied(), MtConfig::default()).unwrap()
}

#[test]
fn criterion_7_corrupted_token_is_learned() {
    let _g = serial();
    let t0 = Instant::now();
    // "ziebel" is what the recognizer makes of "sibylle"; it never occurs in
    // MT training data or references, and its nearest known token is "zwiebel".
    let item = |id: &str, reference: &str, hyps: &[&str]| {
        (
            Utterance {
                id: id.into(),
                observation: format!("obs {id}"),
                gold_transcript: None,
                reference_translation: reference.into(),
            },
            hyps.iter().map(|h| h.to_string()).collect::<Vec<_>>(),
        )
    };
    let items = [
        item(
            "f1",
            "i spoke of sibyl",
            &["ich sprach von ziebel", "ich sprach von zwiebel"],
        ),
        item(
            "f2",
            "i wish i spoke of sibyl",
            &["ich wünschte ich sprach von ziebel"],
        ),
        item(
            "f3",
            "i have spoken of sibyl",
            &["ich habe gesprochen von ziebel"],
        ),
        item("d1", "i spoke of sibyl", &["ich sprach von ziebel"]),
        item(
            "d2",
            "i have spoken of sibyl",
            &["ich habe gesprochen von ziebel"],
        ),
    ];
    let mut asr = FixedAsr {
        lists: items.iter().map(|(u, h)| (u.id.clone(), h.clone())).collect(),
    };
    let data: Vec<Utterance> = items[..3].iter().map(|(u, _)| u.clone()).collect();
    let dev: Vec<Utterance> = items[3..].iter().map(|(u, _)| u.clone()).collect();

    let mut mt = pretrained_mt();
    let oov = mt.config().oov_policy;
    let before = mt_decode(&toks("ziebel"), mt.table(), oov).join();
    let cfg = LoopConfig {
        max_mt_iters: 1,
        ..Default::default()
    };
    let mut lp = FeedbackLoop::new(&mut asr, &mut mt, &data, &dev, None, cfg).unwrap();
    lp.adaptation_loop(Phase::MtAdapt).unwrap();
    drop(lp);
    let after = mt_decode(&toks("ziebel"), mt.table(), oov).join();
    let in_context = mt.translate("ich sprach von ziebel").unwrap();

    let elapsed = t0.elapsed();
    let pass = before != "sibyl"
        && after == "sibyl"
        && in_context == "i spoke of sibyl"
        && elapsed.as_secs_f64() < 10.0;
    report(
        7,
        "corrupted token",
        pass,
        &format!("\"ziebel\" -> {before:?} before, {after:?} after; in context {in_context:?}"),
        elapsed,
    );
    assert!(pass);
}
