//! Python bindings: metrics, the synthetic task, the reference backends and
//! the adaptation runs. Structured results come back as plain dicts/lists.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;
use serde::Serialize;

use ::cascade_feedback as cf;
use cf::backends::{AsrBackend, AsrConfig, MtBackend, MtConfig};
use cf::harness::{ExperimentConfig, ExperimentPreset, SyntheticTaskConfig, TaskCorpora};
use cf::metrics::ChrfParams;
use cf::text::{split_tokens, Utterance};

fn py_err(e: cf::Error) -> PyErr {
    match e.exit_code() {
        1 => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(json_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn parse_or_default<T: serde::de::DeserializeOwned + Default>(json: Option<&str>) -> PyResult<T> {
    match json {
        Some(s) => serde_json::from_str(s).map_err(json_err),
        None => Ok(T::default()),
    }
}

fn chrf_params(max_order: usize, beta: f64, strip_whitespace: bool) -> PyResult<ChrfParams> {
    let p = ChrfParams {
        max_ngram_order: max_order,
        beta,
        strip_whitespace,
    };
    p.validate().map_err(py_err)?;
    Ok(p)
}

#[pyfunction]
#[pyo3(signature = (hypothesis, reference, max_order = 6, beta = 2.0, strip_whitespace = true))]
fn sentence_chrf(
    hypothesis: &str,
    reference: &str,
    max_order: usize,
    beta: f64,
    strip_whitespace: bool,
) -> PyResult<f64> {
    Ok(cf::metrics::sentence_chrf(
        hypothesis,
        reference,
        &chrf_params(max_order, beta, strip_whitespace)?,
    ))
}

#[pyfunction]
fn corpus_chrf(hypotheses: Vec<String>, references: Vec<String>) -> PyResult<f64> {
    cf::metrics::corpus_chrf(&hypotheses, &references, &ChrfParams::default()).map_err(py_err)
}

#[pyfunction]
fn corpus_bleu(hypotheses: Vec<String>, references: Vec<String>) -> PyResult<f64> {
    let h: Vec<_> = hypotheses.iter().map(|s| split_tokens(s)).collect();
    let r: Vec<_> = references.iter().map(|s| split_tokens(s)).collect();
    cf::metrics::corpus_bleu(&h, &r).map_err(py_err)
}

#[pyfunction]
fn wer(hypothesis: &str, reference: &str) -> PyResult<f64> {
    cf::metrics::wer(&split_tokens(hypothesis), &split_tokens(reference)).map_err(py_err)
}

#[pyfunction]
fn corpus_wer(hypotheses: Vec<String>, references: Vec<String>) -> PyResult<f64> {
    let h: Vec<_> = hypotheses.iter().map(|s| split_tokens(s)).collect();
    let r: Vec<_> = references.iter().map(|s| split_tokens(s)).collect();
    cf::metrics::corpus_wer(&h, &r).map_err(py_err)
}

#[pyfunction]
fn normalize_source_text(raw: &str) -> String {
    cf::text::normalize_source_text(raw)
}

#[pyfunction]
fn tokenize(text: &str) -> Vec<String> {
    cf::text::tokenize(text).into_inner()
}

/// Generates the synthetic task into `out_dir` and returns its statistics.
#[pyfunction]
#[pyo3(signature = (out_dir, config_json = None))]
fn generate_task<'py>(
    py: Python<'py>,
    out_dir: PathBuf,
    config_json: Option<&str>,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg: SyntheticTaskConfig = parse_or_default(config_json)?;
    let task = cf::harness::generate_synthetic_task(&cfg).map_err(py_err)?;
    task.write(&out_dir).map_err(py_err)?;
    to_py(py, &task.stats())
}

#[pyclass(name = "ReferenceAsr", module = "cascade_feedback")]
struct PyReferenceAsr {
    inner: cf::backends::ReferenceAsr,
}

#[pymethods]
impl PyReferenceAsr {
    /// Trains on `(observation, transcript)` pairs.
    #[staticmethod]
    #[pyo3(signature = (pairs, config_json = None))]
    fn pretrain(pairs: Vec<(String, String)>, config_json: Option<&str>) -> PyResult<Self> {
        let cfg: AsrConfig = parse_or_default(config_json)?;
        let inner =
            cf::backends::ReferenceAsr::pretrain(pairs.iter().map(|(o, t)| (o.as_str(), t.as_str())), cfg)
                .map_err(py_err)?;
        Ok(PyReferenceAsr { inner })
    }

    #[staticmethod]
    fn from_snapshot(blob: &[u8]) -> PyResult<Self> {
        let inner = cf::backends::ReferenceAsr::from_snapshot(blob).map_err(py_err)?;
        Ok(PyReferenceAsr { inner })
    }

    #[getter]
    fn kind(&self) -> String {
        self.inner.kind().to_owned()
    }

    /// `[(text, score), ...]`, best first.
    #[pyo3(signature = (observation, k = 8))]
    fn transcribe_kbest(&self, observation: &str, k: usize) -> PyResult<Vec<(String, f64)>> {
        let u = Utterance {
            id: "utterance".into(),
            observation: observation.into(),
            gold_transcript: None,
            reference_translation: String::new(),
        };
        let list = self.inner.transcribe_kbest(&u, k).map_err(py_err)?;
        Ok(list
            .hypotheses
            .into_iter()
            .map(|h| (h.text, h.model_score))
            .collect())
    }

    fn snapshot<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyBytes>> {
        let blob = self.inner.snapshot().map_err(py_err)?;
        Ok(PyBytes::new(py, &blob))
    }

    fn restore(&mut self, blob: &[u8]) -> PyResult<()> {
        self.inner.restore(blob).map_err(py_err)
    }
}

#[pyclass(name = "ReferenceMt", module = "cascade_feedback")]
struct PyReferenceMt {
    inner: cf::backends::ReferenceMt,
}

#[pymethods]
impl PyReferenceMt {
    /// Trains on `(source, target)` sentence pairs.
    #[staticmethod]
    #[pyo3(signature = (pairs, config_json = None))]
    fn pretrain(pairs: Vec<(String, String)>, config_json: Option<&str>) -> PyResult<Self> {
        let cfg: MtConfig = parse_or_default(config_json)?;
        let inner =
            cf::backends::ReferenceMt::pretrain(pairs.iter().map(|(s, t)| (s.as_str(), t.as_str())), cfg)
                .map_err(py_err)?;
        Ok(PyReferenceMt { inner })
    }

    #[staticmethod]
    fn from_snapshot(blob: &[u8]) -> PyResult<Self> {
        let inner = cf::backends::ReferenceMt::from_snapshot(blob).map_err(py_err)?;
        Ok(PyReferenceMt { inner })
    }

    #[getter]
    fn kind(&self) -> String {
        self.inner.kind().to_owned()
    }

    fn translate(&self, source: &str) -> PyResult<String> {
        self.inner.translate(source).map_err(py_err)
    }

    fn snapshot<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyBytes>> {
        let blob = self.inner.snapshot().map_err(py_err)?;
        Ok(PyBytes::new(py, &blob))
    }

    fn restore(&mut self, blob: &[u8]) -> PyResult<()> {
        self.inner.restore(blob).map_err(py_err)
    }
}

/// Pre-trains both backends from a generated task directory.
#[pyfunction]
#[pyo3(signature = (corpora_dir, preset = "100-100", config_json = None))]
fn pretrain_reference(
    corpora_dir: PathBuf,
    preset: &str,
    config_json: Option<&str>,
) -> PyResult<(PyReferenceAsr, PyReferenceMt)> {
    let cfg: ExperimentConfig = parse_or_default(config_json)?;
    let corpora = TaskCorpora::read(&corpora_dir).map_err(py_err)?;
    let preset = ExperimentPreset::parse(preset).map_err(py_err)?;
    let (asr, mt) = cf::harness::pretrain_reference(&corpora, &preset, &cfg.asr, &cfg.mt).map_err(py_err)?;
    Ok((PyReferenceAsr { inner: asr }, PyReferenceMt { inner: mt }))
}

/// Scores the cascade on one split (`finetune`, `dev` or `test`).
#[pyfunction]
#[pyo3(signature = (asr, mt, corpora_dir, split = "test"))]
fn evaluate_cascade<'py>(
    py: Python<'py>,
    asr: &PyReferenceAsr,
    mt: &PyReferenceMt,
    corpora_dir: PathBuf,
    split: &str,
) -> PyResult<Bound<'py, PyAny>> {
    let corpora = TaskCorpora::read(&corpora_dir).map_err(py_err)?;
    let items = match split {
        "finetune" => &corpora.finetune,
        "dev" => &corpora.dev,
        "test" => &corpora.test,
        other => return Err(PyValueError::new_err(format!("unknown split {other:?}"))),
    };
    let report = cf::cycle::evaluate_cascade(&asr.inner, &mt.inner, items).map_err(py_err)?;
    to_py(py, &report)
}

/// Runs cyclic feedback (or the MT-only ablation) in place and returns the
/// run report.
#[pyfunction]
#[pyo3(signature = (asr, mt, corpora_dir, config_json = None, out_dir = None, mt_only = false))]
fn run_cycles<'py>(
    py: Python<'py>,
    asr: &mut PyReferenceAsr,
    mt: &mut PyReferenceMt,
    corpora_dir: PathBuf,
    config_json: Option<&str>,
    out_dir: Option<PathBuf>,
    mt_only: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg: ExperimentConfig = parse_or_default(config_json)?;
    let corpora = TaskCorpora::read(&corpora_dir).map_err(py_err)?;
    let run = if mt_only {
        cf::cycle::run_ablation_mt_only
    } else {
        cf::cycle::run_cycles
    };
    let report = run(
        &mut asr.inner,
        &mut mt.inner,
        &corpora.finetune,
        &corpora.dev,
        Some(&corpora.test),
        &cfg.loop_cfg,
        out_dir.as_deref(),
    )
    .map_err(py_err)?;
    to_py(py, &report)
}

/// Untuned / MT-only / full results for each preset, as `results_grid.csv` rows.
#[pyfunction]
#[pyo3(signature = (corpora_dir, presets, config_json = None, out_dir = None))]
fn run_grid<'py>(
    py: Python<'py>,
    corpora_dir: PathBuf,
    presets: Vec<String>,
    config_json: Option<&str>,
    out_dir: Option<PathBuf>,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg: ExperimentConfig = parse_or_default(config_json)?;
    let corpora = TaskCorpora::read(&corpora_dir).map_err(py_err)?;
    let presets = presets
        .iter()
        .map(|p| ExperimentPreset::parse(p))
        .collect::<cf::Result<Vec<_>>>()
        .map_err(py_err)?;
    let rows =
        cf::harness::run_experiment_grid(&corpora, &presets, &cfg, out_dir.as_deref()).map_err(py_err)?;
    to_py(py, &rows)
}

#[pymodule]
fn cascade_feedback(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyReferenceAsr>()?;
    m.add_class::<PyReferenceMt>()?;
    m.add_function(wrap_pyfunction!(sentence_chrf, m)?)?;
    m.add_function(wrap_pyfunction!(corpus_chrf, m)?)?;
    m.add_function(wrap_pyfunction!(corpus_bleu, m)?)?;
    m.add_function(wrap_pyfunction!(wer, m)?)?;
    m.add_function(wrap_pyfunction!(corpus_wer, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_source_text, m)?)?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(generate_task, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain_reference, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_cascade, m)?)?;
    m.add_function(wrap_pyfunction!(run_cycles, m)?)?;
    m.add_function(wrap_pyfunction!(run_grid, m)?)?;
    Ok(())
}
