use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::task::{SyntheticTaskConfig, TaskCorpora};
use crate::backends::{AsrConfig, MtConfig, ReferenceAsr, ReferenceMt};
use crate::cycle::{csv_error, run_ablation_mt_only, run_cycles, LoopConfig, RunReport};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::text::Utterance;

/// Shares of the pre-training splits used to build the starting backends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPreset {
    pub name: String,
    pub asr_fraction: f64,
    pub mt_fraction: f64,
}

impl ExperimentPreset {
    pub fn new(name: impl Into<String>, asr_fraction: f64, mt_fraction: f64) -> Result<Self> {
        for f in [asr_fraction, mt_fraction] {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::input(format!("pre-training fraction {f} outside (0, 1]")));
            }
        }
        Ok(ExperimentPreset {
            name: name.into(),
            asr_fraction,
            mt_fraction,
        })
    }

    /// Parses names like `25-10`: ASR and MT percentages.
    pub fn parse(name: &str) -> Result<Self> {
        let bad = || Error::input(format!("preset {name:?} is not of the form <asr%>-<mt%>"));
        let (a, m) = name.split_once('-').ok_or_else(bad)?;
        let a: f64 = a.parse().map_err(|_| bad())?;
        let m: f64 = m.parse().map_err(|_| bad())?;
        Self::new(name, a / 100.0, m / 100.0)
    }

    pub fn default_grid() -> Vec<Self> {
        ["100-100", "25-25", "10-10"]
            .iter()
            .map(|n| Self::parse(n).expect("valid preset"))
            .collect()
    }
}

/// Everything an experiment needs besides the corpora.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: SyntheticTaskConfig,
    #[serde(rename = "loop")]
    pub loop_cfg: LoopConfig,
    pub asr: AsrConfig,
    pub mt: MtConfig,
}

impl ExperimentConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::input(format!("{}: {e}", path.display())))
    }
}

/// The leading `ceil(fraction * n)` items, at least one.
pub fn subsample(split: &[Utterance], fraction: f64) -> &[Utterance] {
    let n = ((fraction * split.len() as f64).ceil() as usize).clamp(1, split.len().max(1));
    &split[..n.min(split.len())]
}

/// Pre-trains both reference backends on the preset's share of the data.
pub fn pretrain_reference(
    corpora: &TaskCorpora,
    preset: &ExperimentPreset,
    asr: &AsrConfig,
    mt: &MtConfig,
) -> Result<(ReferenceAsr, ReferenceMt)> {
    let asr_split = subsample(&corpora.pretrain_asr, preset.asr_fraction);
    let mt_split = subsample(&corpora.pretrain_mt, preset.mt_fraction);
    if asr_split.is_empty() || mt_split.is_empty() {
        return Err(Error::input("pre-training splits are empty"));
    }
    let asr_pairs = asr_split
        .iter()
        .map(|u| {
            u.gold_transcript
                .as_deref()
                .map(|g| (u.observation.as_str(), g))
                .ok_or_else(|| Error::input(format!("{} has no gold transcript", u.id)))
        })
        .collect::<Result<Vec<_>>>()?;
    let mt_pairs: Vec<(&str, &str)> = mt_split
        .iter()
        .map(|u| {
            (
                u.gold_transcript.as_deref().unwrap_or(&u.observation),
                u.reference_translation.as_str(),
            )
        })
        .collect();
    Ok((
        ReferenceAsr::pretrain(asr_pairs.iter().copied(), asr.clone())?,
        ReferenceMt::pretrain(mt_pairs.iter().copied(), mt.clone())?,
    ))
}

/// The three systems compared per preset.
#[derive(Debug, Clone, PartialEq)]
pub struct PresetResult {
    pub preset: ExperimentPreset,
    pub untuned: MetricsReport,
    pub ablation: RunReport,
    pub full: RunReport,
}

/// Untuned cascade, MT-only ablation and full cyclic feedback for one preset.
pub fn run_preset(
    corpora: &TaskCorpora,
    preset: &ExperimentPreset,
    cfg: &ExperimentConfig,
    out: Option<&Path>,
) -> Result<PresetResult> {
    let (asr, mt) = pretrain_reference(corpora, preset, &cfg.asr, &cfg.mt)?;
    let dir = |name: &str| out.map(|o| o.join(&preset.name).join(name));

    let (mut a, mut m) = (asr.clone(), mt.clone());
    let ablation = run_ablation_mt_only(
        &mut a,
        &mut m,
        &corpora.finetune,
        &corpora.dev,
        Some(&corpora.test),
        &cfg.loop_cfg,
        dir("ablation").as_deref(),
    )?;
    let (mut a, mut m) = (asr, mt);
    let full = run_cycles(
        &mut a,
        &mut m,
        &corpora.finetune,
        &corpora.dev,
        Some(&corpora.test),
        &cfg.loop_cfg,
        dir("full").as_deref(),
    )?;
    let untuned = full.untuned_test.expect("test split was given");
    Ok(PresetResult {
        preset: preset.clone(),
        untuned,
        ablation,
        full,
    })
}

pub const GRID_CSV_HEADER: &str = "preset,asr_fraction,mt_fraction,system,seed,test_bleu,test_chrf,test_wer";

/// One line of `results_grid.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub preset: String,
    pub asr_fraction: f64,
    pub mt_fraction: f64,
    /// `untuned`, `mt_only` or `cyclic_feedback`
    pub system: String,
    pub seed: u64,
    pub test_bleu: f64,
    pub test_chrf: f64,
    pub test_wer: f64,
}

impl PresetResult {
    pub fn rows(&self, seed: u64) -> Vec<GridRow> {
        let row = |system: &str, m: &MetricsReport| GridRow {
            preset: self.preset.name.clone(),
            asr_fraction: self.preset.asr_fraction,
            mt_fraction: self.preset.mt_fraction,
            system: system.to_owned(),
            seed,
            test_bleu: m.bleu,
            test_chrf: m.chrf,
            test_wer: m.wer,
        };
        vec![
            row("untuned", &self.untuned),
            row(
                "mt_only",
                &self.ablation.final_test.expect("test split was given"),
            ),
            row(
                "cyclic_feedback",
                &self.full.final_test.expect("test split was given"),
            ),
        ]
    }
}

pub fn write_grid_csv(path: &Path, rows: &[GridRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    if rows.is_empty() {
        w.write_record(GRID_CSV_HEADER.split(',')).map_err(csv_error)?;
    }
    for r in rows {
        w.serialize(r).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// Runs every preset on the same corpora. Each preset starts from freshly
/// pre-trained backends, so the order of `presets` does not matter.
pub fn run_experiment_grid(
    corpora: &TaskCorpora,
    presets: &[ExperimentPreset],
    cfg: &ExperimentConfig,
    out: Option<&Path>,
) -> Result<Vec<GridRow>> {
    let mut rows = Vec::new();
    for preset in presets {
        log::info!("preset {}", preset.name);
        rows.extend(run_preset(corpora, preset, cfg, out)?.rows(cfg.loop_cfg.seed));
    }
    if let Some(out) = out {
        fs::create_dir_all(out)?;
        write_grid_csv(&out.join("results_grid.csv"), &rows)?;
    }
    Ok(rows)
}
