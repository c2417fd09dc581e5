//! Frozen test mixtures, the α volume sweep and the remix ablation grid.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{compute_metrics_with, EvalError, ExperimentReport, ReportRow, SeparationMetrics, Setup};
use crate::audionet::{separate, MaskPredictor};
use crate::dsp::{self, ChunkSpec, Waveform, CHUNK_SAMPLES};
use crate::maskmath::{apply_mask, ideal_complex_mask};
use crate::mixer::{sample_mixture_for, CurriculumConfig, MixtureSpec, VoiceEntry, SILENCE_RMS};
use crate::training::DataPool;
use crate::visualnet::LandmarkSequence;

const TEST_SALT: u64 = 0x5445_5354_4d49_5853;

/// Anything that estimates the target voice of a materialized mixture.
pub trait Separator: Sync {
    fn separate(
        &self,
        mix: &Waveform,
        sources: &[Waveform],
        target: usize,
        landmarks: &LandmarkSequence,
    ) -> Result<Waveform, EvalError>;
}

/// A trained mask predictor run through the full separation pipeline.
pub struct ModelSeparator<'a, P: MaskPredictor + Sync + ?Sized>(pub &'a P);

impl<P: MaskPredictor + Sync + ?Sized> Separator for ModelSeparator<'_, P> {
    fn separate(&self, mix: &Waveform, _: &[Waveform], _: usize, landmarks: &LandmarkSequence) -> Result<Waveform, EvalError> {
        let lm = self.0.uses_visual().then_some(landmarks);
        Ok(separate(mix, lm, self.0)?)
    }
}

/// Applies the unbounded ideal mask of the true target at full resolution.
pub struct OracleSeparator;

impl Separator for OracleSeparator {
    fn separate(&self, mix: &Waveform, sources: &[Waveform], target: usize, _: &LandmarkSequence) -> Result<Waveform, EvalError> {
        let chunk = ChunkSpec::new(mix.len() / CHUNK_SAMPLES)?;
        let m = dsp::stft(mix, chunk)?;
        let s = dsp::stft(&sources[target], chunk)?;
        let est = apply_mask(&ideal_complex_mask(&s, &m)?, &m)?;
        Ok(dsp::istft(&est, chunk)?)
    }
}

/// Returns the mixture itself: the unprocessed baseline.
pub struct MixtureBaseline;

impl Separator for MixtureBaseline {
    fn separate(&self, mix: &Waveform, _: &[Waveform], _: usize, _: &LandmarkSequence) -> Result<Waveform, EvalError> {
        Ok(mix.clone())
    }
}

/// A frozen test mixture and its aggregation group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalItem {
    pub spec: MixtureSpec,
    pub group: String,
}

/// One mixture per voice chunk; the second voice (two-voice setup) and
/// the accompaniment are drawn from a seed that depends only on `seed` and
/// the chunk position.
pub fn frozen_test_items(
    pool: &DataPool,
    setup: Setup,
    seed: u64,
    group_of: impl Fn(&VoiceEntry) -> String,
) -> Result<Vec<EvalItem>, EvalError> {
    let remix = match setup {
        Setup::OneVoice => 0.0,
        Setup::TwoVoices => 1.0,
    };
    let curriculum = CurriculumConfig::new(remix).map_err(crate::training::TrainError::from)?;
    let voices = pool.voice_entries();
    voices
        .iter()
        .enumerate()
        .map(|(t, v)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ TEST_SALT ^ (t as u64).wrapping_mul(0x9E37_79B9));
            let spec = sample_mixture_for(&curriculum, t, &voices, pool.accomp_pool(), &mut rng)
                .map_err(crate::training::TrainError::from)?;
            Ok(EvalItem {
                spec,
                group: group_of(v),
            })
        })
        .collect()
}

/// Metrics of one item at volume `alpha`; `None` when a source is silent.
pub fn evaluate_item(
    pool: &DataPool,
    item: &EvalItem,
    alpha: f64,
    separator: &dyn Separator,
    filter_len: usize,
) -> Result<Option<SeparationMetrics>, EvalError> {
    let spec = MixtureSpec {
        alpha,
        ..item.spec.clone()
    };
    for id in &spec.voice_ids {
        if pool.voice(id)?.wave.rms() < SILENCE_RMS {
            return Ok(None);
        }
    }
    if let Some(a) = &spec.accompaniment_id {
        if pool.accompaniment(a)?.rms() < SILENCE_RMS {
            return Ok(None);
        }
    }
    let (sources, mix) = pool.mix_sources(&spec)?;
    let landmarks = &pool.voice(spec.target_id())?.landmarks;
    let est = separator.separate(&mix, &sources, spec.target_index, landmarks)?;
    let refs: Vec<&[f64]> = sources.iter().map(|s| s.samples.as_slice()).collect();
    Ok(Some(compute_metrics_with(&est.samples, &refs, spec.target_index, filter_len)?))
}

#[derive(Default)]
struct Acc {
    n: usize,
    sdr: f64,
    sir: f64,
}

/// Per-α means over `items`, per group and over everything (`all`).
#[allow(clippy::too_many_arguments)]
pub fn volume_sweep(
    separator: &dyn Separator,
    model_id: &str,
    pool: &DataPool,
    items: &[EvalItem],
    alphas: &[f64],
    setup: Setup,
    filter_len: usize,
) -> Result<ExperimentReport, EvalError> {
    if alphas.is_empty() {
        return Err(EvalError::Input("no alpha values".into()));
    }
    if let Some(bad) = items.iter().find(|i| i.spec.voice_ids.len() != setup.voices()) {
        return Err(EvalError::Input(format!(
            "item with {} voices in the {} setup",
            bad.spec.voice_ids.len(),
            setup.as_str()
        )));
    }
    let mut report = ExperimentReport::default();
    for &alpha in alphas {
        let results = items
            .par_iter()
            .map(|it| evaluate_item(pool, it, alpha, separator, filter_len))
            .collect::<Result<Vec<_>, _>>()?;
        let mut groups: BTreeMap<String, Acc> = BTreeMap::new();
        let mut all = Acc::default();
        for (it, m) in items.iter().zip(&results) {
            let Some(m) = m else {
                report.skipped += 1;
                continue;
            };
            for acc in [groups.entry(it.group.clone()).or_default(), &mut all] {
                acc.n += 1;
                acc.sdr += m.sdr;
                acc.sir += m.sir;
            }
        }
        let mut push = |group: &str, acc: &Acc| {
            if acc.n > 0 {
                report.rows.push(ReportRow {
                    model: model_id.into(),
                    setup,
                    alpha,
                    group: group.into(),
                    n: acc.n,
                    sdr_mean: acc.sdr / acc.n as f64,
                    sir_mean: acc.sir / acc.n as f64,
                });
            }
        };
        push("all", &all);
        for (g, acc) in &groups {
            if g != "all" {
                push(g, acc);
            }
        }
    }
    report.sort();
    Ok(report)
}

/// A separator with the remix percentage it was trained at.
pub struct TaggedModel<'a> {
    pub model_id: String,
    pub remix_pct: Option<f64>,
    pub separator: &'a dyn Separator,
}

/// One line of the ablation grid; absent setups are empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub remix_pct: f64,
    pub model: String,
    pub one_voice_sdr: Option<f64>,
    pub one_voice_sir: Option<f64>,
    pub two_voices_sdr: Option<f64>,
    pub two_voices_sir: Option<f64>,
    pub average_sdr: f64,
    pub average_sir: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    /// The underlying α = 1 aggregate rows.
    pub report: ExperimentReport,
}

impl AblationTable {
    pub fn to_csv(&self) -> Result<String, EvalError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).map_err(|e| EvalError::Report(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| EvalError::Report(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| EvalError::Report(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, EvalError> {
        serde_json::from_str(text).map_err(|e| EvalError::Report(e.to_string()))
    }
}

/// Remix % × setup × {SDR, SIR} at α = 1 with the across-setup average.
pub fn ablation_table(
    models: &[TaggedModel<'_>],
    items: &BTreeMap<Setup, Vec<EvalItem>>,
    pool: &DataPool,
    filter_len: usize,
) -> Result<AblationTable, EvalError> {
    if items.is_empty() {
        return Err(EvalError::Input("no setups to evaluate".into()));
    }
    let mut rows = Vec::new();
    let mut report = ExperimentReport::default();
    for m in models {
        let remix_pct = m.remix_pct.ok_or_else(|| EvalError::MissingTag(m.model_id.clone()))?;
        let mut row = AblationRow {
            remix_pct,
            model: m.model_id.clone(),
            one_voice_sdr: None,
            one_voice_sir: None,
            two_voices_sdr: None,
            two_voices_sir: None,
            average_sdr: 0.0,
            average_sir: 0.0,
        };
        let mut cells = Vec::new();
        for (&setup, its) in items {
            let r = volume_sweep(m.separator, &m.model_id, pool, its, &[1.0], setup, filter_len)?;
            let all = r
                .row(&m.model_id, setup, 1.0, "all")
                .ok_or_else(|| EvalError::Input(format!("no evaluable items in the {} setup", setup.as_str())))?;
            let (sdr, sir) = (all.sdr_mean, all.sir_mean);
            match setup {
                Setup::OneVoice => (row.one_voice_sdr, row.one_voice_sir) = (Some(sdr), Some(sir)),
                Setup::TwoVoices => (row.two_voices_sdr, row.two_voices_sir) = (Some(sdr), Some(sir)),
            }
            cells.push((sdr, sir));
            report.merge(r);
        }
        row.average_sdr = cells.iter().map(|c| c.0).sum::<f64>() / cells.len() as f64;
        row.average_sir = cells.iter().map(|c| c.1).sum::<f64>() / cells.len() as f64;
        rows.push(row);
    }
    rows.sort_by(|a, b| a.remix_pct.total_cmp(&b.remix_pct).then_with(|| a.model.cmp(&b.model)));
    Ok(AblationTable { rows, report })
}
