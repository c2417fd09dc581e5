//! Self-supervised mixture synthesis: averaging, the RMS/α volume protocol
//! and the two-lead-voice remix curriculum.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::Waveform;

/// Segments quieter than this are rejected before RMS normalization.
pub const SILENCE_RMS: f64 = 1e-4;
/// Volume factors of the evaluation sweep.
pub const EVAL_ALPHAS: [f64; 4] = [0.25, 0.5, 1.0, 1.25];

#[derive(Debug, Error, PartialEq)]
pub enum MixError {
    #[error("no sources to mix")]
    NoSources,
    #[error("source {index} has {actual} samples at {actual_rate} Hz, expected {expected} at {expected_rate} Hz")]
    Mismatch {
        index: usize,
        expected: usize,
        expected_rate: u32,
        actual: usize,
        actual_rate: u32,
    },
    #[error("source {0} is silent")]
    Silent(usize),
    #[error("voice index {index} out of range for {len} sources")]
    BadIndex { index: usize, len: usize },
    #[error("{0} pool is empty")]
    EmptyPool(&'static str),
    #[error("no second voice available for target {0} (all pool entries share its sample)")]
    NoSecondVoice(String),
    #[error("remix percentage {0} outside [0, 1]")]
    BadRemixPct(f64),
}

/// Replayable recipe for one mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub voice_ids: Vec<String>,
    pub accompaniment_id: Option<String>,
    pub alpha: f64,
    pub target_index: usize,
    pub seed: u64,
}

impl MixtureSpec {
    pub fn is_two_voice(&self) -> bool {
        self.voice_ids.len() == 2
    }

    pub fn target_id(&self) -> &str {
        &self.voice_ids[self.target_index]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurriculumConfig {
    remix_pct: f64,
}

impl CurriculumConfig {
    pub fn new(remix_pct: f64) -> Result<Self, MixError> {
        if !(0.0..=1.0).contains(&remix_pct) {
            return Err(MixError::BadRemixPct(remix_pct));
        }
        Ok(Self { remix_pct })
    }

    pub fn remix_pct(&self) -> f64 {
        self.remix_pct
    }
}

/// One lead-voice item; `sample_id` groups chunks cut from the same recording.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VoiceEntry {
    pub id: String,
    pub sample_id: String,
}

/// Accompaniment identifiers grouped by category.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AccompPool {
    pub categories: BTreeMap<String, Vec<String>>,
}

impl AccompPool {
    pub fn is_empty(&self) -> bool {
        self.categories.values().all(Vec::is_empty)
    }

    pub fn len(&self) -> usize {
        self.categories.values().map(Vec::len).sum()
    }
}

fn check_compatible(sources: &[Waveform]) -> Result<(), MixError> {
    let first = sources.first().ok_or(MixError::NoSources)?;
    for (index, s) in sources.iter().enumerate() {
        if s.len() != first.len() || s.sample_rate != first.sample_rate {
            return Err(MixError::Mismatch {
                index,
                expected: first.len(),
                expected_rate: first.sample_rate,
                actual: s.len(),
                actual_rate: s.sample_rate,
            });
        }
    }
    Ok(())
}

/// `s_m = (1/N) Σ sᵢ`; bounded in `[-1, 1]` whenever every source is.
pub fn average_mix(sources: &[Waveform]) -> Result<Waveform, MixError> {
    check_compatible(sources)?;
    let n = sources.len() as f64;
    let len = sources[0].len();
    let mut out = vec![0.0; len];
    for s in sources {
        for (o, x) in out.iter_mut().zip(&s.samples) {
            *o += x;
        }
    }
    for o in &mut out {
        *o /= n;
    }
    Ok(Waveform {
        samples: out,
        sample_rate: sources[0].sample_rate,
    })
}

/// RMS-normalize every source, scale the voice by `alpha`, then divide all
/// sources by the largest absolute sample among them.
pub fn volume_protocol(
    sources: &[Waveform],
    voice_index: usize,
    alpha: f64,
) -> Result<Vec<Waveform>, MixError> {
    check_compatible(sources)?;
    if voice_index >= sources.len() {
        return Err(MixError::BadIndex {
            index: voice_index,
            len: sources.len(),
        });
    }
    let mut out = Vec::with_capacity(sources.len());
    for (i, s) in sources.iter().enumerate() {
        let rms = s.rms();
        if rms <= 0.0 {
            return Err(MixError::Silent(i));
        }
        let gain = if i == voice_index { alpha / rms } else { 1.0 / rms };
        out.push(s.samples.iter().map(|x| x * gain).collect::<Vec<_>>());
    }
    let peak = out
        .iter()
        .flat_map(|s| s.iter())
        .fold(0.0f64, |m, x| m.max(x.abs()));
    Ok(out
        .into_iter()
        .map(|samples| Waveform {
            samples: if peak > 0.0 {
                samples.into_iter().map(|x| x / peak).collect()
            } else {
                samples
            },
            sample_rate: sources[0].sample_rate,
        })
        .collect())
}

/// Seeded permutation of `0..len` used as one epoch's target order.
pub fn epoch_order<R: Rng>(len: usize, rng: &mut R) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(rng);
    order
}

/// Draws a target uniformly from the pool, then completes the mixture as
/// [`sample_mixture_for`] does.
pub fn sample_mixture<R: Rng>(
    config: &CurriculumConfig,
    voice_pool: &[VoiceEntry],
    accomp_pool: &AccompPool,
    rng: &mut R,
) -> Result<MixtureSpec, MixError> {
    if voice_pool.is_empty() {
        return Err(MixError::EmptyPool("voice"));
    }
    let target = rng.gen_range(0..voice_pool.len());
    sample_mixture_for(config, target, voice_pool, accomp_pool, rng)
}

/// Builds the mixture for a fixed target: with probability `remix_pct` a
/// second voice from a different recording joins; the accompaniment is drawn
/// uniformly over categories, then uniformly within the category.
pub fn sample_mixture_for<R: Rng>(
    config: &CurriculumConfig,
    target: usize,
    voice_pool: &[VoiceEntry],
    accomp_pool: &AccompPool,
    rng: &mut R,
) -> Result<MixtureSpec, MixError> {
    if voice_pool.is_empty() {
        return Err(MixError::EmptyPool("voice"));
    }
    if accomp_pool.is_empty() {
        return Err(MixError::EmptyPool("accompaniment"));
    }
    let target_entry = voice_pool.get(target).ok_or(MixError::BadIndex {
        index: target,
        len: voice_pool.len(),
    })?;
    let mut voice_ids = vec![target_entry.id.clone()];

    if rng.gen::<f64>() < config.remix_pct {
        let candidates: Vec<&VoiceEntry> = voice_pool
            .iter()
            .filter(|v| v.sample_id != target_entry.sample_id)
            .collect();
        let second = candidates
            .choose(rng)
            .ok_or_else(|| MixError::NoSecondVoice(target_entry.id.clone()))?;
        voice_ids.push(second.id.clone());
    }

    let categories: Vec<&Vec<String>> = accomp_pool
        .categories
        .values()
        .filter(|v| !v.is_empty())
        .collect();
    let category = categories.choose(rng).expect("non-empty pool");
    let accompaniment = category.choose(rng).expect("non-empty category").clone();

    Ok(MixtureSpec {
        voice_ids,
        accompaniment_id: Some(accompaniment),
        alpha: 1.0,
        target_index: 0,
        seed: rng.gen(),
    })
}
