//! Self-supervised training: epoch construction over the voice pool,
//! mixture materialization, weighted mask loss with Adam updates, and
//! validation-driven checkpointing.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audionet::{spec_to_tensor, AudioError, Model};
use crate::datasetio::{
    build_accomp_index, build_chunk_index, load_accomp_chunk, load_chunk, Dataset, DatasetError, SampleRecord,
};
use crate::dsp::{self, ChunkSpec, ComplexSpectrogram, DspError, Waveform};
use crate::maskmath::{bound_mask, gradient_penalty, ideal_complex_mask, ComplexMask, MaskError, WeightMap};
use crate::mixer::{
    average_mix, epoch_order, sample_mixture_for, volume_protocol, AccompPool, CurriculumConfig, MixError,
    MixtureSpec, VoiceEntry,
};
use crate::numerics::layers::Mode;
use crate::numerics::{Adam, AdamConfig, BoundParams, Graph, NumericsError, Tensor, Var};
use crate::visualnet::{landmarks_to_tensor, normalize_landmarks, LandmarkSequence, VisualError};

pub const LOG_FILE: &str = "train_log.jsonl";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
/// Salt separating validation mixture seeds from the training stream.
const VALIDATION_SALT: u64 = 0x7641_4c49_4441_5445;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss at step {step}; offending mixtures: {specs}")]
    NonFiniteLoss { step: u64, specs: String },
    #[error("unknown {kind} id '{id}'")]
    UnknownId { kind: &'static str, id: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DatasetError),
    #[error(transparent)]
    Mix(#[from] MixError),
    #[error(transparent)]
    Model(#[from] AudioError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Visual(#[from] VisualError),
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub remix_pct: f64,
    pub seed: u64,
    pub alpha_training: f64,
    /// Stops training after this many optimizer steps.
    pub max_steps: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 4,
            max_epochs: 10,
            remix_pct: 0.5,
            seed: 0,
            alpha_training: 1.0,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..=1.0).contains(&self.remix_pct) {
            return bad(format!("remix_pct must lie in [0, 1], got {}", self.remix_pct));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.alpha_training > 0.0 && self.alpha_training.is_finite()) {
            return bad(format!("alpha_training must be positive, got {}", self.alpha_training));
        }
        Ok(())
    }
}

/// One voice chunk held in memory.
#[derive(Debug, Clone)]
pub struct VoiceClip {
    pub entry: VoiceEntry,
    pub wave: Waveform,
    pub landmarks: LandmarkSequence,
}

/// Eagerly loaded voice and accompaniment chunks of one split.
#[derive(Debug, Clone)]
pub struct DataPool {
    pub chunk: ChunkSpec,
    voices: Vec<VoiceClip>,
    voice_index: BTreeMap<String, usize>,
    accomps: BTreeMap<String, Waveform>,
    accomp_pool: AccompPool,
}

impl DataPool {
    /// `accomps` holds `(id, category, waveform)` triples.
    pub fn new(chunk: ChunkSpec, voices: Vec<VoiceClip>, accomps: Vec<(String, String, Waveform)>) -> Result<Self, TrainError> {
        let mut voice_index = BTreeMap::new();
        for (i, v) in voices.iter().enumerate() {
            if v.wave.len() != chunk.samples() || v.landmarks.frames() != chunk.video_frames() {
                return Err(TrainError::Config(format!(
                    "voice '{}' has {} samples / {} frames, expected {} / {}",
                    v.entry.id,
                    v.wave.len(),
                    v.landmarks.frames(),
                    chunk.samples(),
                    chunk.video_frames()
                )));
            }
            voice_index.insert(v.entry.id.clone(), i);
        }
        let mut pool = AccompPool::default();
        let mut map = BTreeMap::new();
        for (id, cat, wave) in accomps {
            if wave.len() != chunk.samples() {
                return Err(TrainError::Config(format!("accompaniment '{id}' has {} samples", wave.len())));
            }
            pool.categories.entry(cat).or_default().push(id.clone());
            map.insert(id, wave);
        }
        Ok(Self {
            chunk,
            voices,
            voice_index,
            accomps: map,
            accomp_pool: pool,
        })
    }

    /// Loads every chunk of `records` and the whole accompaniment pool.
    pub fn load(dataset: &Dataset, records: &[&SampleRecord], n: usize) -> Result<Self, TrainError> {
        let owned: Vec<SampleRecord> = records.iter().map(|r| (*r).clone()).collect();
        let index = build_chunk_index(&owned, &dataset.root, n)?;
        let mut voices = Vec::with_capacity(index.len());
        for e in &index.entries {
            let (wave, landmarks) = load_chunk(e, n)?;
            voices.push(VoiceClip {
                entry: VoiceEntry {
                    id: e.chunk_id.clone(),
                    sample_id: e.sample_id.clone(),
                },
                wave,
                landmarks,
            });
        }
        let mut accomps = Vec::new();
        for c in build_accomp_index(&dataset.accompaniments, &dataset.root, n)? {
            accomps.push((c.id.clone(), c.category.clone(), load_accomp_chunk(&c, n)?));
        }
        Self::new(ChunkSpec::new(n)?, voices, accomps)
    }

    pub fn voices(&self) -> &[VoiceClip] {
        &self.voices
    }

    pub fn voice_entries(&self) -> Vec<VoiceEntry> {
        self.voices.iter().map(|v| v.entry.clone()).collect()
    }

    pub fn accomp_pool(&self) -> &AccompPool {
        &self.accomp_pool
    }

    pub fn voice(&self, id: &str) -> Result<&VoiceClip, TrainError> {
        self.voice_index
            .get(id)
            .map(|&i| &self.voices[i])
            .ok_or_else(|| TrainError::UnknownId {
                kind: "voice",
                id: id.into(),
            })
    }

    pub fn accompaniment(&self, id: &str) -> Result<&Waveform, TrainError> {
        self.accomps.get(id).ok_or_else(|| TrainError::UnknownId {
            kind: "accompaniment",
            id: id.into(),
        })
    }

    /// Sources of `spec` after the volume protocol (voices first, then the
    /// accompaniment) and their average.
    pub fn mix_sources(&self, spec: &MixtureSpec) -> Result<(Vec<Waveform>, Waveform), TrainError> {
        let mut raw = Vec::with_capacity(spec.voice_ids.len() + 1);
        for id in &spec.voice_ids {
            raw.push(self.voice(id)?.wave.clone());
        }
        if let Some(a) = &spec.accompaniment_id {
            raw.push(self.accompaniment(a)?.clone());
        }
        let sources = volume_protocol(&raw, spec.target_index, spec.alpha)?;
        let mix = average_mix(&sources)?;
        Ok((sources, mix))
    }

    pub fn materialize(&self, spec: &MixtureSpec) -> Result<Example, TrainError> {
        let (sources, mix) = self.mix_sources(spec)?;
        let target = &sources[spec.target_index];
        let mix_down = dsp::downsample_freq(&dsp::stft(&mix, self.chunk)?)?;
        let target_down = dsp::downsample_freq(&dsp::stft(target, self.chunk)?)?;
        let target_mask = bound_mask(&ideal_complex_mask(&target_down, &mix_down)?)?;
        let weights = gradient_penalty(&mix_down);
        let landmarks = normalize_landmarks(&self.voice(spec.target_id())?.landmarks)?;
        Ok(Example {
            spec: spec.clone(),
            mix_down,
            target_mask,
            weights,
            landmarks,
        })
    }
}

/// A training pair ready for the network.
#[derive(Debug, Clone)]
pub struct Example {
    pub spec: MixtureSpec,
    pub mix_down: ComplexSpectrogram,
    /// Bounded ideal mask of the target voice.
    pub target_mask: ComplexMask,
    pub weights: WeightMap,
    /// Normalized landmarks of the target singer.
    pub landmarks: LandmarkSequence,
}

/// Stacks masks into `[N, 2, F, T]` and weights into `[N, 1, F, T]`.
pub fn loss_targets(batch: &[&Example]) -> Result<(Tensor<f32>, Tensor<f32>), TrainError> {
    let (f, t) = batch
        .first()
        .map(|e| e.target_mask.shape())
        .ok_or_else(|| TrainError::Config("empty batch".into()))?;
    let n = batch.len();
    let mut m = Vec::with_capacity(n * 2 * f * t);
    let mut w = Vec::with_capacity(n * f * t);
    for e in batch {
        m.extend(e.target_mask.real.iter().map(|&v| v as f32));
        m.extend(e.target_mask.imag.iter().map(|&v| v as f32));
        w.extend(e.weights.g.iter().map(|&v| v as f32));
    }
    Ok((Tensor::from_vec(&[n, 2, f, t], m)?, Tensor::from_vec(&[n, 1, f, t], w)?))
}

/// Records the forward pass and loss for `batch`.
fn forward_loss(model: &Model, g: &mut Graph<f32>, batch: &[&Example], mode: Mode) -> Result<(Var, BoundParams), TrainError> {
    let p = match mode {
        Mode::Train => model.store.bind(g),
        Mode::Eval => model.store.bind_frozen(g),
    };
    let specs: Vec<&ComplexSpectrogram> = batch.iter().map(|e| &e.mix_down).collect();
    let s = g.input(spec_to_tensor(&specs)?);
    let lm = if model.config().use_visual {
        let seqs: Vec<&LandmarkSequence> = batch.iter().map(|e| &e.landmarks).collect();
        Some((g.input(landmarks_to_tensor(&seqs)?), &model.graph))
    } else {
        None
    };
    let out = model.net.forward(g, &model.store, &p, s, lm, mode)?;
    let (target, weights) = loss_targets(batch)?;
    Ok((g.mask_loss(out.mask, target, weights)?, p))
}

fn specs_json(batch: &[&Example]) -> String {
    let specs: Vec<&MixtureSpec> = batch.iter().map(|e| &e.spec).collect();
    serde_json::to_string(&specs).unwrap_or_default()
}

/// Forward, loss, backward and one Adam update; returns the pre-step loss.
pub fn train_step(model: &mut Model, optimizer: &mut Adam, batch: &[&Example], step: u64) -> Result<f64, TrainError> {
    let mut g = Graph::new();
    let (loss_var, p) = forward_loss(model, &mut g, batch, Mode::Train)?;
    let loss = g.value(loss_var).data()[0] as f64;
    if !loss.is_finite() {
        return Err(TrainError::NonFiniteLoss {
            step,
            specs: specs_json(batch),
        });
    }
    let mut grads = g.backward(loss_var)?;
    let grads = model.store.collect_grads(&p, &mut grads);
    optimizer.step(&mut model.store, &grads)?;
    model.store.apply_bn_updates(&g);
    Ok(loss)
}

/// Mean loss of `examples` in inference mode, evaluated in batches.
pub fn evaluate_loss(model: &Model, examples: &[Example], batch_size: usize) -> Result<f64, TrainError> {
    if examples.is_empty() {
        return Err(TrainError::Config("validation set is empty".into()));
    }
    let mut total = 0.0;
    for chunk in examples.chunks(batch_size.max(1)) {
        let refs: Vec<&Example> = chunk.iter().collect();
        let mut g = Graph::new();
        let (l, _) = forward_loss(model, &mut g, &refs, Mode::Eval)?;
        total += g.value(l).data()[0] as f64 * chunk.len() as f64;
    }
    Ok(total / examples.len() as f64)
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub remix_flag_count: usize,
}

/// Mutable training progress.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub epoch: usize,
    pub step: u64,
    pub best_val_loss: f64,
    pub rng: ChaCha8Rng,
    pub optimizer: Adam,
    /// `(step, val_loss)` of every saved checkpoint.
    pub saved: Vec<(u64, f64)>,
}

impl TrainState {
    pub fn new(model: &Model, config: &TrainConfig) -> Self {
        Self {
            epoch: 0,
            step: 0,
            best_val_loss: f64::INFINITY,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            optimizer: Adam::new(AdamConfig::with_lr(config.learning_rate), &model.store),
            saved: Vec::new(),
        }
    }

    fn budget_left(&self, config: &TrainConfig) -> bool {
        config.max_steps.is_none_or(|m| self.step < m)
    }
}

/// Mixture specs of one epoch: every voice is the target exactly once, in
/// shuffled order.
pub fn plan_epoch(
    voices: &[VoiceEntry],
    accomp: &AccompPool,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<MixtureSpec>, TrainError> {
    let curriculum = CurriculumConfig::new(config.remix_pct)?;
    if voices.is_empty() {
        return Err(MixError::EmptyPool("voice").into());
    }
    epoch_order(voices.len(), rng)
        .into_iter()
        .map(|t| {
            let mut spec = sample_mixture_for(&curriculum, t, voices, accomp, rng)?;
            spec.alpha = config.alpha_training;
            Ok(spec)
        })
        .collect()
}

/// Trains over one planned epoch; `log` receives every step record.
pub fn run_epoch(
    pool: &DataPool,
    model: &mut Model,
    config: &TrainConfig,
    state: &mut TrainState,
    log: &mut dyn FnMut(&StepRecord) -> Result<(), TrainError>,
) -> Result<(), TrainError> {
    config.validate()?;
    let specs = plan_epoch(&pool.voice_entries(), pool.accomp_pool(), config, &mut state.rng)?;
    for batch_specs in specs.chunks(config.batch_size) {
        if !state.budget_left(config) {
            break;
        }
        let examples = batch_specs
            .iter()
            .map(|s| pool.materialize(s))
            .collect::<Result<Vec<_>, _>>()?;
        let refs: Vec<&Example> = examples.iter().collect();
        let loss = train_step(model, &mut state.optimizer, &refs, state.step)?;
        state.step += 1;
        log(&StepRecord {
            step: state.step,
            epoch: state.epoch,
            loss,
            lr: config.learning_rate,
            remix_flag_count: batch_specs.iter().filter(|s| s.is_two_voice()).count(),
        })?;
    }
    state.epoch += 1;
    Ok(())
}

/// Validation mixtures with seeds fixed by `seed` alone, independent of the
/// training stream.
pub fn frozen_validation_specs(pool: &DataPool, config: &TrainConfig) -> Result<Vec<MixtureSpec>, TrainError> {
    let curriculum = CurriculumConfig::new(config.remix_pct)?;
    let voices = pool.voice_entries();
    (0..voices.len())
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ VALIDATION_SALT ^ t as u64);
            let mut spec = sample_mixture_for(&curriculum, t, &voices, pool.accomp_pool(), &mut rng)?;
            spec.alpha = config.alpha_training;
            Ok(spec)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidationOutcome {
    pub loss: f64,
    pub saved: bool,
}

/// Saves `model` to `checkpoint` iff the validation loss beats the best so
/// far.
pub fn validate_and_checkpoint(
    model: &Model,
    val: &[Example],
    state: &mut TrainState,
    batch_size: usize,
    checkpoint: &Path,
) -> Result<ValidationOutcome, TrainError> {
    let loss = evaluate_loss(model, val, batch_size)?;
    let saved = loss < state.best_val_loss;
    if saved {
        model.save(checkpoint, Some(&state.optimizer)).map_err(|e| match e {
            AudioError::Io(source) => TrainError::Io {
                path: checkpoint.to_path_buf(),
                source,
            },
            other => other.into(),
        })?;
        state.best_val_loss = loss;
        state.saved.push((state.step, loss));
    }
    Ok(ValidationOutcome { loss, saved })
}

/// JSON-lines sink for step records.
pub struct TrainLog {
    path: PathBuf,
    out: BufWriter<File>,
}

impl TrainLog {
    pub fn create(path: &Path) -> Result<Self, TrainError> {
        let f = File::create(path).map_err(io_err(path))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(f),
        })
    }

    pub fn write(&mut self, rec: &StepRecord) -> Result<(), TrainError> {
        let line = serde_json::to_string(rec).expect("record serializes");
        writeln!(self.out, "{line}").map_err(io_err(&self.path))
    }

    pub fn flush(&mut self) -> Result<(), TrainError> {
        self.out.flush().map_err(io_err(&self.path))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub epochs: usize,
    pub best_val_loss: f64,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    /// `(step, val_loss)` of every saved checkpoint.
    pub saved: Vec<(u64, f64)>,
}

/// Full run: epochs over `train`, validation after each epoch, log and best
/// checkpoint under `out_dir`.
pub fn train(
    model: &mut Model,
    train: &DataPool,
    val: &DataPool,
    config: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainSummary, TrainError> {
    config.validate()?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let val_examples = frozen_validation_specs(val, config)?
        .iter()
        .map(|s| val.materialize(s))
        .collect::<Result<Vec<_>, _>>()?;
    let log_path = out_dir.join(LOG_FILE);
    let ckpt = out_dir.join(BEST_CHECKPOINT);
    let mut log = TrainLog::create(&log_path)?;
    let mut state = TrainState::new(model, config);
    while state.epoch < config.max_epochs && state.budget_left(config) {
        run_epoch(train, model, config, &mut state, &mut |r| log.write(r))?;
        validate_and_checkpoint(model, &val_examples, &mut state, config.batch_size, &ckpt)?;
    }
    log.flush()?;
    Ok(TrainSummary {
        steps: state.step,
        epochs: state.epoch,
        best_val_loss: state.best_val_loss,
        checkpoint: ckpt,
        log: log_path,
        saved: state.saved,
    })
}

/// Repeats a fixed example set in order for `steps` updates, cycling
/// batches; returns the per-step losses.
pub fn overfit(model: &mut Model, optimizer: &mut Adam, examples: &[Example], batch_size: usize, steps: u64) -> Result<Vec<f64>, TrainError> {
    if examples.is_empty() || batch_size == 0 {
        return Err(TrainError::Config("overfit needs examples and a positive batch size".into()));
    }
    let mut losses = Vec::with_capacity(steps as usize);
    let batches: Vec<Vec<&Example>> = examples.chunks(batch_size).map(|c| c.iter().collect()).collect();
    for step in 0..steps {
        let b = &batches[step as usize % batches.len()];
        losses.push(train_step(model, optimizer, b, step)?);
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audionet::ModelConfig;
    use crate::dsp::SAMPLE_RATE;
    use crate::visualnet::NUM_LANDMARKS;
    use rand::Rng;

    fn voice_entries(n: usize) -> Vec<VoiceEntry> {
        (0..n)
            .map(|i| VoiceEntry {
                id: format!("v{i}"),
                sample_id: format!("s{i}"),
            })
            .collect()
    }

    fn accomp_pool() -> AccompPool {
        let mut p = AccompPool::default();
        p.categories.insert("drum".into(), vec!["a0".into(), "a1".into()]);
        p.categories.insert("choir".into(), vec!["a2".into()]);
        p
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { learning_rate: 0.0, ..Default::default() },
            TrainConfig { remix_pct: 1.5, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn epoch_covers_every_target_once() {
        let voices = voice_entries(10);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let specs = plan_epoch(&voices, &accomp_pool(), &TrainConfig::default(), &mut rng).unwrap();
        let mut targets: Vec<&str> = specs.iter().map(|s| s.target_id()).collect();
        assert_ne!(targets, voices.iter().map(|v| v.id.as_str()).collect::<Vec<_>>());
        targets.sort();
        let mut expect: Vec<&str> = voices.iter().map(|v| v.id.as_str()).collect();
        expect.sort();
        assert_eq!(targets, expect);
    }

    #[test]
    fn remix_fraction_within_three_sigma() {
        let voices = voice_entries(1000);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = TrainConfig { remix_pct: 0.5, ..Default::default() };
        let specs = plan_epoch(&voices, &accomp_pool(), &cfg, &mut rng).unwrap();
        let two = specs.iter().filter(|s| s.is_two_voice()).count();
        // Binomial(1000, 0.5): σ ≈ 15.8.
        assert!((440..=560).contains(&two), "{two}");
    }

    #[test]
    fn epoch_plans_are_seeded() {
        let voices = voice_entries(12);
        let plan = |seed| plan_epoch(&voices, &accomp_pool(), &TrainConfig::default(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        assert_eq!(plan(5), plan(5));
        assert_ne!(plan(5), plan(6));
    }

    #[test]
    fn oracle_prediction_has_zero_loss_and_gradient() {
        let (n, f, t) = (2, 4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let target: Vec<f32> = (0..n * 2 * f * t).map(|_| rng.gen_range(-0.9..0.9)).collect();
        let weights: Vec<f32> = (0..n * f * t).map(|_| rng.gen_range(0.001..10.0)).collect();
        let target = Tensor::from_vec(&[n, 2, f, t], target).unwrap();
        let mut g = Graph::<f32>::new();
        let pred = g.leaf(target.clone());
        let loss = g.mask_loss(pred, target, Tensor::from_vec(&[n, 1, f, t], weights).unwrap()).unwrap();
        assert_eq!(g.value(loss).data()[0], 0.0);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(pred).unwrap().data().iter().all(|&v| v == 0.0));
    }

    fn tiny_pool(seed: u64) -> DataPool {
        let chunk = ChunkSpec::new(1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tone = |f0: f64, rng: &mut ChaCha8Rng| {
            let phase: f64 = rng.gen_range(0.0..6.0);
            let s = (0..chunk.samples())
                .map(|i| 0.3 * (2.0 * std::f64::consts::PI * f0 * i as f64 / SAMPLE_RATE as f64 + phase).sin())
                .collect();
            Waveform::new(s, SAMPLE_RATE).unwrap()
        };
        let voices = (0..3)
            .map(|i| VoiceClip {
                entry: VoiceEntry {
                    id: format!("v{i}"),
                    sample_id: format!("s{i}"),
                },
                wave: tone(200.0 + 90.0 * i as f64, &mut rng),
                landmarks: LandmarkSequence::new(
                    100,
                    (0..100 * NUM_LANDMARKS * 2).map(|_| rng.gen_range(0.0..100.0)).collect(),
                )
                .unwrap(),
            })
            .collect();
        let accomps = vec![("a0".to_string(), "drum".to_string(), tone(1500.0, &mut rng))];
        DataPool::new(chunk, voices, accomps).unwrap()
    }

    #[test]
    fn materialized_example_is_consistent() {
        let pool = tiny_pool(0);
        let spec = MixtureSpec {
            voice_ids: vec!["v0".into(), "v1".into()],
            accompaniment_id: Some("a0".into()),
            alpha: 1.0,
            target_index: 0,
            seed: 0,
        };
        let ex = pool.materialize(&spec).unwrap();
        assert_eq!(ex.mix_down.shape(), (256, 256));
        assert!(ex.target_mask.bounded);
        assert!(ex.landmarks.is_normalized(1e-9));
        let (sources, mix) = pool.mix_sources(&spec).unwrap();
        assert_eq!(sources.len(), 3);
        let rms: Vec<f64> = sources.iter().map(Waveform::rms).collect();
        assert!((rms[0] / rms[1] - 1.0).abs() < 1e-12);
        assert!(mix.peak() <= 1.0);
        let bad = MixtureSpec { voice_ids: vec!["zz".into()], ..spec };
        assert!(matches!(pool.materialize(&bad), Err(TrainError::UnknownId { .. })));
    }

    fn tiny_model() -> Model {
        Model::new(ModelConfig::with_base(4, 1, true), 4).unwrap()
    }

    #[test]
    fn training_is_deterministic_and_checkpoints_monotone() {
        let pool = tiny_pool(1);
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            batch_size: 2,
            max_epochs: 3,
            remix_pct: 0.5,
            seed: 11,
            ..Default::default()
        };
        let run = |dir: &Path| {
            let mut model = tiny_model();
            let summary = train(&mut model, &pool, &pool, &cfg, dir).unwrap();
            (summary, fs::read(dir.join(LOG_FILE)).unwrap(), fs::read(dir.join(BEST_CHECKPOINT)).unwrap())
        };
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let (sa, la, ca) = run(a.path());
        let (sb, lb, cb) = run(b.path());
        assert_eq!((la.clone(), ca), (lb, cb));
        assert_eq!(sa.saved, sb.saved);
        assert_eq!(sa.steps, 6);
        assert!(!sa.saved.is_empty());
        assert!(sa.saved.windows(2).all(|w| w[1].1 < w[0].1));
        let text = String::from_utf8(la).unwrap();
        let first: StepRecord = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!((first.step, first.epoch, first.lr), (1, 0, 1e-3));
    }

    #[test]
    fn checkpoint_only_on_improvement_and_reload_reproduces_loss() {
        let pool = tiny_pool(2);
        let cfg = TrainConfig { seed: 1, ..Default::default() };
        let val: Vec<Example> = frozen_validation_specs(&pool, &cfg)
            .unwrap()
            .iter()
            .map(|s| pool.materialize(s).unwrap())
            .collect();
        let model = tiny_model();
        let mut state = TrainState::new(&model, &cfg);
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("best.ckpt");
        let first = validate_and_checkpoint(&model, &val, &mut state, 2, &ckpt).unwrap();
        assert!(first.saved);
        let stamp = fs::read(&ckpt).unwrap();
        fs::remove_file(&ckpt).unwrap();
        state.best_val_loss = first.loss * 0.5;
        let second = validate_and_checkpoint(&model, &val, &mut state, 2, &ckpt).unwrap();
        assert!(!second.saved);
        assert!(!ckpt.exists());
        fs::write(&ckpt, stamp).unwrap();
        let (reloaded, opt) = Model::load(&ckpt).unwrap();
        assert!(opt.is_some());
        let again = evaluate_loss(&reloaded, &val, 2).unwrap();
        assert!((again - first.loss).abs() <= 1e-6 * first.loss.abs().max(1.0));
    }

    #[test]
    fn validation_specs_ignore_training_state() {
        let pool = tiny_pool(3);
        let cfg = TrainConfig { seed: 4, ..Default::default() };
        let a = frozen_validation_specs(&pool, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let _ = plan_epoch(&pool.voice_entries(), pool.accomp_pool(), &cfg, &mut rng).unwrap();
        assert_eq!(a, frozen_validation_specs(&pool, &cfg).unwrap());
    }

    #[test]
    fn non_finite_loss_reports_specs() {
        let pool = tiny_pool(4);
        let spec = MixtureSpec {
            voice_ids: vec!["v0".into()],
            accompaniment_id: Some("a0".into()),
            alpha: 1.0,
            target_index: 0,
            seed: 77,
        };
        let mut ex = pool.materialize(&spec).unwrap();
        ex.weights.g[0] = f64::NAN;
        let mut model = tiny_model();
        let mut opt = Adam::new(AdamConfig::with_lr(1e-3), &model.store);
        let before = model.store.clone();
        let err = train_step(&mut model, &mut opt, &[&ex], 5).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("step 5") && msg.contains("\"seed\":77"), "{msg}");
        assert_eq!(opt.step, 0);
        assert_eq!(model.store.entries()[0].tensor, before.entries()[0].tensor);
    }
}
