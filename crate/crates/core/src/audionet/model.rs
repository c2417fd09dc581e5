use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::net::{film_from_visual, mask_from_tensor, spec_to_tensor, YNet};
use super::{AudioError, ModelConfig};
use crate::dsp::{self, ChunkSpec, ComplexSpectrogram, Waveform, CHUNK_SAMPLES};
use crate::maskmath::{apply_mask, ComplexMask};
use crate::numerics::layers::Mode;
use crate::numerics::{checkpoint, Adam, Graph, ParamStore, Tensor};
use crate::visualnet::{
    build_face_graph, encode_motion, landmarks_to_tensor, normalize_landmarks, FaceGraph, LandmarkSequence,
    MotionFeatures,
};

pub const MANIFEST_FILE: &str = "model.json";
const MANIFEST_FORMAT: &str = "avss-model";
const MANIFEST_VERSION: u32 = 1;

/// Anything that turns a `Down256` mixture spectrogram (plus normalized
/// landmarks) into a bounded `Down256` mask.
pub trait MaskPredictor {
    fn predict_mask(
        &self,
        mix_down: &ComplexSpectrogram,
        landmarks: Option<&LandmarkSequence>,
    ) -> Result<ComplexMask, AudioError>;

    fn uses_visual(&self) -> bool;
}

/// Reload record written next to every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub seed: u64,
    pub graph_nodes: usize,
    pub graph_edges: Vec<(usize, usize)>,
    pub checkpoint: String,
    pub num_parameters: usize,
}

/// Network layout together with its `f32` parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub net: YNet,
    pub store: ParamStore<f32>,
    pub graph: FaceGraph,
    seed: u64,
}

impl Model {
    /// Freshly initialized model on the 68-point face graph.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, AudioError> {
        Self::with_graph(config, build_face_graph(), seed)
    }

    pub fn with_graph(config: ModelConfig, graph: FaceGraph, seed: u64) -> Result<Self, AudioError> {
        let mut store = ParamStore::new(seed);
        let net = YNet::new(&mut store, config)?;
        Ok(Self {
            net,
            store,
            graph,
            seed,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        self.net.config()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn manifest(&self, checkpoint_name: &str) -> ModelManifest {
        ModelManifest {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            config: self.config().clone(),
            seed: self.seed,
            graph_nodes: self.graph.n_nodes(),
            graph_edges: self.graph.edges().to_vec(),
            checkpoint: checkpoint_name.into(),
            num_parameters: self.store.num_trainable(),
        }
    }

    /// Writes the checkpoint and a `model.json` manifest in the same
    /// directory.
    pub fn save(&self, checkpoint_path: &Path, optimizer: Option<&Adam>) -> Result<(), AudioError> {
        checkpoint::save(checkpoint_path, &self.store, optimizer)?;
        let name = checkpoint_path
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| AudioError::Manifest(format!("bad checkpoint path {}", checkpoint_path.display())))?;
        let json = serde_json::to_string_pretty(&self.manifest(name)).expect("manifest serializes");
        let path = manifest_path(checkpoint_path);
        fs::write(&path, json + "\n").map_err(|e| AudioError::Manifest(format!("{}: {e}", path.display())))
    }

    /// Rebuilds the model described by the adjacent manifest and loads the
    /// checkpoint into it, checking every parameter name and shape.
    pub fn load(checkpoint_path: &Path) -> Result<(Self, Option<Adam>), AudioError> {
        let path = manifest_path(checkpoint_path);
        let text = fs::read_to_string(&path).map_err(|e| AudioError::Manifest(format!("{}: {e}", path.display())))?;
        let manifest: ModelManifest =
            serde_json::from_str(&text).map_err(|e| AudioError::Manifest(format!("{}: {e}", path.display())))?;
        if manifest.format != MANIFEST_FORMAT || manifest.version != MANIFEST_VERSION {
            return Err(AudioError::Manifest(format!(
                "{}: unsupported format {} v{}",
                path.display(),
                manifest.format,
                manifest.version
            )));
        }
        let graph = FaceGraph::from_edges(manifest.graph_nodes, &manifest.graph_edges)?;
        let mut model = Self::with_graph(manifest.config, graph, manifest.seed)?;
        let (loaded, optimizer) = checkpoint::load::<f32>(checkpoint_path)?;
        if loaded.len() != model.store.len() {
            return Err(AudioError::Manifest(format!(
                "checkpoint has {} entries, model expects {}",
                loaded.len(),
                model.store.len()
            )));
        }
        model.store.load_from(&loaded)?;
        Ok((model, optimizer))
    }

    /// Visual features of one normalized clip, `[C][1][16·n]`.
    pub fn encode_motion(&self, landmarks: &LandmarkSequence) -> Result<MotionFeatures, AudioError> {
        let venc = self
            .net
            .visual_encoder()
            .ok_or_else(|| AudioError::Modality("audio-only model has no visual encoder".into()))?;
        Ok(encode_motion(landmarks, &self.graph, venc, &self.store)?)
    }

    /// FiLM coefficients `(γ, β)`, each `[C, T]`.
    pub fn film_from_visual(&self, visual: &MotionFeatures) -> Result<(Tensor<f32>, Tensor<f32>), AudioError> {
        let maps = self
            .net
            .film_maps()
            .ok_or_else(|| AudioError::Modality("audio-only model has no FiLM maps".into()))?;
        let c = self.config().bottleneck_channels;
        let shape = visual.features.shape();
        if shape.len() != 3 || shape[0] != c || shape[1] != 1 {
            return Err(AudioError::Shape(format!("visual features {shape:?}, expected [{c}, 1, T]")));
        }
        let t = shape[2];
        let mut g = Graph::new();
        let p = self.store.bind_frozen(&mut g);
        let v = g.input(visual.features.clone().reshape(&[1, c, 1, t])?);
        let (gamma, beta) = film_from_visual(&mut g, maps, &p, v)?;
        Ok((
            g.value(gamma).clone().reshape(&[c, t])?,
            g.value(beta).clone().reshape(&[c, t])?,
        ))
    }

    /// Inference forward pass returning the mask with the per-sample shapes
    /// of the fusion-point audio features and the visual features.
    pub fn forward_trace(
        &self,
        mix_down: &ComplexSpectrogram,
        landmarks: Option<&LandmarkSequence>,
    ) -> Result<ForwardTrace, AudioError> {
        let mut g = Graph::new();
        let p = self.store.bind_frozen(&mut g);
        let s = g.input(spec_to_tensor(&[mix_down])?);
        let lm = match (landmarks, self.config().use_visual) {
            (Some(l), true) => {
                check_modalities(mix_down.n_time, l)?;
                Some((g.input(landmarks_to_tensor(&[l])?), &self.graph))
            }
            (None, false) => None,
            (Some(_), false) => return Err(AudioError::Modality("audio-only model got landmarks".into())),
            (None, true) => return Err(AudioError::Modality("landmarks are required".into())),
        };
        let out = self.net.forward(&mut g, &self.store, &p, s, lm, Mode::Eval)?;
        let per_sample = |v| g.value(v).shape()[1..].to_vec();
        Ok(ForwardTrace {
            mask: mask_from_tensor(g.value(out.mask), 0)?,
            fusion_shape: per_sample(out.fusion),
            visual_shape: out.visual.map(per_sample),
        })
    }
}

/// Inference output with intermediate shapes.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub mask: ComplexMask,
    pub fusion_shape: Vec<usize>,
    pub visual_shape: Option<Vec<usize>>,
}

fn manifest_path(checkpoint_path: &Path) -> PathBuf {
    checkpoint_path
        .parent()
        .map(|d| d.join(MANIFEST_FILE))
        .unwrap_or_else(|| PathBuf::from(MANIFEST_FILE))
}

fn check_modalities(n_time: usize, landmarks: &LandmarkSequence) -> Result<(), AudioError> {
    let n_audio = n_time / dsp::CHUNK_FRAMES;
    let n_video = landmarks.chunk_n()?;
    if n_audio != n_video || !n_time.is_multiple_of(dsp::CHUNK_FRAMES) {
        return Err(AudioError::Modality(format!(
            "audio spans {n_time} frames but landmarks span {} frames",
            landmarks.frames()
        )));
    }
    Ok(())
}

impl MaskPredictor for Model {
    fn predict_mask(
        &self,
        mix_down: &ComplexSpectrogram,
        landmarks: Option<&LandmarkSequence>,
    ) -> Result<ComplexMask, AudioError> {
        Ok(self.forward_trace(mix_down, landmarks)?.mask)
    }

    fn uses_visual(&self) -> bool {
        self.config().use_visual
    }
}

/// Full separation of one `4n`-second chunk in a single pass: STFT,
/// frequency downsampling, mask prediction, mask upsampling, complex
/// product with the full-resolution mixture, inverse STFT.
pub fn separate<P: MaskPredictor + ?Sized>(
    wave_mix: &Waveform,
    landmarks: Option<&LandmarkSequence>,
    predictor: &P,
) -> Result<Waveform, AudioError> {
    if !wave_mix.len().is_multiple_of(CHUNK_SAMPLES) || wave_mix.is_empty() {
        return Err(AudioError::Shape(format!(
            "waveform has {} samples, expected a positive multiple of {CHUNK_SAMPLES}",
            wave_mix.len()
        )));
    }
    let chunk = ChunkSpec::new(wave_mix.len() / CHUNK_SAMPLES)?;
    let normalized = match (landmarks, predictor.uses_visual()) {
        (Some(l), true) => {
            if l.chunk_n()? != chunk.n() {
                return Err(AudioError::Modality(format!(
                    "{} s of audio but {} landmark frames",
                    chunk.seconds(),
                    l.frames()
                )));
            }
            Some(normalize_landmarks(l)?)
        }
        (None, true) => return Err(AudioError::Modality("landmarks are required".into())),
        (_, false) => None,
    };
    let full = dsp::stft(wave_mix, chunk)?;
    let down = dsp::downsample_freq(&full)?;
    let mask = predictor.predict_mask(&down, normalized.as_ref())?;
    let mask = dsp::upsample_mask_freq(&mask)?;
    let est = apply_mask(&mask, &full)?;
    Ok(dsp::istft(&est, chunk)?)
}
