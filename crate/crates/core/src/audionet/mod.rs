//! Audio U-Net and its audio-visual Y-Net extension: complex-spectrogram
//! encoder–decoder with skip connections, FiLM conditioning on landmark
//! motion, and a tanh-bounded complex-mask head.

mod model;
mod net;

pub use model::{separate, ForwardTrace, MaskPredictor, Model, ModelManifest, MANIFEST_FILE};
pub use net::{film_from_visual, mask_from_tensor, spec_to_tensor, FilmMaps, ForwardOut, YNet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::DspError;
use crate::maskmath::MaskError;
use crate::numerics::NumericsError;
use crate::visualnet::VisualError;

/// Blocks that halve both frequency and time.
pub const SPATIAL_BLOCKS: usize = 4;
const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("model expects visual input: {0}")]
    Modality(String),
    #[error("model manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Visual(#[from] VisualError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// 4 (all spatial) or 6 (4 spatial + 2 frequential).
    pub num_blocks: usize,
    pub base_channels: usize,
    /// Width at the fusion point; always `8 · base_channels`.
    pub bottleneck_channels: usize,
    pub use_visual: bool,
    /// Fusion time steps per 4 s chunk.
    pub fusion_time_frames: usize,
}

impl ModelConfig {
    /// Y-Net-g (`use_visual`) or the audio-only U-Net at full width.
    pub fn full(num_blocks: usize, use_visual: bool) -> Self {
        Self::with_base(num_blocks, 32, use_visual)
    }

    pub fn with_base(num_blocks: usize, base_channels: usize, use_visual: bool) -> Self {
        Self {
            num_blocks,
            base_channels,
            bottleneck_channels: 8 * base_channels,
            use_visual,
            fusion_time_frames: 16,
        }
    }

    pub fn validate(&self) -> Result<(), AudioError> {
        if self.num_blocks != 4 && self.num_blocks != 6 {
            return Err(AudioError::Config(format!("num_blocks must be 4 or 6, got {}", self.num_blocks)));
        }
        if self.base_channels == 0 {
            return Err(AudioError::Config("base_channels must be positive".into()));
        }
        if self.bottleneck_channels != 8 * self.base_channels {
            return Err(AudioError::Config(format!(
                "bottleneck_channels {} must equal 8 × base_channels ({})",
                self.bottleneck_channels,
                8 * self.base_channels
            )));
        }
        if self.fusion_time_frames == 0 {
            return Err(AudioError::Config("fusion_time_frames must be positive".into()));
        }
        Ok(())
    }

    /// Output channels of encoder block `i`.
    pub fn block_channels(&self, i: usize) -> usize {
        self.base_channels << i.min(SPATIAL_BLOCKS - 1)
    }

    /// Encoder downsampling along (frequency, time) of block `i`.
    pub fn block_stride(&self, i: usize) -> (usize, usize) {
        if i < SPATIAL_BLOCKS {
            (2, 2)
        } else {
            (2, 1)
        }
    }

    /// Frequency and time reduction of the whole encoder.
    pub fn total_reduction(&self) -> (usize, usize) {
        (1 << self.num_blocks, 1 << SPATIAL_BLOCKS)
    }
}
