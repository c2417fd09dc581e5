//! Time–frequency front end.
//!
//! Audio is handled as mono `f64` waveforms at [`SAMPLE_RATE`]. A chunk of
//! `4·n` seconds holds `65536·n` samples and maps to a `512 × 256·n` complex
//! spectrogram (Hann window 1022, hop 256, no centering). The network works
//! on a frequency-decimated `256 × 256·n` version of that grid.

mod resample;
mod stft;
pub mod wav;

pub use resample::resample;
pub use stft::{istft, stft, StftPlan};
pub use wav::{read_wav, wav_info, write_wav, WavEncoding};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::maskmath::ComplexMask;

/// Sample rate of prepared audio, in Hz.
pub const SAMPLE_RATE: u32 = 16384;
/// Analysis window length in samples.
pub const WINDOW_LEN: usize = 1022;
/// Hop between consecutive frames in samples.
pub const HOP_LEN: usize = 256;
/// Frequency bins of the full-resolution spectrogram (`WINDOW_LEN / 2 + 1`).
pub const FULL_BINS: usize = WINDOW_LEN / 2 + 1;
/// Frequency bins after decimation.
pub const DOWN_BINS: usize = FULL_BINS / 2;
/// Samples in one 4 s chunk.
pub const CHUNK_SAMPLES: usize = 65536;
/// STFT frames in one 4 s chunk.
pub const CHUNK_FRAMES: usize = CHUNK_SAMPLES / HOP_LEN;
/// Video frame rate of landmark sequences.
pub const VIDEO_FPS: u32 = 25;
/// Video frames in one 4 s chunk.
pub const CHUNK_VIDEO_FRAMES: usize = 100;
/// Duration of one chunk unit in seconds.
pub const CHUNK_SECONDS: f64 = 4.0;

#[derive(Debug, Error, PartialEq)]
pub enum DspError {
    #[error("empty waveform")]
    Empty,
    #[error("non-finite sample at index {0}")]
    NonFinite(usize),
    #[error("invalid sample rate {0}")]
    InvalidRate(u32),
    #[error("expected {expected} samples at {expected_rate} Hz, got {actual} samples at {actual_rate} Hz")]
    WrongLength {
        expected: usize,
        expected_rate: u32,
        actual: usize,
        actual_rate: u32,
    },
    #[error("expected resolution {expected:?}, got {actual:?}")]
    WrongResolution {
        expected: Resolution,
        actual: Resolution,
    },
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("chunk multiplier must be positive")]
    ZeroChunk,
    #[error("wav: {0}")]
    Wav(String),
}

/// Mono time-domain signal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self, DspError> {
        if sample_rate == 0 {
            return Err(DspError::InvalidRate(sample_rate));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(DspError::NonFinite(i));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Self {
        Self {
            samples: vec![0.0; len],
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        (self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len() as f64).sqrt()
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0f64, |m, s| m.max(s.abs()))
    }
}

/// Chunk-length multiplier: a chunk lasts `4·n` seconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChunkSpec {
    n: usize,
}

impl ChunkSpec {
    pub fn new(n: usize) -> Result<Self, DspError> {
        if n == 0 {
            return Err(DspError::ZeroChunk);
        }
        Ok(Self { n })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn seconds(&self) -> f64 {
        CHUNK_SECONDS * self.n as f64
    }

    pub fn samples(&self) -> usize {
        CHUNK_SAMPLES * self.n
    }

    pub fn video_frames(&self) -> usize {
        CHUNK_VIDEO_FRAMES * self.n
    }

    pub fn time_frames(&self) -> usize {
        CHUNK_FRAMES * self.n
    }

    /// Temporal resolution of the fusion point (16 per 4 s).
    pub fn fusion_frames(&self) -> usize {
        16 * self.n
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Resolution {
    Full512,
    Down256,
}

impl Resolution {
    pub fn bins(self) -> usize {
        match self {
            Resolution::Full512 => FULL_BINS,
            Resolution::Down256 => DOWN_BINS,
        }
    }
}

/// Complex time–frequency grid, row-major over `(f, t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram {
    pub data: Vec<Complex64>,
    pub n_freq: usize,
    pub n_time: usize,
    pub resolution: Resolution,
}

impl ComplexSpectrogram {
    pub fn zeros(resolution: Resolution, n_time: usize) -> Self {
        let n_freq = resolution.bins();
        Self {
            data: vec![Complex64::new(0.0, 0.0); n_freq * n_time],
            n_freq,
            n_time,
            resolution,
        }
    }

    pub fn from_data(
        data: Vec<Complex64>,
        resolution: Resolution,
        n_time: usize,
    ) -> Result<Self, DspError> {
        let n_freq = resolution.bins();
        if data.len() != n_freq * n_time {
            return Err(DspError::ShapeMismatch {
                expected: (n_freq, n_time),
                actual: (data.len() / n_time.max(1), n_time),
            });
        }
        Ok(Self {
            data,
            n_freq,
            n_time,
            resolution,
        })
    }

    #[inline]
    pub fn at(&self, f: usize, t: usize) -> Complex64 {
        self.data[f * self.n_time + t]
    }

    #[inline]
    pub fn at_mut(&mut self, f: usize, t: usize) -> &mut Complex64 {
        &mut self.data[f * self.n_time + t]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_freq, self.n_time)
    }

    pub fn energy(&self) -> f64 {
        self.data.iter().map(|c| c.norm_sqr()).sum()
    }
}

/// Keeps even frequency bins: output row `k` is input row `2k`.
pub fn downsample_freq(spec: &ComplexSpectrogram) -> Result<ComplexSpectrogram, DspError> {
    if spec.resolution != Resolution::Full512 {
        return Err(DspError::WrongResolution {
            expected: Resolution::Full512,
            actual: spec.resolution,
        });
    }
    let n_time = spec.n_time;
    let mut out = ComplexSpectrogram::zeros(Resolution::Down256, n_time);
    for k in 0..DOWN_BINS {
        let src = &spec.data[2 * k * n_time..(2 * k + 1) * n_time];
        out.data[k * n_time..(k + 1) * n_time].copy_from_slice(src);
    }
    Ok(out)
}

/// Nearest-neighbour inverse of [`downsample_freq`] for masks: rows `2k` and
/// `2k + 1` of the output both equal row `k` of the input.
pub fn upsample_mask_freq(mask: &ComplexMask) -> Result<ComplexMask, DspError> {
    if mask.n_freq != DOWN_BINS {
        return Err(DspError::ShapeMismatch {
            expected: (DOWN_BINS, mask.n_time),
            actual: (mask.n_freq, mask.n_time),
        });
    }
    let n_time = mask.n_time;
    let mut real = vec![0.0; FULL_BINS * n_time];
    let mut imag = vec![0.0; FULL_BINS * n_time];
    for k in 0..DOWN_BINS {
        let row = k * n_time..(k + 1) * n_time;
        for dup in [2 * k, 2 * k + 1] {
            real[dup * n_time..(dup + 1) * n_time].copy_from_slice(&mask.real[row.clone()]);
            imag[dup * n_time..(dup + 1) * n_time].copy_from_slice(&mask.imag[row.clone()]);
        }
    }
    Ok(ComplexMask {
        real,
        imag,
        n_freq: FULL_BINS,
        n_time,
        bounded: mask.bounded,
    })
}
