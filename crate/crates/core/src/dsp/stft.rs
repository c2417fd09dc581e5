use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::{
    ChunkSpec, ComplexSpectrogram, DspError, Resolution, Waveform, FULL_BINS, HOP_LEN,
    SAMPLE_RATE, WINDOW_LEN,
};

/// Floor of the overlap-add normalizer as a fraction of its largest value.
/// Near the chunk start only the rising flank of the first window covers a
/// sample; dividing a modified spectrum by that tiny sum would amplify it
/// without bound, so those samples fade out instead.
pub const WINDOW_SUM_FLOOR: f64 = 0.1;

/// Reusable FFT plans and analysis window.
pub struct StftPlan {
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Default for StftPlan {
    fn default() -> Self {
        Self::new()
    }
}

impl StftPlan {
    pub fn new() -> Self {
        let mut planner = FftPlanner::new();
        Self {
            window: periodic_hann(WINDOW_LEN),
            forward: planner.plan_fft_forward(WINDOW_LEN),
            inverse: planner.plan_fft_inverse(WINDOW_LEN),
        }
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    /// Frame `i` covers samples `[i·256, i·256 + 1022)`; samples past the end
    /// of the chunk read as zero.
    pub fn stft(&self, wave: &Waveform, chunk: ChunkSpec) -> Result<ComplexSpectrogram, DspError> {
        check_chunk(wave, chunk)?;
        let n_time = chunk.time_frames();
        let mut spec = ComplexSpectrogram::zeros(Resolution::Full512, n_time);
        let mut buf = vec![Complex64::new(0.0, 0.0); WINDOW_LEN];
        let mut scratch = vec![Complex64::new(0.0, 0.0); self.forward.get_inplace_scratch_len()];
        for t in 0..n_time {
            let start = t * HOP_LEN;
            for (j, slot) in buf.iter_mut().enumerate() {
                let x = wave.samples.get(start + j).copied().unwrap_or(0.0);
                *slot = Complex64::new(x * self.window[j], 0.0);
            }
            self.forward.process_with_scratch(&mut buf, &mut scratch);
            for (f, value) in buf.iter().take(FULL_BINS).enumerate() {
                *spec.at_mut(f, t) = *value;
            }
        }
        Ok(spec)
    }

    /// Weighted overlap-add inverse, normalized by the summed squared window
    /// (floored at [`WINDOW_SUM_FLOOR`] of its maximum).
    pub fn istft(&self, spec: &ComplexSpectrogram, chunk: ChunkSpec) -> Result<Waveform, DspError> {
        if spec.resolution != Resolution::Full512 {
            return Err(DspError::WrongResolution {
                expected: Resolution::Full512,
                actual: spec.resolution,
            });
        }
        if spec.n_freq != FULL_BINS || spec.n_time != chunk.time_frames() {
            return Err(DspError::ShapeMismatch {
                expected: (FULL_BINS, chunk.time_frames()),
                actual: spec.shape(),
            });
        }
        let len = chunk.samples();
        let mut out = vec![0.0; len];
        let mut norm = vec![0.0; len];
        let mut buf = vec![Complex64::new(0.0, 0.0); WINDOW_LEN];
        let mut scratch = vec![Complex64::new(0.0, 0.0); self.inverse.get_inplace_scratch_len()];
        let scale = 1.0 / WINDOW_LEN as f64;
        for t in 0..spec.n_time {
            for (f, slot) in buf.iter_mut().enumerate().take(FULL_BINS) {
                *slot = spec.at(f, t);
            }
            // Hermitian completion of the one-sided spectrum.
            for k in FULL_BINS..WINDOW_LEN {
                buf[k] = buf[WINDOW_LEN - k].conj();
            }
            buf[0].im = 0.0;
            buf[WINDOW_LEN / 2].im = 0.0;
            self.inverse.process_with_scratch(&mut buf, &mut scratch);
            let start = t * HOP_LEN;
            for j in 0..WINDOW_LEN {
                let idx = start + j;
                if idx >= len {
                    break;
                }
                let w = self.window[j];
                out[idx] += w * buf[j].re * scale;
                norm[idx] += w * w;
            }
        }
        let floor = WINDOW_SUM_FLOOR * norm.iter().cloned().fold(0.0, f64::max);
        for (o, n) in out.iter_mut().zip(&norm) {
            *o /= n.max(floor);
        }
        Ok(Waveform {
            samples: out,
            sample_rate: SAMPLE_RATE,
        })
    }
}

pub fn stft(wave: &Waveform, chunk: ChunkSpec) -> Result<ComplexSpectrogram, DspError> {
    StftPlan::new().stft(wave, chunk)
}

pub fn istft(spec: &ComplexSpectrogram, chunk: ChunkSpec) -> Result<Waveform, DspError> {
    StftPlan::new().istft(spec, chunk)
}

fn check_chunk(wave: &Waveform, chunk: ChunkSpec) -> Result<(), DspError> {
    if wave.samples.len() != chunk.samples() || wave.sample_rate != SAMPLE_RATE {
        return Err(DspError::WrongLength {
            expected: chunk.samples(),
            expected_rate: SAMPLE_RATE,
            actual: wave.samples.len(),
            actual_rate: wave.sample_rate,
        });
    }
    Ok(())
}

fn periodic_hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / len as f64).cos())
        .collect()
}
