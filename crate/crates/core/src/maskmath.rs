//! Complex ratio masks, tanh bounding, the energy weight map and the
//! weighted mask loss.

use num_complex::Complex64;
use thiserror::Error;

use crate::dsp::ComplexSpectrogram;

/// Denominator regularizer of the ideal mask.
pub const MASK_EPS: f64 = 1e-8;
pub const WEIGHT_MIN: f64 = 1e-3;
pub const WEIGHT_MAX: f64 = 10.0;

#[derive(Debug, Error, PartialEq)]
pub enum MaskError {
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("non-finite mask entry at index {0}")]
    NonFinite(usize),
    #[error("expected a bounded mask")]
    NotBounded,
}

/// Complex mask stored as separate real and imaginary planes over `(f, t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexMask {
    pub real: Vec<f64>,
    pub imag: Vec<f64>,
    pub n_freq: usize,
    pub n_time: usize,
    pub bounded: bool,
}

impl ComplexMask {
    pub fn constant(n_freq: usize, n_time: usize, re: f64, im: f64, bounded: bool) -> Self {
        Self {
            real: vec![re; n_freq * n_time],
            imag: vec![im; n_freq * n_time],
            n_freq,
            n_time,
            bounded,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_freq, self.n_time)
    }

    #[inline]
    pub fn at(&self, f: usize, t: usize) -> Complex64 {
        let i = f * self.n_time + t;
        Complex64::new(self.real[i], self.imag[i])
    }

    fn check_finite(&self) -> Result<(), MaskError> {
        match self
            .real
            .iter()
            .chain(&self.imag)
            .position(|v| !v.is_finite())
        {
            Some(i) => Err(MaskError::NonFinite(i % self.real.len().max(1))),
            None => Ok(()),
        }
    }
}

/// Per-bin loss weights `G`, clamped to `[1e-3, 10]`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMap {
    pub g: Vec<f64>,
    pub n_freq: usize,
    pub n_time: usize,
}

fn same_shape(a: (usize, usize), b: (usize, usize)) -> Result<(), MaskError> {
    if a != b {
        return Err(MaskError::ShapeMismatch { left: a, right: b });
    }
    Ok(())
}

/// `M = S_target · conj(S_mix) / (|S_mix|² + ε)`; bins with a vanishing
/// mixture map to `0 + 0i`.
pub fn ideal_complex_mask(
    target: &ComplexSpectrogram,
    mix: &ComplexSpectrogram,
) -> Result<ComplexMask, MaskError> {
    same_shape(target.shape(), mix.shape())?;
    let (real, imag) = target
        .data
        .iter()
        .zip(&mix.data)
        .map(|(s, m)| {
            let q = s * m.conj() / (m.norm_sqr() + MASK_EPS);
            (q.re, q.im)
        })
        .unzip();
    Ok(ComplexMask {
        real,
        imag,
        n_freq: target.n_freq,
        n_time: target.n_time,
        bounded: false,
    })
}

pub fn bound_mask(mask: &ComplexMask) -> Result<ComplexMask, MaskError> {
    mask.check_finite()?;
    Ok(ComplexMask {
        real: mask.real.iter().map(|v| v.tanh()).collect(),
        imag: mask.imag.iter().map(|v| v.tanh()).collect(),
        n_freq: mask.n_freq,
        n_time: mask.n_time,
        bounded: true,
    })
}

/// Per-bin complex product of mask and mixture.
pub fn apply_mask(
    mask: &ComplexMask,
    mix: &ComplexSpectrogram,
) -> Result<ComplexSpectrogram, MaskError> {
    same_shape(mask.shape(), mix.shape())?;
    let data = mix
        .data
        .iter()
        .enumerate()
        .map(|(i, m)| Complex64::new(mask.real[i], mask.imag[i]) * m)
        .collect();
    Ok(ComplexSpectrogram {
        data,
        n_freq: mix.n_freq,
        n_time: mix.n_time,
        resolution: mix.resolution,
    })
}

/// `G = clamp(ln(1 + |S_mix|), 1e-3, 10)`.
pub fn gradient_penalty(mix: &ComplexSpectrogram) -> WeightMap {
    WeightMap {
        g: mix.data.iter().map(|c| penalty_weight(c.norm())).collect(),
        n_freq: mix.n_freq,
        n_time: mix.n_time,
    }
}

#[inline]
pub fn penalty_weight(magnitude: f64) -> f64 {
    magnitude.ln_1p().clamp(WEIGHT_MIN, WEIGHT_MAX)
}

/// `Σ G·[(Δre)² + (Δim)²]` over all bins.
pub fn mask_loss(
    pred: &ComplexMask,
    target: &ComplexMask,
    weights: &WeightMap,
) -> Result<f64, MaskError> {
    same_shape(pred.shape(), target.shape())?;
    same_shape(pred.shape(), (weights.n_freq, weights.n_time))?;
    Ok(weights
        .g
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let dr = pred.real[i] - target.real[i];
            let di = pred.imag[i] - target.imag[i];
            g * (dr * dr + di * di)
        })
        .sum())
}

/// Gradient of [`mask_loss`] with respect to `pred`, as `(∂/∂re, ∂/∂im)`.
pub fn mask_loss_grad(
    pred: &ComplexMask,
    target: &ComplexMask,
    weights: &WeightMap,
) -> Result<(Vec<f64>, Vec<f64>), MaskError> {
    same_shape(pred.shape(), target.shape())?;
    same_shape(pred.shape(), (weights.n_freq, weights.n_time))?;
    Ok(weights
        .g
        .iter()
        .enumerate()
        .map(|(i, g)| {
            (
                2.0 * g * (pred.real[i] - target.real[i]),
                2.0 * g * (pred.imag[i] - target.imag[i]),
            )
        })
        .unzip())
}
