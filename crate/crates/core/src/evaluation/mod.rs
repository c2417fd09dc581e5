//! BSS-eval style SDR/SIR/SAR and the experiment harnesses: one- and
//! two-lead-voice setups, the α volume sweep, per-group aggregation and the
//! remix-percentage ablation table.

mod bss;
mod harness;
mod report;

pub use bss::{bss_decompose, Decomposition, RIDGE};
pub use harness::{
    ablation_table, evaluate_item, frozen_test_items, volume_sweep, AblationRow, AblationTable, EvalItem,
    MixtureBaseline, ModelSeparator, OracleSeparator, Separator, TaggedModel,
};
pub use report::{ExperimentReport, ReportRow};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audionet::AudioError;
use crate::dsp::DspError;
use crate::maskmath::MaskError;
use crate::training::TrainError;

/// Default distortion-filter length in taps.
pub const DEFAULT_FILTER_LEN: usize = 512;
/// Magnitude of the reported ratio when an energy vanishes.
pub const CAP_DB: f64 = 100.0;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid evaluation input: {0}")]
    Input(String),
    #[error("model '{0}' has no remix percentage tag")]
    MissingTag(String),
    #[error("report: {0}")]
    Report(String),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// Which mixtures an evaluation uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setup {
    OneVoice,
    TwoVoices,
}

impl Setup {
    pub fn as_str(self) -> &'static str {
        match self {
            Setup::OneVoice => "one_voice",
            Setup::TwoVoices => "two_voices",
        }
    }

    pub fn voices(self) -> usize {
        match self {
            Setup::OneVoice => 1,
            Setup::TwoVoices => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeparationMetrics {
    pub sdr: f64,
    pub sir: f64,
    pub sar: f64,
    /// A ratio hit `±CAP_DB` because an energy vanished.
    pub capped: bool,
    /// The projection needed a ridge.
    pub regularized: bool,
}

fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// `10·log₁₀(num/den)` clipped to `±CAP_DB`; the flag reports clipping.
fn ratio_db(num: f64, den: f64) -> (f64, bool) {
    if num <= 0.0 {
        return (-CAP_DB, true);
    }
    if den <= num * 10f64.powf(-CAP_DB / 10.0) {
        return (CAP_DB, true);
    }
    let db = 10.0 * (num / den).log10();
    if db < -CAP_DB {
        (-CAP_DB, true)
    } else {
        (db, false)
    }
}

pub fn metrics_from(d: &Decomposition) -> SeparationMetrics {
    let s = energy(&d.s_target);
    let dist: Vec<f64> = d.e_interf.iter().zip(&d.e_artif).map(|(a, b)| a + b).collect();
    let si: Vec<f64> = d.s_target.iter().zip(&d.e_interf).map(|(a, b)| a + b).collect();
    let (sdr, c1) = ratio_db(s, energy(&dist));
    let (sir, c2) = ratio_db(s, energy(&d.e_interf));
    let (sar, c3) = ratio_db(energy(&si), energy(&d.e_artif));
    SeparationMetrics {
        sdr,
        sir,
        sar,
        capped: c1 || c2 || c3,
        regularized: d.regularized,
    }
}

/// SDR, SIR and SAR of `estimate` for reference `target_index`.
pub fn compute_metrics_with(
    estimate: &[f64],
    references: &[&[f64]],
    target_index: usize,
    filter_len: usize,
) -> Result<SeparationMetrics, EvalError> {
    if estimate.iter().all(|&v| v == 0.0) {
        return Ok(SeparationMetrics {
            sdr: -CAP_DB,
            sir: -CAP_DB,
            sar: -CAP_DB,
            capped: true,
            regularized: false,
        });
    }
    Ok(metrics_from(&bss_decompose(estimate, references, target_index, filter_len)?))
}

/// [`compute_metrics_with`] at the default filter length.
pub fn compute_metrics(estimate: &[f64], references: &[&[f64]], target_index: usize) -> Result<SeparationMetrics, EvalError> {
    compute_metrics_with(estimate, references, target_index, DEFAULT_FILTER_LEN)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Projection of `x` onto the columns of `basis` by SVD least squares.
    fn svd_projection(basis: &DMatrix<f64>, x: &[f64]) -> Vec<f64> {
        let y = nalgebra::DVector::from_column_slice(x);
        let coef = basis.clone().svd(true, true).solve(&y, 1e-12).unwrap();
        (basis * coef).iter().copied().collect()
    }

    /// Explicit delay basis with zero padding to `n + l − 1`.
    fn delay_basis(refs: &[&[f64]], l: usize) -> DMatrix<f64> {
        let n = refs[0].len();
        let rows = n + l - 1;
        let mut m = DMatrix::zeros(rows, refs.len() * l);
        for (j, r) in refs.iter().enumerate() {
            for d in 0..l {
                for (t, &v) in r.iter().enumerate() {
                    m[(t + d, j * l + d)] = v;
                }
            }
        }
        m
    }

    #[test]
    fn closed_form_l1_example() {
        let s1 = [1.0, 0.0, 0.0, 0.0];
        let s2 = [0.0, 1.0, 0.0, 0.0];
        let est = [1.0, 0.5, 0.0, 0.25];
        let d = bss_decompose(&est, &[&s1, &s2], 0, 1).unwrap();
        let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12);
        assert!(close(&d.s_target, &[1.0, 0.0, 0.0, 0.0]));
        assert!(close(&d.e_interf, &[0.0, 0.5, 0.0, 0.0]));
        assert!(close(&d.e_artif, &[0.0, 0.0, 0.0, 0.25]));
        let m = compute_metrics_with(&est, &[&s1, &s2], 0, 1).unwrap();
        assert!((m.sdr - 10.0 * (1.0f64 / 0.3125).log10()).abs() < 1e-6);
        assert!((m.sir - 10.0 * (1.0f64 / 0.25).log10()).abs() < 1e-6);
        assert!((m.sdr - 5.0515).abs() < 1e-4 && (m.sir - 6.0206).abs() < 1e-4);
        assert!(!m.capped);
    }

    #[test]
    fn matches_explicit_least_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 300;
        let l = 7;
        let refs: Vec<Vec<f64>> = (0..3).map(|_| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let est: Vec<f64> = (0..n).map(|i| 0.7 * refs[1][i] + 0.2 * refs[0][i] + 0.1 * rng.gen_range(-1.0..1.0)).collect();
        let r: Vec<&[f64]> = refs.iter().map(Vec::as_slice).collect();
        let d = bss_decompose(&est, &r, 1, l).unwrap();
        let mut padded = est.clone();
        padded.resize(n + l - 1, 0.0);
        let s_t = svd_projection(&delay_basis(&r[1..2], l), &padded);
        let p_all = svd_projection(&delay_basis(&r, l), &padded);
        for t in 0..n + l - 1 {
            assert!((d.s_target[t] - s_t[t]).abs() < 1e-9);
            assert!((d.s_target[t] + d.e_interf[t] - p_all[t]).abs() < 1e-9);
        }
        assert!(!d.regularized);
    }

    #[test]
    fn identity_and_scaled_estimates_cap() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a: Vec<f64> = (0..2048).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..2048).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for scale in [1.0, 0.5] {
            let est: Vec<f64> = a.iter().map(|v| v * scale).collect();
            let m = compute_metrics(&est, &[&a, &b], 0).unwrap();
            assert_eq!((m.sdr, m.sir), (CAP_DB, CAP_DB));
            assert!(m.capped);
        }
        let silent = compute_metrics(&vec![0.0; 2048], &[&a, &b], 0).unwrap();
        assert_eq!(silent.sdr, -CAP_DB);
        assert!(silent.capped);
    }

    #[test]
    fn more_interference_lowers_sir() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 1024;
        let a: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let noise: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.1..0.1)).collect();
        let mut last = f64::INFINITY;
        for k in [0.05, 0.1, 0.2, 0.4] {
            let est: Vec<f64> = (0..n).map(|i| a[i] + k * b[i] + noise[i]).collect();
            let m = compute_metrics_with(&est, &[&a, &b], 0, 16).unwrap();
            assert!(m.sir < last);
            last = m.sir;
        }
    }

    #[test]
    fn rank_deficient_basis_is_regularized() {
        let a: Vec<f64> = (0..512).map(|i| (i as f64 * 0.3).sin()).collect();
        let b = a.clone();
        let est: Vec<f64> = a.iter().map(|v| v * 0.8 + 0.01).collect();
        let d = bss_decompose(&est, &[&a, &b], 0, 4).unwrap();
        assert!(d.regularized);
        let re = d.recompose();
        let mut padded = est.clone();
        padded.resize(515, 0.0);
        assert!(re.iter().zip(&padded).all(|(x, y)| (x - y).abs() < 1e-9));
    }

    #[test]
    fn input_errors() {
        let a = [1.0, 2.0];
        assert!(bss_decompose(&a, &[&a], 1, 1).is_err());
        assert!(bss_decompose(&a, &[&[1.0][..]], 0, 1).is_err());
        assert!(bss_decompose(&a, &[&a], 0, 3).is_err());
        assert!(bss_decompose(&[], &[], 0, 1).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]
        #[test]
        fn decomposition_invariants(seed in any::<u64>(), l in 1usize..9, gain in prop_oneof![-3.0f64..-0.1, 0.1f64..3.0]) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 256;
            let refs: Vec<Vec<f64>> = (0..2).map(|_| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            let w: f64 = rng.gen_range(0.0..1.0);
            let est: Vec<f64> = (0..n).map(|i| refs[0][i] + w * refs[1][i] + rng.gen_range(-0.3..0.3)).collect();
            let r: Vec<&[f64]> = refs.iter().map(Vec::as_slice).collect();
            let d = bss_decompose(&est, &r, 0, l).unwrap();
            let re = d.recompose();
            for t in 0..n + l - 1 {
                let e = if t < n { est[t] } else { 0.0 };
                prop_assert!((re[t] - e).abs() <= 1e-9);
            }
            let m = metrics_from(&d);
            let scaled: Vec<f64> = est.iter().map(|v| v * gain).collect();
            let ms = compute_metrics_with(&scaled, &r, 0, l).unwrap();
            prop_assert!((m.sdr - ms.sdr).abs() < 1e-8 && (m.sir - ms.sir).abs() < 1e-8);
            if energy(&d.e_artif) > 0.0 {
                prop_assert!(m.sir >= m.sdr);
            }
        }
    }
}
