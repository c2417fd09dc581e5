//! Projection decomposition of an estimate onto delayed references.
//!
//! References and estimate are zero-padded by `L − 1` samples, so every
//! delayed copy keeps its full support and the Gram matrix of the delay
//! basis is block-Toeplitz in the lags. All components have length
//! `N + L − 1`.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rustfft::FftPlanner;

use super::EvalError;

/// Relative ridge added to a rank-deficient Gram matrix.
pub const RIDGE: f64 = 1e-10;
/// Smallest acceptable squared Cholesky pivot relative to the largest.
const PIVOT_RATIO: f64 = 1e-13;

#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub s_target: Vec<f64>,
    pub e_interf: Vec<f64>,
    pub e_artif: Vec<f64>,
    /// Whether a ridge was needed for either projection.
    pub regularized: bool,
}

impl Decomposition {
    /// `s_target + e_interf + e_artif`.
    pub fn recompose(&self) -> Vec<f64> {
        self.s_target
            .iter()
            .zip(&self.e_interf)
            .zip(&self.e_artif)
            .map(|((a, b), c)| a + b + c)
            .collect()
    }
}

struct Spectra {
    size: usize,
    refs: Vec<Vec<Complex64>>,
    est: Vec<Complex64>,
}

fn spectra(estimate: &[f64], refs: &[&[f64]], l: usize) -> Spectra {
    let size = (estimate.len() + l).next_power_of_two();
    let fft = FftPlanner::new().plan_fft_forward(size);
    let transform = |x: &[f64]| {
        let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        buf.resize(size, Complex64::new(0.0, 0.0));
        fft.process(&mut buf);
        buf
    };
    Spectra {
        size,
        refs: refs.iter().map(|r| transform(r)).collect(),
        est: transform(estimate),
    }
}

/// `Σ_u a(u)·b(u + τ)` for all τ, returned circularly (index `τ mod size`).
fn xcorr(a: &[Complex64], b: &[Complex64], planner: &mut FftPlanner<f64>) -> Vec<f64> {
    let size = a.len();
    let mut buf: Vec<Complex64> = a.iter().zip(b).map(|(x, y)| x.conj() * y).collect();
    planner.plan_fft_inverse(size).process(&mut buf);
    buf.iter().map(|c| c.re / size as f64).collect()
}

/// Solves the normal equations of the delay basis of `which` references.
/// Returns tap coefficients per reference and the regularization flag.
fn project_coeffs(sp: &Spectra, which: &[usize], l: usize, planner: &mut FftPlanner<f64>) -> (Vec<Vec<f64>>, bool) {
    let k = which.len();
    let dim = k * l;
    let mut gram = DMatrix::<f64>::zeros(dim, dim);
    let mut rhs = DVector::<f64>::zeros(dim);
    for (bi, &i) in which.iter().enumerate() {
        for (bj, &j) in which.iter().enumerate().skip(bi) {
            let c = xcorr(&sp.refs[i], &sp.refs[j], planner);
            for a in 0..l {
                for b in 0..l {
                    let lag = (a as isize - b as isize).rem_euclid(sp.size as isize) as usize;
                    gram[(bi * l + a, bj * l + b)] = c[lag];
                    gram[(bj * l + b, bi * l + a)] = c[lag];
                }
            }
        }
        let d = xcorr(&sp.refs[i], &sp.est, planner);
        for b in 0..l {
            rhs[bi * l + b] = d[b];
        }
    }

    let healthy = |ch: &nalgebra::Cholesky<f64, nalgebra::Dyn>| {
        let lmat = ch.l_dirty();
        let pivots: Vec<f64> = (0..dim).map(|i| lmat[(i, i)] * lmat[(i, i)]).collect();
        let hi = pivots.iter().cloned().fold(0.0f64, f64::max);
        pivots.iter().all(|&p| p > PIVOT_RATIO * hi)
    };
    let (solution, regularized) = match gram.clone().cholesky().filter(|c| healthy(c)) {
        Some(ch) => (ch.solve(&rhs), false),
        None => {
            let mean_diag = (0..dim).map(|i| gram[(i, i)]).sum::<f64>() / dim as f64;
            let lambda = if mean_diag > 0.0 { RIDGE * mean_diag } else { RIDGE };
            let mut g = gram;
            for i in 0..dim {
                g[(i, i)] += lambda;
            }
            let sol = g
                .clone()
                .cholesky()
                .map(|c| c.solve(&rhs))
                .unwrap_or_else(|| DVector::zeros(dim));
            (sol, true)
        }
    };
    let coeffs = (0..k).map(|bi| solution.rows(bi * l, l).iter().copied().collect()).collect();
    (coeffs, regularized)
}

/// `Σ_j Σ_b c_j[b]·r_j(t − b)` over the padded length.
fn synthesize(sp: &Spectra, which: &[usize], coeffs: &[Vec<f64>], out_len: usize, planner: &mut FftPlanner<f64>) -> Vec<f64> {
    let fwd = planner.plan_fft_forward(sp.size);
    let mut acc = vec![Complex64::new(0.0, 0.0); sp.size];
    for (&j, c) in which.iter().zip(coeffs) {
        let mut h: Vec<Complex64> = c.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        h.resize(sp.size, Complex64::new(0.0, 0.0));
        fwd.process(&mut h);
        for ((a, x), y) in acc.iter_mut().zip(&h).zip(&sp.refs[j]) {
            *a += x * y;
        }
    }
    planner.plan_fft_inverse(sp.size).process(&mut acc);
    acc[..out_len].iter().map(|c| c.re / sp.size as f64).collect()
}

/// Splits `estimate` into target, interference and artifact components
/// using `filter_len` delays of every reference.
pub fn bss_decompose(
    estimate: &[f64],
    references: &[&[f64]],
    target_index: usize,
    filter_len: usize,
) -> Result<Decomposition, EvalError> {
    let n = estimate.len();
    if n == 0 {
        return Err(EvalError::Input("empty estimate".into()));
    }
    if filter_len == 0 || filter_len > n {
        return Err(EvalError::Input(format!("filter length {filter_len} must lie in [1, {n}]")));
    }
    if target_index >= references.len() {
        return Err(EvalError::Input(format!(
            "target index {target_index} out of range for {} references",
            references.len()
        )));
    }
    if let Some((i, r)) = references.iter().enumerate().find(|(_, r)| r.len() != n) {
        return Err(EvalError::Input(format!("reference {i} has {} samples, estimate {n}", r.len())));
    }
    if estimate.iter().chain(references.iter().flat_map(|r| r.iter())).any(|v| !v.is_finite()) {
        return Err(EvalError::Input("non-finite samples".into()));
    }

    let l = filter_len;
    let out_len = n + l - 1;
    let sp = spectra(estimate, references, l);
    let mut planner = FftPlanner::new();

    let (ct, reg_t) = project_coeffs(&sp, &[target_index], l, &mut planner);
    let s_target = synthesize(&sp, &[target_index], &ct, out_len, &mut planner);

    let all: Vec<usize> = (0..references.len()).collect();
    let (ca, reg_a) = project_coeffs(&sp, &all, l, &mut planner);
    let p_all = synthesize(&sp, &all, &ca, out_len, &mut planner);

    let mut padded = estimate.to_vec();
    padded.resize(out_len, 0.0);
    let e_interf: Vec<f64> = p_all.iter().zip(&s_target).map(|(p, s)| p - s).collect();
    let e_artif: Vec<f64> = padded
        .iter()
        .zip(&s_target)
        .zip(&e_interf)
        .map(|((e, s), i)| e - s - i)
        .collect();
    Ok(Decomposition {
        s_target,
        e_interf,
        e_artif,
        regularized: reg_t || reg_a,
    })
}
