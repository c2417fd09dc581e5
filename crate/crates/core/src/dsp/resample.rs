use super::{DspError, Waveform};

const KAISER_BETA: f64 = 8.6;
/// Zero crossings of the interpolation kernel on each side of the centre,
/// measured at the lower of the two rates.
const HALF_TAPS: f64 = 32.0;

/// Band-limited resampling with a Kaiser-windowed sinc kernel.
///
/// When downsampling, the kernel cutoff moves to the output Nyquist rate and
/// its support widens accordingly. Samples beyond either end read as zero.
pub fn resample(wave: &Waveform, target_rate: u32) -> Result<Waveform, DspError> {
    if wave.is_empty() {
        return Err(DspError::Empty);
    }
    if target_rate == 0 {
        return Err(DspError::InvalidRate(target_rate));
    }
    if let Some(i) = wave.samples.iter().position(|s| !s.is_finite()) {
        return Err(DspError::NonFinite(i));
    }
    if target_rate == wave.sample_rate {
        return Ok(wave.clone());
    }

    let src = wave.sample_rate as f64;
    let dst = target_rate as f64;
    let ratio = src / dst;
    let cutoff = (dst / src).min(1.0);
    let half_width = HALF_TAPS / cutoff;
    let out_len =
        ((wave.len() as u64 * target_rate as u64 + wave.sample_rate as u64 / 2) / wave.sample_rate as u64) as usize;
    let norm = bessel_i0(KAISER_BETA);
    let input = &wave.samples;

    let samples = (0..out_len)
        .map(|j| {
            let centre = j as f64 * ratio;
            let lo = (centre - half_width).ceil().max(0.0) as usize;
            let hi = ((centre + half_width).floor() as usize).min(input.len() - 1);
            let mut acc = 0.0;
            for (k, &x) in input.iter().enumerate().take(hi + 1).skip(lo) {
                let d = centre - k as f64;
                let r = d / half_width;
                let window = bessel_i0(KAISER_BETA * (1.0 - r * r).max(0.0).sqrt()) / norm;
                acc += x * cutoff * sinc(cutoff * d) * window;
            }
            acc
        })
        .collect();

    Ok(Waveform {
        samples,
        sample_rate: target_rate,
    })
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Zeroth-order modified Bessel function of the first kind (power series).
fn bessel_i0(x: f64) -> f64 {
    let half = x / 2.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    let mut k = 1.0;
    while term > 1e-17 * sum {
        term *= (half / k) * (half / k);
        sum += term;
        k += 1.0;
    }
    sum
}
