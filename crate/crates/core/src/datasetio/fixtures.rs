//! Synthetic miniature datasets: harmonic "voices" with vibrato, stand-in
//! accompaniments per category, and landmark clips whose mouth opening
//! follows the voice envelope.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    write_accomp_manifest, write_manifest, AccompRecord, DatasetError, Gender, Language, SampleRecord, Split,
    ACCOMP_MANIFEST,
};
use crate::dsp::{write_wav, WavEncoding, Waveform, SAMPLE_RATE};
use crate::visualnet::{write_landmarks, LandmarkSequence, LANDMARK_FPS, NUM_LANDMARKS};

pub const ACCOMP_CATEGORIES: [&str; 10] = [
    "acappella",
    "background_music",
    "beatboxing",
    "choir",
    "drum",
    "lullaby",
    "rapping",
    "theremin",
    "whistling",
    "yodelling",
];

const SR: f64 = SAMPLE_RATE as f64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureSpec {
    pub singers: usize,
    /// Train recordings per seen singer.
    pub train_per_singer: usize,
    /// Length of every voice recording.
    pub duration_s: f64,
    pub accomp_duration_s: f64,
    pub accomp_per_category: usize,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            singers: 10,
            train_per_singer: 2,
            duration_s: 9.0,
            accomp_duration_s: 12.0,
            accomp_per_category: 1,
        }
    }
}

impl FixtureSpec {
    fn validate(&self) -> Result<(), DatasetError> {
        let bad = |msg: &str| Err(DatasetError::Fixture(msg.into()));
        if self.singers < 6 {
            return bad("at least 6 singers are needed to populate every split");
        }
        if self.train_per_singer == 0 || self.accomp_per_category == 0 {
            return bad("per-singer and per-category counts must be positive");
        }
        if !(self.duration_s >= 4.5) || !(self.accomp_duration_s >= 4.0) {
            return bad("recordings must be long enough for one chunk");
        }
        Ok(())
    }
}

/// Pearson correlation of two equally long series.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len()) as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

/// Voice RMS over each landmark frame period.
pub fn frame_rms(samples: &[f64], frames: usize) -> Vec<f64> {
    let per = SR / LANDMARK_FPS as f64;
    (0..frames)
        .map(|f| {
            let a = (f as f64 * per).round() as usize;
            let b = (((f + 1) as f64 * per).round() as usize).min(samples.len());
            if b <= a {
                return 0.0;
            }
            (samples[a..b].iter().map(|v| v * v).sum::<f64>() / (b - a) as f64).sqrt()
        })
        .collect()
}

/// Inner-lip gap (points 62 and 66) per frame.
pub fn mouth_opening(seq: &LandmarkSequence) -> Vec<f64> {
    (0..seq.frames())
        .map(|f| {
            let [x0, y0] = seq.point(f, 62);
            let [x1, y1] = seq.point(f, 66);
            ((x1 - x0).powi(2) + (y1 - y0).powi(2)).sqrt()
        })
        .collect()
}

fn normalize_peak(x: &mut [f64], peak: f64) {
    let m = x.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if m > 0.0 {
        x.iter_mut().for_each(|v| *v *= peak / m);
    }
}

/// Harmonic tone complex with vibrato; pitch may follow `pitch(t)`.
fn harmonic(out: &mut [f64], amp: &[f64], pitch: impl Fn(f64) -> f64, timbre: &[f64], vib_hz: f64, vib_depth: f64) {
    let mut phase = 0.0;
    for (i, o) in out.iter_mut().enumerate() {
        let t = i as f64 / SR;
        let f = pitch(t) * (1.0 + vib_depth * (2.0 * PI * vib_hz * t).sin());
        phase += 2.0 * PI * f / SR;
        if amp[i] == 0.0 {
            continue;
        }
        let mut v = 0.0;
        for (k, w) in timbre.iter().enumerate() {
            let h = (k + 1) as f64;
            if h * f < 0.45 * SR {
                v += w / h * (h * phase).sin();
            }
        }
        *o += amp[i] * v;
    }
}

/// Note-level envelope: notes of 0.3–0.8 s with short rests.
fn note_track(len: usize, rng: &mut ChaCha8Rng, rest_p: f64) -> (Vec<f64>, Vec<f64>) {
    const SCALE: [f64; 8] = [0.0, 2.0, 4.0, 5.0, 7.0, 9.0, 11.0, 12.0];
    let mut env = vec![0.0; len];
    let mut semis = vec![0.0; len];
    let mut i = 0;
    while i < len {
        let dur = ((rng.gen_range(0.3..0.8) * SR) as usize).min(len - i);
        let rest = rng.gen::<f64>() < rest_p;
        let step = SCALE[rng.gen_range(0..SCALE.len())];
        let level = rng.gen_range(0.5..1.0);
        let (att, rel) = (0.03 * SR, 0.08 * SR);
        for j in 0..dur {
            semis[i + j] = step;
            if !rest {
                let a = (j as f64 / att).min(1.0);
                let r = ((dur - j) as f64 / rel).min(1.0);
                env[i + j] = level * a * r * (1.0 - 0.3 * j as f64 / dur as f64);
            }
        }
        i += dur;
    }
    (env, semis)
}

fn synth_voice(len: usize, f0: f64, timbre: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (env, semis) = note_track(len, rng, 0.2);
    let mut out = vec![0.0; len];
    let vib = rng.gen_range(4.5..6.5);
    harmonic(&mut out, &env, |t| f0 * 2f64.powf(semis[((t * SR) as usize).min(len - 1)] / 12.0), timbre, vib, 0.015);
    normalize_peak(&mut out, 0.6);
    out
}

fn lowpass_noise(len: usize, cutoff_hz: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let a = 1.0 - (-2.0 * PI * cutoff_hz / SR).exp();
    let mut y = 0.0;
    (0..len)
        .map(|_| {
            y += a * (rng.gen_range(-1.0..1.0) - y);
            y
        })
        .collect()
}

/// Decaying bursts on a beat grid.
fn bursts(len: usize, period_s: f64, decay_s: f64, src: &[f64]) -> Vec<f64> {
    let p = (period_s * SR) as usize;
    (0..len)
        .map(|i| src[i] * (-((i % p) as f64 / SR) / decay_s).exp())
        .collect()
}

fn synth_accomp(category: &str, len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let ones = vec![1.0; len];
    let mut out = vec![0.0; len];
    match category {
        "acappella" => {
            let (env, semis) = note_track(len, rng, 0.1);
            let f0 = rng.gen_range(90.0..140.0);
            harmonic(&mut out, &env, |t| f0 * 2f64.powf(semis[((t * SR) as usize).min(len - 1)] / 12.0), &[1.0, 0.6, 0.4, 0.3, 0.2], 5.0, 0.01);
        }
        "background_music" => {
            let root = rng.gen_range(110.0..220.0);
            for ratio in [1.0, 1.25, 1.5, 2.0] {
                harmonic(&mut out, &ones, |t| root * ratio * if ((t / 2.0) as usize).is_multiple_of(2) { 1.0 } else { 4.0 / 3.0 }, &[1.0, 0.3], 0.2, 0.002);
            }
        }
        "beatboxing" => {
            let n = lowpass_noise(len, 1500.0, rng);
            out = bursts(len, 0.25, 0.04, &n);
        }
        "choir" => {
            let (env, semis) = note_track(len, rng, 0.0);
            let f0 = rng.gen_range(180.0..260.0);
            for detune in [0.995, 1.0, 1.006, 1.5] {
                harmonic(&mut out, &env, |t| detune * f0 * 2f64.powf(semis[((t * SR) as usize).min(len - 1)] / 12.0), &[1.0, 0.5, 0.3], 5.5, 0.012);
            }
        }
        "drum" => {
            let mut kick = vec![0.0; len];
            harmonic(&mut kick, &ones, |_| 60.0, &[1.0], 0.0, 0.0);
            let k = bursts(len, 0.5, 0.08, &kick);
            let n = lowpass_noise(len, 4000.0, rng);
            let s = bursts(len, 0.5, 0.05, &n);
            let half = (0.25 * SR) as usize;
            out = (0..len).map(|i| k[i] + if i >= half { 0.6 * s[i - half] } else { 0.0 }).collect();
        }
        "lullaby" => {
            let (env, semis) = note_track(len, rng, 0.05);
            harmonic(&mut out, &env, |t| 330.0 * 2f64.powf(semis[((t * SR) as usize).min(len - 1)] / 12.0), &[1.0, 0.1], 4.0, 0.005);
        }
        "rapping" => {
            let mut v = vec![0.0; len];
            let f0 = rng.gen_range(100.0..150.0);
            harmonic(&mut v, &ones, |t| f0 * (1.0 + 0.1 * (2.0 * PI * 0.7 * t).sin()), &[1.0, 0.7, 0.5, 0.4, 0.3, 0.2], 0.0, 0.0);
            let n = lowpass_noise(len, 3000.0, rng);
            let mix: Vec<f64> = v.iter().zip(&n).map(|(a, b)| a + 0.5 * b).collect();
            out = bursts(len, 0.18, 0.07, &mix);
        }
        "theremin" => {
            harmonic(&mut out, &ones, |t| 440.0 * 2f64.powf((2.0 * PI * 0.15 * t).sin()), &[1.0], 6.0, 0.02);
        }
        "whistling" => {
            let (env, semis) = note_track(len, rng, 0.15);
            harmonic(&mut out, &env, |t| 1200.0 * 2f64.powf(semis[((t * SR) as usize).min(len - 1)] / 12.0), &[1.0], 5.0, 0.01);
            // A silent tail exercises the silence filter.
            let keep = len.saturating_sub(CHUNK_TAIL).max(len / 2);
            out[keep..].iter_mut().for_each(|v| *v = 0.0);
        }
        _ => {
            // Yodelling: register breaks between chest and head voice.
            let f0 = rng.gen_range(200.0..260.0);
            harmonic(&mut out, &ones, |t| f0 * if ((t / 0.35) as usize).is_multiple_of(2) { 1.0 } else { 1.68 }, &[1.0, 0.5, 0.3, 0.2], 5.5, 0.01);
        }
    }
    normalize_peak(&mut out, 0.5);
    out
}

const CHUNK_TAIL: usize = crate::dsp::CHUNK_SAMPLES;

/// Neutral 68-point face in face units; x right, y down.
fn face_template() -> Vec<[f64; 2]> {
    let mut p = Vec::with_capacity(NUM_LANDMARKS);
    for i in 0..17 {
        let th = PI * i as f64 / 16.0;
        p.push([-th.cos(), 0.2 + 1.1 * th.sin()]);
    }
    for side in [-1.0, 1.0] {
        for i in 0..5 {
            let u = i as f64 / 4.0;
            let x = if side < 0.0 { -0.8 + 0.6 * u } else { 0.2 + 0.6 * u };
            p.push([x, -0.6 - 0.08 * (PI * u).sin()]);
        }
    }
    for i in 0..4 {
        p.push([0.0, -0.4 + 0.2 * i as f64]);
    }
    for i in 0..5 {
        p.push([-0.2 + 0.1 * i as f64, 0.3 + 0.03 * (i as f64 - 2.0).abs()]);
    }
    for cx in [-0.45, 0.45] {
        for i in 0..6 {
            let th = PI - 2.0 * PI * i as f64 / 6.0;
            p.push([cx + 0.15 * th.cos(), -0.3 - 0.05 * th.sin()]);
        }
    }
    for i in 0..12 {
        let th = PI - 2.0 * PI * i as f64 / 12.0;
        p.push([0.4 * th.cos(), 0.75 - 0.15 * th.sin()]);
    }
    for i in 0..8 {
        let th = PI - 2.0 * PI * i as f64 / 8.0;
        p.push([0.3 * th.cos(), 0.75 - 0.04 * th.sin()]);
    }
    p
}

/// Landmarks whose mouth and jaw open with `opening` (one value per frame,
/// in `[0, 1]`), plus slow head motion and jitter.
fn synth_landmarks(opening: &[f64], rng: &mut ChaCha8Rng) -> LandmarkSequence {
    let template = face_template();
    let scale = rng.gen_range(70.0..110.0);
    let (cx, cy) = (rng.gen_range(180.0..260.0), rng.gen_range(180.0..260.0));
    let (mx, my) = (rng.gen_range(0.05..0.25), rng.gen_range(0.05..0.25));
    let mut coords = Vec::with_capacity(opening.len() * NUM_LANDMARKS * 2);
    for (f, &o) in opening.iter().enumerate() {
        let t = f as f64 / LANDMARK_FPS as f64;
        let (dx, dy) = (0.1 * (2.0 * PI * mx * t).sin(), 0.08 * (2.0 * PI * my * t).cos());
        for (k, &[x, mut y]) in template.iter().enumerate() {
            match k {
                0..=16 => y += 0.15 * o * (PI * k as f64 / 16.0).sin(),
                55..=59 | 65..=67 => y += 0.3 * o,
                61..=63 => y -= 0.03 * o,
                _ => {}
            }
            let jx = rng.gen_range(-1.0..1.0) * 0.004;
            let jy = rng.gen_range(-1.0..1.0) * 0.004;
            coords.push(cx + scale * (x + dx + jx));
            coords.push(cy + scale * (y + dy + jy));
        }
    }
    LandmarkSequence::new(opening.len(), coords).expect("68-point synthetic clip")
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_voice_sample(
    out_dir: &Path,
    record: &SampleRecord,
    f0: f64,
    timbre: &[f64],
    duration_s: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(), DatasetError> {
    let len = (duration_s * SR).round() as usize;
    let frames = (duration_s * LANDMARK_FPS as f64).round() as usize;
    let voice = synth_voice(len, f0, timbre, rng);
    let env = frame_rms(&voice, frames);
    let peak = env.iter().fold(0.0f64, |a, &v| a.max(v)).max(1e-12);
    let opening: Vec<f64> = env.iter().map(|v| v / peak).collect();
    let clip = synth_landmarks(&opening, rng);
    write_wav(
        &out_dir.join(&record.audio_path),
        &Waveform::new(voice, SAMPLE_RATE)?,
        WavEncoding::Pcm16,
    )?;
    write_landmarks(&out_dir.join(&record.landmarks_path), &clip)?;
    Ok(())
}

/// Writes a miniature dataset under `out_dir` and returns the manifest path.
///
/// The last fifth of the singers (at least two) form the unseen-unheard
/// split; the first two seen singers also get a validation recording and
/// the next two a seen-heard test recording.
pub fn generate_fixtures(spec: &FixtureSpec, out_dir: &Path, seed: u64) -> Result<PathBuf, DatasetError> {
    spec.validate()?;
    for sub in ["audio", "landmarks"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(io_err(&d))?;
    }
    let unseen = (spec.singers / 5).max(2);
    let seen = spec.singers - unseen;
    let mut records = Vec::new();
    let d = spec.duration_s;
    for s in 0..spec.singers {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x5157_0000 + s as u64));
        let f0 = 110.0 * 2f64.powf(3.0 * s as f64 / 12.0);
        let timbre: Vec<f64> = (0..10).map(|_| rng.gen_range(0.3..1.0)).collect();
        let mut splits = Vec::new();
        if s < seen {
            splits.extend(std::iter::repeat_n(Split::Train, spec.train_per_singer));
            match s {
                0 | 1 => splits.push(Split::Val),
                2 | 3 => splits.push(Split::TestSeenHeard),
                _ => {}
            }
        } else {
            splits.extend([Split::TestUnseenUnheard; 2]);
        }
        for (k, split) in splits.into_iter().enumerate() {
            let id = format!("s{s:02}_{k}");
            let lead = rng.gen_range(0.0..0.2);
            let mid = (d / 2.0).max(4.3 + lead);
            let mut segments = vec![(lead, mid)];
            if d - 0.1 - (mid + 0.2) >= 1.0 {
                segments.push((mid + 0.2, d - 0.1));
            }
            let record = SampleRecord {
                sample_id: id.clone(),
                language: Language::ALL[s % Language::ALL.len()],
                gender: if s % 2 == 0 { Gender::Male } else { Gender::Female },
                split,
                singer_id: format!("singer{s:02}"),
                segments,
                audio_path: format!("audio/{id}.wav"),
                landmarks_path: format!("landmarks/{id}.almk"),
            };
            write_voice_sample(out_dir, &record, f0, &timbre, d, &mut rng)?;
            records.push(record);
        }
    }

    let mut accomps = Vec::new();
    let len = (spec.accomp_duration_s * SR).round() as usize;
    for (c, cat) in ACCOMP_CATEGORIES.iter().enumerate() {
        for k in 0..spec.accomp_per_category {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0xACC0_0000 + (c * 100 + k) as u64));
            let id = format!("{cat}_{k}");
            let rec = AccompRecord {
                sample_id: id.clone(),
                category: cat.to_string(),
                audio_path: format!("audio/acc_{id}.wav"),
            };
            let wave = Waveform::new(synth_accomp(cat, len, &mut rng), SAMPLE_RATE)?;
            write_wav(&out_dir.join(&rec.audio_path), &wave, WavEncoding::Pcm16)?;
            accomps.push(rec);
        }
    }

    let manifest = out_dir.join("manifest.jsonl");
    write_manifest(&manifest, &records)?;
    write_accomp_manifest(&out_dir.join(ACCOMP_MANIFEST), &accomps)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pearson_examples() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]) - 1.0).abs() < 1e-12);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        assert!(pearson(&[1.0, -1.0, 1.0, -1.0], &[1.0, 1.0, -1.0, -1.0]).abs() < 1e-12);
    }

    #[test]
    fn template_has_68_points() {
        let t = face_template();
        assert_eq!(t.len(), NUM_LANDMARKS);
        // Inner lips 62 (top) and 66 (bottom) sit on the mouth's centre line.
        assert!(t[62][0].abs() < 1e-12 && t[66][0].abs() < 1e-12);
        assert!(t[66][1] > t[62][1]);
    }

    #[test]
    fn every_category_is_audible() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for cat in ACCOMP_CATEGORIES {
            let a = synth_accomp(cat, 2 * CHUNK_TAIL, &mut rng);
            let rms = (a[..CHUNK_TAIL].iter().map(|v| v * v).sum::<f64>() / CHUNK_TAIL as f64).sqrt();
            assert!(rms > 0.01, "{cat}: rms {rms}");
            assert!(a.iter().all(|v| v.abs() <= 0.5 + 1e-12));
        }
    }

    #[test]
    fn small_spec_rejected() {
        let spec = FixtureSpec {
            singers: 3,
            ..FixtureSpec::default()
        };
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(generate_fixtures(&spec, dir.path(), 0), Err(DatasetError::Fixture(_))));
    }
}
