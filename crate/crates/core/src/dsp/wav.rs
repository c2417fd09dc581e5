//! Mono RIFF/WAVE I/O: 16-bit signed PCM and 32-bit float.

use std::path::Path;

use hound::{SampleFormat, WavSpec};

use super::{DspError, Waveform};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavEncoding {
    Pcm16,
    Float32,
}

pub fn read_wav(path: &Path) -> Result<Waveform, DspError> {
    let err = |e: hound::Error| DspError::Wav(format!("{}: {e}", path.display()));
    let mut reader = hound::WavReader::open(path).map_err(err)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(DspError::Wav(format!(
            "{}: expected mono, found {} channels",
            path.display(),
            spec.channels
        )));
    }
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<Result<_, _>>()
            .map_err(err)?,
        (SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<Result<_, _>>()
            .map_err(err)?,
        (fmt, bits) => {
            return Err(DspError::Wav(format!(
                "{}: unsupported sample format {fmt:?}/{bits}",
                path.display()
            )))
        }
    };
    Waveform::new(samples, spec.sample_rate)
}

/// Sample count and rate from the header alone.
pub fn wav_info(path: &Path) -> Result<(usize, u32), DspError> {
    let reader = hound::WavReader::open(path).map_err(|e| DspError::Wav(format!("{}: {e}", path.display())))?;
    let spec = reader.spec();
    Ok((reader.duration() as usize, spec.sample_rate))
}

pub fn write_wav(path: &Path, wave: &Waveform, encoding: WavEncoding) -> Result<(), DspError> {
    let err = |e: hound::Error| DspError::Wav(format!("{}: {e}", path.display()));
    let spec = match encoding {
        WavEncoding::Pcm16 => WavSpec {
            channels: 1,
            sample_rate: wave.sample_rate,
            bits_per_sample: 16,
            sample_format: SampleFormat::Int,
        },
        WavEncoding::Float32 => WavSpec {
            channels: 1,
            sample_rate: wave.sample_rate,
            bits_per_sample: 32,
            sample_format: SampleFormat::Float,
        },
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(err)?;
    for &s in &wave.samples {
        match encoding {
            WavEncoding::Pcm16 => {
                let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
                writer.write_sample(v).map_err(err)?;
            }
            WavEncoding::Float32 => writer.write_sample(s as f32).map_err(err)?,
        }
    }
    writer.finalize().map_err(err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_round_trip_is_f32_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let wave = Waveform::new(vec![0.0, 0.25, -0.5, 0.125], 16384).unwrap();
        write_wav(&path, &wave, WavEncoding::Float32).unwrap();
        assert_eq!(read_wav(&path).unwrap(), wave);
    }

    #[test]
    fn pcm16_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.wav");
        let wave = Waveform::new(vec![0.0, 0.3, -0.7, 1.0, -1.0], 22050).unwrap();
        write_wav(&path, &wave, WavEncoding::Pcm16).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.sample_rate, 22050);
        for (a, b) in wave.samples.iter().zip(&back.samples) {
            assert!((a - b).abs() <= 1.0 / 32767.0);
            assert!((-1.0..=1.0).contains(b));
        }
    }

    #[test]
    fn missing_file_names_path() {
        let e = read_wav(Path::new("/nonexistent/x.wav")).unwrap_err();
        assert!(e.to_string().contains("/nonexistent/x.wav"));
    }
}
