//! Chunk tiling of annotated segments and aligned audio/landmark loading.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{AccompRecord, DatasetError, SampleRecord, DURATION_TOLERANCE_S};
use crate::dsp::{read_wav, resample, wav_info, ChunkSpec, Waveform, SAMPLE_RATE};
use crate::mixer::SILENCE_RMS;
use crate::visualnet::{read_landmarks, LandmarkSequence, LANDMARK_FPS};

/// One `4n` s window of a voice recording.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkEntry {
    /// `"{sample_id}:{segment_index}:{k}"`.
    pub chunk_id: String,
    pub sample_id: String,
    pub singer_id: String,
    pub segment_index: usize,
    pub offset_s: f64,
    pub audio_path: PathBuf,
    pub landmarks_path: PathBuf,
}

impl ChunkEntry {
    /// First landmark frame of the window.
    pub fn frame_offset(&self) -> usize {
        (self.offset_s * LANDMARK_FPS as f64).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkIndex {
    pub n: usize,
    pub entries: Vec<ChunkEntry>,
}

impl ChunkIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Offsets of non-overlapping `len_s` windows tiled from `start` inside
/// `[start, end)`. The first offset is snapped up to the video frame grid.
fn tile(start: f64, end: f64, len_s: f64) -> Vec<f64> {
    let fps = LANDMARK_FPS as f64;
    let first = (start * fps - 1e-9).ceil() / fps;
    let mut out = Vec::new();
    let mut k = 0usize;
    loop {
        let off = first + k as f64 * len_s;
        if off + len_s > end + 1e-9 {
            break;
        }
        out.push(off);
        k += 1;
    }
    out
}

fn landmark_frames(path: &Path) -> Result<usize, DatasetError> {
    Ok(read_landmarks(path)?.frames())
}

/// Tiles every segment of `records` into `4n` s chunks; paths resolve
/// against `root`.
pub fn build_chunk_index(records: &[SampleRecord], root: &Path, n: usize) -> Result<ChunkIndex, DatasetError> {
    let chunk = ChunkSpec::new(n)?;
    let mut entries = Vec::new();
    for r in records {
        let audio_path = root.join(&r.audio_path);
        let landmarks_path = root.join(&r.landmarks_path);
        let (samples, rate) = wav_info(&audio_path)?;
        let audio_s = samples as f64 / rate as f64;
        let video_s = landmark_frames(&landmarks_path)? as f64 / LANDMARK_FPS as f64;
        if (audio_s - video_s).abs() > DURATION_TOLERANCE_S {
            return Err(DatasetError::DurationMismatch {
                id: r.sample_id.clone(),
                audio_s,
                video_s,
            });
        }
        let available_s = audio_s.min(video_s);
        for (si, &(start, end)) in r.segments.iter().enumerate() {
            if end > available_s + DURATION_TOLERANCE_S {
                return Err(DatasetError::SegmentOutOfRange {
                    id: r.sample_id.clone(),
                    segment: si,
                    end_s: end,
                    available_s,
                });
            }
            let end = end.min(available_s);
            for (k, offset_s) in tile(start, end, chunk.seconds()).into_iter().enumerate() {
                entries.push(ChunkEntry {
                    chunk_id: format!("{}:{si}:{k}", r.sample_id),
                    sample_id: r.sample_id.clone(),
                    singer_id: r.singer_id.clone(),
                    segment_index: si,
                    offset_s,
                    audio_path: audio_path.clone(),
                    landmarks_path: landmarks_path.clone(),
                });
            }
        }
    }
    Ok(ChunkIndex { n, entries })
}

/// Reads a recording at the model rate.
fn read_audio(path: &Path) -> Result<Waveform, DatasetError> {
    let wave = read_wav(path)?;
    if wave.sample_rate == SAMPLE_RATE {
        Ok(wave)
    } else {
        Ok(resample(&wave, SAMPLE_RATE)?)
    }
}

fn slice_audio(wave: &Waveform, id: &str, offset_s: f64, len: usize) -> Result<Waveform, DatasetError> {
    let start = (offset_s * SAMPLE_RATE as f64).round() as usize;
    if start + len > wave.len() {
        return Err(DatasetError::ShortRead {
            id: id.into(),
            offset_s,
            msg: format!("need {len} samples from {start}, recording has {}", wave.len()),
        });
    }
    Ok(Waveform::new(wave.samples[start..start + len].to_vec(), SAMPLE_RATE)?)
}

/// The `65536·n` samples and `100·n` landmark frames of `entry`.
pub fn load_chunk(entry: &ChunkEntry, n: usize) -> Result<(Waveform, LandmarkSequence), DatasetError> {
    let chunk = ChunkSpec::new(n)?;
    let wave = read_audio(&entry.audio_path)?;
    let audio = slice_audio(&wave, &entry.chunk_id, entry.offset_s, chunk.samples())?;
    let clip = read_landmarks(&entry.landmarks_path)?;
    let start = entry.frame_offset();
    let frames = chunk.video_frames();
    if start + frames > clip.frames() {
        return Err(DatasetError::ShortRead {
            id: entry.chunk_id.clone(),
            offset_s: entry.offset_s,
            msg: format!("need {frames} landmark frames from {start}, clip has {}", clip.frames()),
        });
    }
    Ok((audio, clip.slice_frames(start, frames)?))
}

/// One `4n` s accompaniment window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccompChunk {
    /// `"{sample_id}:{k}"`.
    pub id: String,
    pub category: String,
    pub offset_s: f64,
    pub audio_path: PathBuf,
}

/// Tiles accompaniment recordings, dropping windows quieter than the
/// silence threshold.
pub fn build_accomp_index(records: &[AccompRecord], root: &Path, n: usize) -> Result<Vec<AccompChunk>, DatasetError> {
    let chunk = ChunkSpec::new(n)?;
    let mut out = Vec::new();
    for r in records {
        let audio_path = root.join(&r.audio_path);
        let wave = read_audio(&audio_path)?;
        let mut k = 0;
        while (k + 1) * chunk.samples() <= wave.len() {
            let offset_s = (k * chunk.samples()) as f64 / SAMPLE_RATE as f64;
            let seg = slice_audio(&wave, &r.sample_id, offset_s, chunk.samples())?;
            if seg.rms() >= SILENCE_RMS {
                out.push(AccompChunk {
                    id: format!("{}:{k}", r.sample_id),
                    category: r.category.clone(),
                    offset_s,
                    audio_path: audio_path.clone(),
                });
            }
            k += 1;
        }
    }
    Ok(out)
}

pub fn load_accomp_chunk(chunk: &AccompChunk, n: usize) -> Result<Waveform, DatasetError> {
    let spec = ChunkSpec::new(n)?;
    let wave = read_audio(&chunk.audio_path)?;
    slice_audio(&wave, &chunk.id, chunk.offset_s, spec.samples())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasetio::{Gender, Language, Split};
    use crate::dsp::{write_wav, WavEncoding};
    use crate::visualnet::write_landmarks;

    #[test]
    fn tiling_arithmetic() {
        assert_eq!(tile(0.0, 10.0, 4.0), vec![0.0, 4.0]);
        assert!(tile(0.0, 3.9, 4.0).is_empty());
        assert_eq!(tile(0.0, 8.0, 8.0), vec![0.0]);
        // Starts snap up to the 40 ms frame grid.
        let t = tile(1.01, 9.5, 4.0);
        assert_eq!(t.len(), 2);
        assert!((t[0] - 1.04).abs() < 1e-12);
    }

    fn write_sample(dir: &Path, id: &str, audio_s: f64, rate: u32, frames: usize, segments: Vec<(f64, f64)>) -> SampleRecord {
        let len = (audio_s * rate as f64).round() as usize;
        let samples = (0..len).map(|i| ((i % 1000) as f64 / 1000.0 - 0.5) * 0.5).collect();
        let audio_path = format!("{id}.wav");
        write_wav(&dir.join(&audio_path), &Waveform::new(samples, rate).unwrap(), WavEncoding::Float32).unwrap();
        let coords = (0..frames * 136).map(|i| (i / 136) as f64 + (i % 136) as f64 * 0.01).collect();
        let landmarks_path = format!("{id}.almk");
        write_landmarks(&dir.join(&landmarks_path), &LandmarkSequence::new(frames, coords).unwrap()).unwrap();
        SampleRecord {
            sample_id: id.into(),
            language: Language::English,
            gender: Gender::Male,
            split: Split::Train,
            singer_id: "s".into(),
            segments,
            audio_path,
            landmarks_path,
        }
    }

    #[test]
    fn index_and_load_n1_n2() {
        let dir = tempfile::tempdir().unwrap();
        let r = write_sample(dir.path(), "a", 10.0, SAMPLE_RATE, 250, vec![(0.0, 10.0)]);
        let idx = build_chunk_index(std::slice::from_ref(&r), dir.path(), 1).unwrap();
        let offsets: Vec<f64> = idx.entries.iter().map(|e| e.offset_s).collect();
        assert_eq!(offsets, vec![0.0, 4.0]);
        assert_eq!(idx.entries[1].chunk_id, "a:0:1");
        let (w, l) = load_chunk(&idx.entries[1], 1).unwrap();
        assert_eq!((w.len(), l.frames()), (65536, 100));
        // Frame 100 is the first landmark frame of the second chunk.
        assert_eq!(l.point(0, 0)[0], 100.0);
        assert_eq!(w.samples[0], read_wav(&dir.path().join(&r.audio_path)).unwrap().samples[65536]);

        let idx2 = build_chunk_index(&[r], dir.path(), 2).unwrap();
        assert_eq!(idx2.len(), 1);
        let (w, l) = load_chunk(&idx2.entries[0], 2).unwrap();
        assert_eq!((w.len(), l.frames()), (131072, 200));
    }

    #[test]
    fn resampled_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let r = write_sample(dir.path(), "b", 4.2, 8000, 105, vec![(0.0, 4.2)]);
        let idx = build_chunk_index(&[r], dir.path(), 1).unwrap();
        let (w, l) = load_chunk(&idx.entries[0], 1).unwrap();
        assert_eq!((w.len(), w.sample_rate, l.frames()), (65536, SAMPLE_RATE, 100));
    }

    #[test]
    fn duration_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let r = write_sample(dir.path(), "c", 6.0, SAMPLE_RATE, 140, vec![(0.0, 5.0)]);
        assert!(matches!(
            build_chunk_index(&[r], dir.path(), 1),
            Err(DatasetError::DurationMismatch { .. })
        ));
        let r = write_sample(dir.path(), "d", 6.0, SAMPLE_RATE, 150, vec![(0.0, 7.0)]);
        assert!(matches!(
            build_chunk_index(&[r], dir.path(), 1),
            Err(DatasetError::SegmentOutOfRange { .. })
        ));
    }

    #[test]
    fn corrupt_landmarks_name_path() {
        let dir = tempfile::tempdir().unwrap();
        let r = write_sample(dir.path(), "e", 4.0, SAMPLE_RATE, 100, vec![(0.0, 4.0)]);
        let idx = build_chunk_index(std::slice::from_ref(&r), dir.path(), 1).unwrap();
        let p = dir.path().join(&r.landmarks_path);
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        std::fs::write(&p, bytes).unwrap();
        let err = load_chunk(&idx.entries[0], 1).unwrap_err().to_string();
        assert!(err.contains("e.almk"), "{err}");
    }

    #[test]
    fn silent_accompaniment_windows_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let mut samples = vec![0.0; 3 * 65536];
        for (i, s) in samples.iter_mut().enumerate().take(65536) {
            *s = (i as f64 * 0.05).sin() * 0.3;
        }
        samples[2 * 65536 + 10] = 0.5;
        write_wav(&dir.path().join("acc.wav"), &Waveform::new(samples, SAMPLE_RATE).unwrap(), WavEncoding::Float32).unwrap();
        let rec = AccompRecord {
            sample_id: "acc".into(),
            category: "drum".into(),
            audio_path: "acc.wav".into(),
        };
        let chunks = build_accomp_index(&[rec], dir.path(), 1).unwrap();
        let ids: Vec<&str> = chunks.iter().map(|c| c.id.as_str()).collect();
        // 0.5 / sqrt(65536) ≈ 2e-3 keeps the third window.
        assert_eq!(ids, vec!["acc:0", "acc:2"]);
        assert_eq!(load_accomp_chunk(&chunks[1], 1).unwrap().samples[10], 0.5);
    }
}
