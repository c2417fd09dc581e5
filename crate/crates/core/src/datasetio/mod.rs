//! Manifest-driven dataset layer: sample records and split rules, chunk
//! tiling of annotated segments, chunk loading, and synthetic fixtures.
//!
//! A dataset directory holds a JSON-lines voice manifest and, next to it, an
//! `accompaniment.jsonl` pool. Paths inside both are relative to the
//! manifest's directory.

mod chunks;
mod fixtures;

pub use chunks::{
    build_accomp_index, build_chunk_index, load_accomp_chunk, load_chunk, AccompChunk, ChunkEntry, ChunkIndex,
};
pub use fixtures::{frame_rms, generate_fixtures, mouth_opening, pearson, FixtureSpec, ACCOMP_CATEGORIES};

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::DspError;
use crate::visualnet::VisualError;

pub const ACCOMP_MANIFEST: &str = "accompaniment.jsonl";
/// Allowed disagreement between audio and landmark durations.
pub const DURATION_TOLERANCE_S: f64 = 0.05;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Schema { path: PathBuf, line: usize, msg: String },
    #[error("{path}:{line}: field '{field}': {msg}")]
    Field {
        path: PathBuf,
        line: usize,
        field: &'static str,
        msg: String,
    },
    #[error("{path}:{line}: duplicate sample_id '{id}'")]
    Duplicate { path: PathBuf, line: usize, id: String },
    #[error("singer '{0}' appears in both train/val and test_unseen_unheard")]
    Leakage(String),
    #[error("sample '{id}': audio lasts {audio_s:.3} s but landmarks cover {video_s:.3} s")]
    DurationMismatch { id: String, audio_s: f64, video_s: f64 },
    #[error("sample '{id}': segment {segment} ends at {end_s:.3} s beyond the {available_s:.3} s recording")]
    SegmentOutOfRange {
        id: String,
        segment: usize,
        end_s: f64,
        available_s: f64,
    },
    #[error("short read for '{id}' at {offset_s:.3} s: {msg}")]
    ShortRead { id: String, offset_s: f64, msg: String },
    #[error("invalid fixture spec: {0}")]
    Fixture(String),
    #[error("unknown sample '{0}'")]
    UnknownSample(String),
    #[error(transparent)]
    Audio(#[from] DspError),
    #[error(transparent)]
    Landmarks(#[from] VisualError),
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Language {
    English,
    Spanish,
    Hindi,
    Others,
}

impl Language {
    pub const ALL: [Language; 4] = [Language::English, Language::Spanish, Language::Hindi, Language::Others];

    pub fn as_str(self) -> &'static str {
        match self {
            Language::English => "English",
            Language::Spanish => "Spanish",
            Language::Hindi => "Hindi",
            Language::Others => "Others",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Male,
    Female,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    TestSeenHeard,
    TestUnseenUnheard,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Val, Split::TestSeenHeard, Split::TestUnseenUnheard];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::TestSeenHeard => "test_seen_heard",
            Split::TestUnseenUnheard => "test_unseen_unheard",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.as_str() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub sample_id: String,
    pub language: Language,
    pub gender: Gender,
    pub split: Split,
    pub singer_id: String,
    /// `(start_s, end_s)` of each annotated segment.
    pub segments: Vec<(f64, f64)>,
    pub audio_path: String,
    pub landmarks_path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AccompRecord {
    pub sample_id: String,
    pub category: String,
    pub audio_path: String,
}

fn parse_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<(usize, T)>, DatasetError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(line).map_err(|e| DatasetError::Schema {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push((i + 1, rec));
    }
    Ok(out)
}

fn validate_record(path: &Path, line: usize, r: &SampleRecord) -> Result<(), DatasetError> {
    let field = |field, msg: String| DatasetError::Field {
        path: path.to_path_buf(),
        line,
        field,
        msg,
    };
    if r.sample_id.is_empty() {
        return Err(field("sample_id", "must be non-empty".into()));
    }
    if r.singer_id.is_empty() {
        return Err(field("singer_id", "must be non-empty".into()));
    }
    if r.segments.is_empty() {
        return Err(field("segments", "at least one segment is required".into()));
    }
    let mut prev_end = f64::NEG_INFINITY;
    for (k, &(start, end)) in r.segments.iter().enumerate() {
        if !start.is_finite() || !end.is_finite() || start < 0.0 {
            return Err(field("segments", format!("segment {k} has invalid bounds ({start}, {end})")));
        }
        if end <= start {
            return Err(field("segments", format!("segment {k}: end_s {end} must exceed start_s {start}")));
        }
        if start < prev_end {
            return Err(field("segments", format!("segment {k} overlaps or precedes segment {}", k - 1)));
        }
        prev_end = end;
    }
    if r.audio_path.is_empty() {
        return Err(field("audio_path", "must be non-empty".into()));
    }
    if r.landmarks_path.is_empty() {
        return Err(field("landmarks_path", "must be non-empty".into()));
    }
    Ok(())
}

/// Reads and validates a JSON-lines voice manifest.
pub fn load_manifest(path: &Path) -> Result<Vec<SampleRecord>, DatasetError> {
    let parsed = parse_lines::<SampleRecord>(path)?;
    let mut seen = BTreeSet::new();
    for (line, r) in &parsed {
        validate_record(path, *line, r)?;
        if !seen.insert(r.sample_id.clone()) {
            return Err(DatasetError::Duplicate {
                path: path.to_path_buf(),
                line: *line,
                id: r.sample_id.clone(),
            });
        }
    }
    let records: Vec<SampleRecord> = parsed.into_iter().map(|(_, r)| r).collect();
    check_leakage(&records)?;
    Ok(records)
}

/// Singers of the unseen-unheard split must not occur in train or val.
pub fn check_leakage(records: &[SampleRecord]) -> Result<(), DatasetError> {
    let seen: BTreeSet<&str> = records
        .iter()
        .filter(|r| matches!(r.split, Split::Train | Split::Val))
        .map(|r| r.singer_id.as_str())
        .collect();
    match records
        .iter()
        .filter(|r| r.split == Split::TestUnseenUnheard)
        .find(|r| seen.contains(r.singer_id.as_str()))
    {
        Some(r) => Err(DatasetError::Leakage(r.singer_id.clone())),
        None => Ok(()),
    }
}

pub fn load_accomp_manifest(path: &Path) -> Result<Vec<AccompRecord>, DatasetError> {
    let parsed = parse_lines::<AccompRecord>(path)?;
    let mut seen = BTreeSet::new();
    for (line, r) in &parsed {
        for (field, value) in [("sample_id", &r.sample_id), ("category", &r.category), ("audio_path", &r.audio_path)] {
            if value.is_empty() {
                return Err(DatasetError::Field {
                    path: path.to_path_buf(),
                    line: *line,
                    field,
                    msg: "must be non-empty".into(),
                });
            }
        }
        if !seen.insert(r.sample_id.clone()) {
            return Err(DatasetError::Duplicate {
                path: path.to_path_buf(),
                line: *line,
                id: r.sample_id.clone(),
            });
        }
    }
    Ok(parsed.into_iter().map(|(_, r)| r).collect())
}

fn write_lines<T: Serialize>(path: &Path, items: &[T]) -> Result<(), DatasetError> {
    let mut text = String::new();
    for item in items {
        text.push_str(&serde_json::to_string(item).expect("record serializes"));
        text.push('\n');
    }
    fs::write(path, text).map_err(io_err(path))
}

pub fn write_manifest(path: &Path, records: &[SampleRecord]) -> Result<(), DatasetError> {
    write_lines(path, records)
}

pub fn write_accomp_manifest(path: &Path, records: &[AccompRecord]) -> Result<(), DatasetError> {
    write_lines(path, records)
}

/// A voice manifest, its accompaniment pool and the directory their paths
/// are relative to.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub records: Vec<SampleRecord>,
    pub accompaniments: Vec<AccompRecord>,
}

impl Dataset {
    /// Loads `manifest` and the accompaniment manifest (`accomp`, or
    /// `accompaniment.jsonl` beside the manifest).
    pub fn open(manifest: &Path, accomp: Option<&Path>) -> Result<Self, DatasetError> {
        let root = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
        let records = load_manifest(manifest)?;
        let accomp_path = accomp.map(Path::to_path_buf).unwrap_or_else(|| root.join(ACCOMP_MANIFEST));
        let accompaniments = load_accomp_manifest(&accomp_path)?;
        Ok(Self {
            root,
            records,
            accompaniments,
        })
    }

    pub fn record(&self, sample_id: &str) -> Result<&SampleRecord, DatasetError> {
        self.records
            .iter()
            .find(|r| r.sample_id == sample_id)
            .ok_or_else(|| DatasetError::UnknownSample(sample_id.into()))
    }

    pub fn split(&self, split: Split) -> Vec<&SampleRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn resolve(&self, relative: &str) -> PathBuf {
        self.root.join(relative)
    }

    /// Summary counts used by `dataset validate`.
    pub fn summary(&self) -> DatasetSummary {
        let mut per_split = BTreeMap::new();
        let mut per_language = BTreeMap::new();
        for r in &self.records {
            *per_split.entry(r.split.as_str().to_string()).or_insert(0) += 1;
            *per_language.entry(r.language.as_str().to_string()).or_insert(0) += 1;
        }
        let singers: BTreeSet<&str> = self.records.iter().map(|r| r.singer_id.as_str()).collect();
        let categories: BTreeSet<&str> = self.accompaniments.iter().map(|a| a.category.as_str()).collect();
        DatasetSummary {
            samples: self.records.len(),
            singers: singers.len(),
            per_split,
            per_language,
            accompaniments: self.accompaniments.len(),
            accomp_categories: categories.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub samples: usize,
    pub singers: usize,
    pub per_split: BTreeMap<String, usize>,
    pub per_language: BTreeMap<String, usize>,
    pub accompaniments: usize,
    pub accomp_categories: usize,
}
