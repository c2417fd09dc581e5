//! Landmark files: the `ALMK` binary container and a JSON alternative.
//!
//! Binary layout (little-endian): `"ALMK" | u32 version (= 1) | u32 frames |
//! frames × 68 × [x, y] f32`. JSON is either `[[[x, y] × 68] × frames]` or
//! one flat array of 136 numbers per frame.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use serde_json::Value;

use super::{LandmarkSequence, VisualError, NUM_LANDMARKS};

pub const MAGIC: &[u8; 4] = b"ALMK";
pub const VERSION: u32 = 1;

fn fmt_err(path: &Path, msg: impl std::fmt::Display) -> VisualError {
    VisualError::Format(format!("{}: {msg}", path.display()))
}

/// Reads a landmark clip, detecting the format from the leading bytes.
pub fn read_landmarks(path: &Path) -> Result<LandmarkSequence, VisualError> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(MAGIC) {
        parse_binary(&bytes).map_err(|e| fmt_err(path, e))
    } else {
        let text = std::str::from_utf8(&bytes).map_err(|_| fmt_err(path, "neither ALMK binary nor UTF-8 JSON"))?;
        parse_landmarks_json(text).map_err(|e| fmt_err(path, e))
    }
}

fn parse_binary(bytes: &[u8]) -> Result<LandmarkSequence, VisualError> {
    let mut r = Cursor::new(bytes);
    let truncated = |_| VisualError::Format("truncated ALMK file".into());
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated)?;
    let version = r.read_u32::<LE>().map_err(truncated)?;
    if version != VERSION {
        return Err(VisualError::Format(format!("unsupported ALMK version {version}")));
    }
    let frames = r.read_u32::<LE>().map_err(truncated)? as usize;
    let expected = frames * NUM_LANDMARKS * 2;
    if bytes.len() != 12 + expected * 4 {
        return Err(VisualError::Format(format!(
            "{frames} frames need {} payload bytes, found {}",
            expected * 4,
            bytes.len() - 12
        )));
    }
    let coords = (0..expected)
        .map(|_| r.read_f32::<LE>().map(f64::from))
        .collect::<Result<Vec<_>, _>>()
        .map_err(truncated)?;
    LandmarkSequence::new(frames, coords)
}

fn number(v: &Value) -> Result<f64, VisualError> {
    v.as_f64()
        .ok_or_else(|| VisualError::Format(format!("expected a number, found {v}")))
}

pub fn parse_landmarks_json(text: &str) -> Result<LandmarkSequence, VisualError> {
    let root: Value = serde_json::from_str(text).map_err(|e| VisualError::Format(format!("invalid JSON: {e}")))?;
    let frames = root
        .as_array()
        .ok_or_else(|| VisualError::Format("top level must be an array of frames".into()))?;
    let mut coords = Vec::with_capacity(frames.len() * NUM_LANDMARKS * 2);
    for (f, frame) in frames.iter().enumerate() {
        let items = frame
            .as_array()
            .ok_or_else(|| VisualError::Format(format!("frame {f} is not an array")))?;
        let nested = items.first().is_some_and(Value::is_array);
        if nested {
            if items.len() != NUM_LANDMARKS {
                return Err(VisualError::LandmarkCount {
                    expected: NUM_LANDMARKS,
                    actual: items.len(),
                });
            }
            for p in items {
                match p.as_array().map(Vec::as_slice) {
                    Some([x, y]) => {
                        coords.push(number(x)?);
                        coords.push(number(y)?);
                    }
                    _ => return Err(VisualError::Format(format!("frame {f}: points must be [x, y]"))),
                }
            }
        } else {
            if items.len() != NUM_LANDMARKS * 2 {
                return Err(VisualError::LandmarkCount {
                    expected: NUM_LANDMARKS,
                    actual: items.len() / 2,
                });
            }
            for v in items {
                coords.push(number(v)?);
            }
        }
    }
    LandmarkSequence::new(frames.len(), coords)
}

/// Writes a 68-point clip in the binary format.
pub fn write_landmarks(path: &Path, seq: &LandmarkSequence) -> Result<(), VisualError> {
    if seq.n_nodes() != NUM_LANDMARKS {
        return Err(VisualError::LandmarkCount {
            expected: NUM_LANDMARKS,
            actual: seq.n_nodes(),
        });
    }
    let mut buf = Vec::with_capacity(12 + seq.coords().len() * 4);
    buf.write_all(MAGIC)?;
    buf.write_u32::<LE>(VERSION)?;
    buf.write_u32::<LE>(seq.frames() as u32)?;
    for &v in seq.coords() {
        buf.write_f32::<LE>(v as f32)?;
    }
    fs::write(path, buf)?;
    Ok(())
}
