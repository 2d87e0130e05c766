//! Binary motion/conditioning files and the JSON-lines truth sidecar.
//!
//! Both binary kinds share one layout: 4 ASCII magic bytes (`XMOT` for
//! motion, `XCND` for conditioning), then five unsigned 32-bit
//! little-endian fields — version (currently 1), frame count `T`, channel
//! count `d`, frame-rate numerator, frame-rate denominator — a 24-byte
//! header, followed by `T*d` IEEE-754 binary32 little-endian values in
//! frame-major order. Bad magic, a truncated file, and an unsupported
//! version each surface as their own error.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::synthdata::FrameTruth;
use crate::types::{ConditioningSequence, FrameRate, MotionSequence};

pub const MOTION_MAGIC: [u8; 4] = *b"XMOT";
pub const COND_MAGIC: [u8; 4] = *b"XCND";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_BYTES: usize = 24;

fn write_matrix(path: &Path, magic: [u8; 4], data: &Array2<f64>, fr: FrameRate) -> Result<()> {
    let (t, d) = data.dim();
    let ctx = || format!("writing {}", path.display());
    if t > u32::MAX as usize || d > u32::MAX as usize {
        return Err(Error::invalid(format!(
            "matrix {t} x {d} exceeds the 32-bit header fields"
        )));
    }
    let mut buf = Vec::with_capacity(HEADER_BYTES + t * d * 4);
    buf.extend_from_slice(&magic);
    for field in [FORMAT_VERSION, t as u32, d as u32, fr.num, fr.den] {
        buf.extend_from_slice(&field.to_le_bytes());
    }
    for v in data.iter() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(ctx(), e))?;
    f.write_all(&buf).map_err(|e| Error::io(ctx(), e))?;
    Ok(())
}

fn read_matrix(path: &Path, expected_magic: [u8; 4]) -> Result<(Array2<f64>, FrameRate)> {
    let mut f = fs::File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;

    if bytes.len() < HEADER_BYTES {
        return Err(Error::Truncated {
            path: path.display().to_string(),
            needed: HEADER_BYTES,
            got: bytes.len(),
        });
    }
    let found: [u8; 4] = bytes[0..4].try_into().unwrap();
    if found != expected_magic {
        return Err(Error::BadMagic {
            path: path.display().to_string(),
            expected: expected_magic,
            found,
        });
    }
    let field = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let version = field(0);
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            path: path.display().to_string(),
            expected: FORMAT_VERSION,
            found: version,
        });
    }
    let t = field(1) as usize;
    let d = field(2) as usize;
    let fr = FrameRate::new(field(3), field(4)).map_err(|_| Error::InvalidHeader {
        path: path.display().to_string(),
        reason: format!("frame rate {}/{} is not valid", field(3), field(4)),
    })?;
    if t == 0 || d == 0 {
        return Err(Error::InvalidHeader {
            path: path.display().to_string(),
            reason: format!("empty matrix {t} x {d}"),
        });
    }
    let needed = HEADER_BYTES + t * d * 4;
    if bytes.len() < needed {
        return Err(Error::Truncated {
            path: path.display().to_string(),
            needed,
            got: bytes.len(),
        });
    }
    if bytes.len() > needed {
        return Err(Error::InvalidHeader {
            path: path.display().to_string(),
            reason: format!(
                "{} trailing bytes after the declared payload",
                bytes.len() - needed
            ),
        });
    }

    let mut data = Array2::zeros((t, d));
    for (i, v) in data.iter_mut().enumerate() {
        let off = HEADER_BYTES + 4 * i;
        *v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64;
    }
    Ok((data, fr))
}

pub fn write_motion(path: &Path, motion: &MotionSequence) -> Result<()> {
    write_matrix(path, MOTION_MAGIC, motion.data(), motion.frame_rate())
}

pub fn read_motion(path: &Path) -> Result<MotionSequence> {
    let (data, fr) = read_matrix(path, MOTION_MAGIC)?;
    MotionSequence::new(data, fr)
}

pub fn write_cond(path: &Path, cond: &ConditioningSequence) -> Result<()> {
    write_matrix(path, COND_MAGIC, cond.data(), cond.frame_rate())
}

pub fn read_cond(path: &Path) -> Result<ConditioningSequence> {
    let (data, fr) = read_matrix(path, COND_MAGIC)?;
    ConditioningSequence::new(data, fr)
}

/// Write one JSON object per frame: `{"frame":..,"regime":..,"envelope":..}`.
pub fn write_truth_jsonl(path: &Path, truth: &[FrameTruth]) -> Result<()> {
    let ctx = || format!("writing {}", path.display());
    let mut out = String::new();
    for frame in truth {
        let line = serde_json::to_string(frame).map_err(|e| Error::Json {
            context: ctx(),
            source: e,
        })?;
        out.push_str(&line);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(ctx(), e))
}

pub fn read_truth_jsonl(path: &Path) -> Result<Vec<FrameTruth>> {
    let ctx = || format!("reading {}", path.display());
    let text = fs::read_to_string(path).map_err(|e| Error::io(ctx(), e))?;
    let mut truth = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        truth.push(serde_json::from_str(line).map_err(|e| Error::Json {
            context: format!("{} line {}", ctx(), truth.len() + 1),
            source: e,
        })?);
    }
    Ok(truth)
}
