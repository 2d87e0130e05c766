//! Core value types: motion and conditioning sequences, chunk layouts, and
//! per-token noise assignments.
//!
//! Conventions used throughout the crate:
//! - frames are stored row-major, one row per frame;
//! - chunk *bounds* are 1-based inclusive `(start, end)` pairs, matching how
//!   they are reported and logged, while helper accessors expose the 0-based
//!   half-open ranges used for slicing;
//! - diffusion timesteps run from 0 (clean) to `K` (fully noised).

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Frames-per-second expressed as a rational so integer rates like 25 and
/// fractional ones like 30000/1001 both round-trip exactly through file
/// headers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameRate {
    pub num: u32,
    pub den: u32,
}

impl FrameRate {
    pub fn new(num: u32, den: u32) -> Result<Self> {
        if num == 0 || den == 0 {
            return Err(Error::invalid(format!(
                "frame rate must be positive, got {num}/{den}"
            )));
        }
        Ok(FrameRate { num, den })
    }

    pub fn as_f64(&self) -> f64 {
        f64::from(self.num) / f64::from(self.den)
    }
}

impl Default for FrameRate {
    fn default() -> Self {
        FrameRate { num: 25, den: 1 }
    }
}

fn check_matrix(data: &Array2<f64>, what: &str) -> Result<()> {
    let (t, d) = data.dim();
    if t == 0 || d == 0 {
        return Err(Error::invalid(format!(
            "{what} must be non-empty, got shape {t}x{d}"
        )));
    }
    if let Some(((r, c), v)) = data.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{what}[{r},{c}] = {v}")));
    }
    Ok(())
}

/// A motion-latent sequence: `T` frames of `d`-dimensional latents plus the
/// frame rate they were sampled at.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    data: Array2<f64>,
    frame_rate: FrameRate,
}

impl MotionSequence {
    pub fn new(data: Array2<f64>, frame_rate: FrameRate) -> Result<Self> {
        check_matrix(&data, "motion sequence")?;
        Ok(MotionSequence { data, frame_rate })
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array2<f64> {
        self.data
    }

    pub fn frame_rate(&self) -> FrameRate {
        self.frame_rate
    }

    /// Number of frames `T`.
    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false // T >= 1 by construction
    }

    /// Latent dimensionality `d`.
    pub fn dim(&self) -> usize {
        self.data.ncols()
    }
}

/// A frame-aligned conditioning feature stream (`T` frames by `d_a` features).
/// Alignment with a motion sequence means equal `T` at the same frame rate.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningSequence {
    data: Array2<f64>,
    frame_rate: FrameRate,
}

impl ConditioningSequence {
    pub fn new(data: Array2<f64>, frame_rate: FrameRate) -> Result<Self> {
        check_matrix(&data, "conditioning sequence")?;
        Ok(ConditioningSequence { data, frame_rate })
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array2<f64> {
        self.data
    }

    pub fn frame_rate(&self) -> FrameRate {
        self.frame_rate
    }

    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }
}

/// Partition of frames `1..=total_frames` into consecutive chunks of
/// `chunk_size` frames; only the final chunk may be shorter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkLayout {
    total_frames: usize,
    chunk_size: usize,
    /// 1-based inclusive `(start, end)` per chunk.
    bounds: Vec<(usize, usize)>,
}

/// Tile `1..=total_frames` into chunks. Rejects zero frame counts and zero
/// chunk sizes (negative values are unrepresentable in the unsigned types).
pub fn build_chunk_layout(total_frames: usize, chunk_size: usize) -> Result<ChunkLayout> {
    if total_frames == 0 {
        return Err(Error::invalid("chunk layout needs at least one frame"));
    }
    if chunk_size == 0 {
        return Err(Error::invalid("chunk size must be at least one frame"));
    }
    let mut bounds = Vec::with_capacity(total_frames.div_ceil(chunk_size));
    let mut start = 1usize;
    while start <= total_frames {
        let end = (start + chunk_size - 1).min(total_frames);
        bounds.push((start, end));
        start = end + 1;
    }
    Ok(ChunkLayout {
        total_frames,
        chunk_size,
        bounds,
    })
}

impl ChunkLayout {
    pub fn total_frames(&self) -> usize {
        self.total_frames
    }

    pub fn chunk_size(&self) -> usize {
        self.chunk_size
    }

    /// 1-based inclusive bounds, one `(start, end)` per chunk.
    pub fn bounds(&self) -> &[(usize, usize)] {
        &self.bounds
    }

    pub fn num_chunks(&self) -> usize {
        self.bounds.len()
    }

    /// 0-based half-open frame range of chunk `c`, for slicing.
    pub fn range0(&self, c: usize) -> std::ops::Range<usize> {
        let (s, e) = self.bounds[c];
        (s - 1)..e
    }

    /// Frame count of chunk `c`.
    pub fn chunk_len(&self, c: usize) -> usize {
        let (s, e) = self.bounds[c];
        e - s + 1
    }

    /// Chunk index containing 0-based frame `t0`.
    pub fn chunk_of_frame0(&self, t0: usize) -> usize {
        debug_assert!(t0 < self.total_frames);
        (t0 / self.chunk_size).min(self.bounds.len() - 1)
    }
}

/// One diffusion timestep per frame of a sequence; values in `0..=K`.
///
/// Carries only the timesteps. Loss masking (which frames a training loss is
/// evaluated on) is a property of the training mode, returned alongside the
/// assignment by the sampler in [`crate::training`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NoiseAssignment {
    pub timesteps: Vec<usize>,
}

impl NoiseAssignment {
    /// Same timestep `k` for every one of `t` frames.
    pub fn uniform(k: usize, t: usize) -> Self {
        NoiseAssignment {
            timesteps: vec![k; t],
        }
    }

    pub fn len(&self) -> usize {
        self.timesteps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timesteps.is_empty()
    }

    /// Check the assignment covers exactly `t` frames with timesteps in
    /// `0..=max_step`.
    pub fn validate(&self, t: usize, max_step: usize) -> Result<()> {
        if self.timesteps.len() != t {
            return Err(Error::invalid(format!(
                "noise assignment covers {} frames, sequence has {t}",
                self.timesteps.len()
            )));
        }
        if let Some(&k) = self.timesteps.iter().find(|&&k| k > max_step) {
            return Err(Error::invalid(format!(
                "noise assignment timestep {k} exceeds schedule maximum {max_step}"
            )));
        }
        Ok(())
    }
}
