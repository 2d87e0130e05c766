//! Autoregressive chunk-by-chunk generation: DDIM sampling of each chunk,
//! classifier-free guidance, and graded noise on the rolling history window.
//!
//! Each chunk is denoised from pure noise while already-generated history
//! frames are shown to the denoiser *re-noised* at scheduler-controlled
//! levels (oldest = noisiest). That matches how the network was trained —
//! it never saw a perfectly clean long history during diffusion-forcing
//! training — and is the mechanism that keeps long free-running rollouts
//! from drifting.

use ndarray::{s, Array2};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffusion::{cfg_combine, ddim_step, diffuse};
use crate::error::{Error, Result};
use crate::model::{build_mask, Denoiser};
use crate::schedule::DiffusionSchedule;
use crate::training::derive_rng;
use crate::types::{build_chunk_layout, ConditioningSequence, MotionSequence, NoiseAssignment};

/// How noisy each history frame is presented during generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HistoryKind {
    /// Levels ramp linearly from `k_max` on the oldest frame to 0 on the
    /// newest.
    LinearRamp,
    /// Every history frame at one constant level.
    Vanilla { level: usize },
    /// History split into contiguous groups; oldest group at `k_max`,
    /// newest at 0, evenly spaced staircase in between.
    Fractional { groups: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryScheduler {
    pub kind: HistoryKind,
    /// Largest level the scheduler may emit; must not exceed the diffusion
    /// schedule's step count.
    pub k_max: usize,
}

impl HistoryScheduler {
    pub fn linear_ramp(k_max: usize) -> Self {
        HistoryScheduler {
            kind: HistoryKind::LinearRamp,
            k_max,
        }
    }

    /// Constant-level scheduler at the conventional default, `k_max / 2`.
    pub fn vanilla(k_max: usize) -> Self {
        HistoryScheduler {
            kind: HistoryKind::Vanilla { level: k_max / 2 },
            k_max,
        }
    }

    pub fn vanilla_at(k_max: usize, level: usize) -> Self {
        HistoryScheduler {
            kind: HistoryKind::Vanilla { level },
            k_max,
        }
    }

    pub fn fractional(k_max: usize, groups: usize) -> Self {
        HistoryScheduler {
            kind: HistoryKind::Fractional { groups },
            k_max,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            HistoryKind::Vanilla { level } => {
                if level > self.k_max {
                    return Err(Error::invalid(format!(
                        "constant history level {level} exceeds k_max {}",
                        self.k_max
                    )));
                }
            }
            HistoryKind::Fractional { groups } => {
                if groups == 0 {
                    return Err(Error::invalid("fractional scheduler needs at least 1 group"));
                }
            }
            HistoryKind::LinearRamp => {}
        }
        Ok(())
    }

    /// Noise level for each of `h` history frames, index 0 = oldest frame.
    ///
    /// Levels are monotonically non-increasing toward the newest frame. For
    /// the linear ramp the newest frame is always at 0 (a single frame is
    /// `[0]`). The fractional staircase puts its length remainder on the
    /// oldest groups; with a single group it degenerates to all-zero.
    pub fn history_levels(&self, h: usize) -> Vec<usize> {
        if h == 0 {
            return Vec::new();
        }
        match self.kind {
            HistoryKind::LinearRamp => {
                if h == 1 {
                    return vec![0];
                }
                (0..h)
                    .map(|p| {
                        let frac = (h - 1 - p) as f64 / (h - 1) as f64;
                        (self.k_max as f64 * frac).round() as usize
                    })
                    .collect()
            }
            HistoryKind::Vanilla { level } => vec![level; h],
            HistoryKind::Fractional { groups } => {
                let g = groups;
                let base = h / g;
                let rem = h % g;
                let mut levels = Vec::with_capacity(h);
                for gi in 0..g {
                    let size = base + usize::from(gi < rem);
                    let level = if g == 1 {
                        0
                    } else {
                        let frac = (g - 1 - gi) as f64 / (g - 1) as f64;
                        (self.k_max as f64 * frac).round() as usize
                    };
                    levels.extend(std::iter::repeat(level).take(size));
                }
                levels
            }
        }
    }
}

/// Evenly spaced timestep grid for DDIM sampling: `steps + 1` points from
/// `num_steps` down to 0, rounded to integers and deduplicated, so the
/// result is strictly decreasing and always starts at `num_steps` and ends
/// at 0.
pub fn ddim_grid(num_steps: usize, steps: usize) -> Vec<usize> {
    assert!(num_steps >= 1 && steps >= 1);
    let mut grid = Vec::with_capacity(steps + 1);
    for j in (0..=steps).rev() {
        let k = (j as f64 * num_steps as f64 / steps as f64).round() as usize;
        if grid.last() != Some(&k) {
            grid.push(k);
        }
    }
    grid
}

/// First frame of the rolling window used when generating the chunk that
/// starts at `next_start` with `cur_len` frames: the largest chunk-aligned
/// index keeping the window within `max_context` frames. Whole oldest
/// chunks are evicted; the window never starts past the chunk itself.
pub fn history_window_start(
    next_start: usize,
    cur_len: usize,
    chunk_size: usize,
    max_context: usize,
) -> usize {
    let end = next_start + cur_len;
    let min_start = end.saturating_sub(max_context);
    let aligned = min_start.div_ceil(chunk_size) * chunk_size;
    aligned.min(next_start)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    pub ddim_steps: usize,
    /// Guidance strength; 1.0 disables guidance (single conditional pass).
    pub cfg_scale: f64,
    pub scheduler: HistoryScheduler,
    pub seed: u64,
    /// Chunk length override; defaults to the model's training chunk size.
    pub chunk_size: Option<usize>,
    /// Rolling-window cap override; defaults to (and may not exceed) the
    /// model's maximum context.
    pub max_context: Option<usize>,
}

impl InferenceConfig {
    /// Defaults for a schedule with `num_steps` diffusion steps: 50 DDIM
    /// steps, guidance 3, linear-ramp history noise up to `num_steps`.
    pub fn for_steps(num_steps: usize) -> Self {
        InferenceConfig {
            ddim_steps: 50,
            cfg_scale: 3.0,
            scheduler: HistoryScheduler::linear_ramp(num_steps),
            seed: 0,
            chunk_size: None,
            max_context: None,
        }
    }

    pub fn validate(&self, schedule: &DiffusionSchedule) -> Result<()> {
        if self.ddim_steps == 0 {
            return Err(Error::invalid("ddim_steps must be at least 1"));
        }
        if !self.cfg_scale.is_finite() || self.cfg_scale < 0.0 {
            return Err(Error::invalid(format!(
                "cfg_scale must be finite and non-negative, got {}",
                self.cfg_scale
            )));
        }
        self.scheduler.validate()?;
        if self.scheduler.k_max > schedule.num_steps() {
            return Err(Error::invalid(format!(
                "history scheduler k_max {} exceeds the schedule's {} steps",
                self.scheduler.k_max,
                schedule.num_steps()
            )));
        }
        if self.chunk_size == Some(0) {
            return Err(Error::invalid("chunk_size override must be positive"));
        }
        Ok(())
    }
}

/// Denoise one chunk of `cur_len` frames that follows `history` (clean,
/// whole chunks, possibly empty). `cond` must cover history plus the chunk,
/// frame for frame.
///
/// The history is forward-diffused *once* to the scheduler's levels with
/// noise drawn once and held fixed; every DDIM step sees those same noisy
/// history rows while only the current chunk's rows are stepped. With
/// `cfg_scale != 1` each step runs a conditional and a null-conditioned
/// pass and combines them; at exactly 1 the combination degenerates to the
/// conditional output, so the null pass is skipped.
#[allow(clippy::too_many_arguments)]
pub fn generate_chunk(
    model: &Denoiser,
    schedule: &DiffusionSchedule,
    history: Option<&MotionSequence>,
    cond: &ConditioningSequence,
    scheduler: &HistoryScheduler,
    cfg_scale: f64,
    ddim_steps: usize,
    rng: &mut ChaCha20Rng,
) -> Result<MotionSequence> {
    let cfg = model.config();
    let th = history.map_or(0, |h| h.len());
    if cond.len() <= th {
        return Err(Error::invalid(format!(
            "conditioning covers {} frames, not longer than the {th}-frame history",
            cond.len()
        )));
    }
    let cur_len = cond.len() - th;
    if cur_len > cfg.chunk_size {
        return Err(Error::invalid(format!(
            "current chunk of {cur_len} frames exceeds chunk size {}",
            cfg.chunk_size
        )));
    }
    let hist_data = history.map(|h| h.data().to_owned()).unwrap_or_else(|| Array2::zeros((0, cfg.d_latent)));
    let chunk = generate_chunk_core(
        model,
        schedule,
        &hist_data,
        cond.data(),
        cur_len,
        cfg.chunk_size,
        cfg.max_context,
        scheduler,
        cfg_scale,
        ddim_steps,
        rng,
    )?;
    MotionSequence::new(chunk, cond.frame_rate())
}

#[allow(clippy::too_many_arguments)]
fn generate_chunk_core(
    model: &Denoiser,
    schedule: &DiffusionSchedule,
    history: &Array2<f64>,
    cond_window: &Array2<f64>,
    cur_len: usize,
    chunk_size: usize,
    max_context: usize,
    scheduler: &HistoryScheduler,
    cfg_scale: f64,
    ddim_steps: usize,
    rng: &mut ChaCha20Rng,
) -> Result<Array2<f64>> {
    let cfg = model.config();
    let th = history.nrows();
    let t = th + cur_len;
    if th % chunk_size != 0 {
        return Err(Error::invalid(format!(
            "history of {th} frames is not a whole number of {chunk_size}-frame chunks"
        )));
    }
    if t > max_context {
        return Err(Error::invalid(format!(
            "window of {t} frames overflows the {max_context}-frame context"
        )));
    }
    if history.ncols() != cfg.d_latent {
        return Err(Error::invalid(format!(
            "history has {} channels, model expects {}",
            history.ncols(),
            cfg.d_latent
        )));
    }
    if cond_window.nrows() != t || cond_window.ncols() != cfg.d_cond {
        return Err(Error::invalid(format!(
            "conditioning window must be {t} x {}, got {} x {}",
            cfg.d_cond,
            cond_window.nrows(),
            cond_window.ncols()
        )));
    }

    let layout = build_chunk_layout(t, chunk_size)?;
    let mask = build_mask(cfg.mask, &layout);
    let levels = scheduler.history_levels(th);

    // corrupt the history once; the noise stays fixed for the whole chunk
    let z_hist = if th > 0 {
        let mut eps = Array2::zeros((th, cfg.d_latent));
        for v in eps.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        diffuse(
            history,
            &NoiseAssignment {
                timesteps: levels.clone(),
            },
            &eps,
            schedule,
        )?
    } else {
        Array2::zeros((0, cfg.d_latent))
    };

    let mut z_cur = Array2::zeros((cur_len, cfg.d_latent));
    for v in z_cur.iter_mut() {
        *v = rng.sample(StandardNormal);
    }

    let grid = ddim_grid(schedule.num_steps(), ddim_steps);
    let mut z_full = Array2::zeros((t, cfg.d_latent));
    if th > 0 {
        z_full.slice_mut(s![..th, ..]).assign(&z_hist);
    }
    let mut timesteps = levels;
    timesteps.resize(t, 0);

    for w in grid.windows(2) {
        let (k_from, k_to) = (w[0], w[1]);
        for ts in timesteps[th..].iter_mut() {
            *ts = k_from;
        }
        z_full.slice_mut(s![th.., ..]).assign(&z_cur);

        let v_cond = model.forward(&z_full, &timesteps, Some(cond_window), &mask)?;
        let v = if cfg_scale == 1.0 {
            v_cond
        } else {
            let v_null = model.forward(&z_full, &timesteps, None, &mask)?;
            cfg_combine(&v_cond, &v_null, cfg_scale)?
        };
        let v_cur = v.slice(s![th.., ..]).to_owned();
        z_cur = ddim_step(&z_cur, &v_cur, k_from, k_to, schedule)?;
    }

    if let Some(bad) = z_cur.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "generated chunk contains non-finite value {bad}"
        )));
    }
    Ok(z_cur)
}

/// Generate a motion sequence of exactly `cond.len()` frames, chunk by
/// chunk, maintaining a rolling history window: once history plus the next
/// chunk would overflow the context, the oldest whole chunks are evicted.
///
/// Deterministic in `(config.seed, inputs)`: each chunk uses its own
/// stream derived from the seed and the chunk index, so a given chunk's
/// output does not depend on how many chunks follow it.
pub fn generate_sequence(
    model: &Denoiser,
    schedule: &DiffusionSchedule,
    cond: &ConditioningSequence,
    config: &InferenceConfig,
) -> Result<MotionSequence> {
    config.validate(schedule)?;
    let cfg = model.config();
    if cond.dim() != cfg.d_cond {
        return Err(Error::invalid(format!(
            "conditioning has {} channels, model expects {}",
            cond.dim(),
            cfg.d_cond
        )));
    }
    let chunk_size = config.chunk_size.unwrap_or(cfg.chunk_size);
    let max_context = config.max_context.unwrap_or(cfg.max_context);
    if max_context < chunk_size {
        return Err(Error::invalid(format!(
            "max_context {max_context} smaller than chunk size {chunk_size}"
        )));
    }
    if max_context > cfg.max_context {
        return Err(Error::invalid(format!(
            "max_context {max_context} exceeds the {} frames the model was built for",
            cfg.max_context
        )));
    }

    let t_total = cond.len();
    let layout = build_chunk_layout(t_total, chunk_size)?;
    let mut out = Array2::zeros((t_total, cfg.d_latent));

    for c in 0..layout.num_chunks() {
        let r = layout.range0(c);
        let cur_len = r.len();
        let win_start = history_window_start(r.start, cur_len, chunk_size, max_context);
        let mut rng = derive_rng(config.seed, &format!("gen/chunk/{c}"));
        let hist = out.slice(s![win_start..r.start, ..]).to_owned();
        let cond_win = cond.data().slice(s![win_start..r.end, ..]).to_owned();
        let chunk = generate_chunk_core(
            model,
            schedule,
            &hist,
            &cond_win,
            cur_len,
            chunk_size,
            max_context,
            &config.scheduler,
            config.cfg_scale,
            config.ddim_steps,
            &mut rng,
        )?;
        out.slice_mut(s![r.start..r.end, ..]).assign(&chunk);
    }

    MotionSequence::new(out, cond.frame_rate())
}
