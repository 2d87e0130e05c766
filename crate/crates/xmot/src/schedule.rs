//! Noise schedules: the alpha-bar table indexed by diffusion timestep and the
//! per-step signal/noise coefficients derived from it.
//!
//! `alpha_bar[k]` is the squared signal retention after `k` corruption steps:
//! `alpha_bar[0] = 1` (clean), `alpha_bar[K] <= 1e-4` (indistinguishable from
//! pure noise). The table is strictly decreasing so every timestep has a
//! distinct signal-to-noise ratio.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Offset in the cosine recipe; keeps the first step's corruption non-zero.
const COSINE_OFFSET: f64 = 0.008;
/// Lower clip for raw alpha_bar values.
const ALPHA_BAR_FLOOR: f64 = 1e-5;
/// Relative decrement applied to break ties the floor clip creates, so the
/// table stays strictly decreasing.
const TIE_BREAK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleFamily {
    /// Squared-cosine decay; the default.
    Cosine,
    /// Straight line from 1 down to the floor, kept for ablations.
    Linear,
}

impl fmt::Display for ScheduleFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScheduleFamily::Cosine => write!(f, "cosine"),
            ScheduleFamily::Linear => write!(f, "linear"),
        }
    }
}

impl FromStr for ScheduleFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(ScheduleFamily::Cosine),
            "linear" => Ok(ScheduleFamily::Linear),
            other => Err(Error::Config(format!(
                "unknown schedule family {other:?}, expected \"cosine\" or \"linear\""
            ))),
        }
    }
}

/// Monotone alpha-bar table over timesteps `0..=K`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    family: ScheduleFamily,
    alpha_bar: Vec<f64>,
}

impl DiffusionSchedule {
    /// Wrap a raw table, enforcing every invariant. `alpha_bar.len()` is
    /// `K + 1`.
    pub fn from_alpha_bar(family: ScheduleFamily, alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.len() < 2 {
            return Err(Error::invalid(
                "schedule needs at least one step (alpha_bar length >= 2)",
            ));
        }
        if alpha_bar[0] != 1.0 {
            return Err(Error::invalid(format!(
                "alpha_bar[0] must be exactly 1, got {}",
                alpha_bar[0]
            )));
        }
        let last = *alpha_bar.last().unwrap();
        if !(last > 0.0 && last <= 1e-4) {
            return Err(Error::invalid(format!(
                "alpha_bar[K] must lie in (0, 1e-4], got {last}"
            )));
        }
        for (k, w) in alpha_bar.windows(2).enumerate() {
            if !w[1].is_finite() || w[1] <= 0.0 {
                return Err(Error::invalid(format!(
                    "alpha_bar[{}] must be finite and positive, got {}",
                    k + 1,
                    w[1]
                )));
            }
            if w[1] >= w[0] {
                return Err(Error::invalid(format!(
                    "alpha_bar must be strictly decreasing, violated at index {}",
                    k + 1
                )));
            }
        }
        Ok(DiffusionSchedule { family, alpha_bar })
    }

    pub fn family(&self) -> ScheduleFamily {
        self.family
    }

    /// Number of diffusion steps `K`; valid timesteps are `0..=K`.
    pub fn num_steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Signal and noise coefficients at timestep `k`:
    /// `(sqrt(alpha_bar[k]), sqrt(1 - alpha_bar[k]))`.
    ///
    /// Panics if `k > K`; assignments are validated at API boundaries, so an
    /// out-of-range timestep here is an internal bug.
    pub fn coeffs(&self, k: usize) -> (f64, f64) {
        let ab = self.alpha_bar[k];
        (ab.sqrt(), (1.0 - ab).sqrt())
    }
}

/// Build a schedule of `num_steps` steps from the given family.
pub fn make_schedule(family: ScheduleFamily, num_steps: usize) -> Result<DiffusionSchedule> {
    if num_steps == 0 {
        return Err(Error::invalid("schedule needs at least one step"));
    }
    let k_max = num_steps as f64;
    let mut alpha_bar: Vec<f64> = match family {
        ScheduleFamily::Cosine => {
            let warp = |u: f64| {
                let x = (u + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2;
                x.cos().powi(2)
            };
            let base = warp(0.0);
            (0..=num_steps)
                .map(|k| (warp(k as f64 / k_max) / base).clamp(ALPHA_BAR_FLOOR, 1.0))
                .collect()
        }
        ScheduleFamily::Linear => (0..=num_steps)
            .map(|k| 1.0 - (1.0 - ALPHA_BAR_FLOOR) * k as f64 / k_max)
            .collect(),
    };
    // Renormalize so the table starts at exactly 1 (the cosine ratio is 1 at
    // k=0 by construction, but make it bitwise so).
    let a0 = alpha_bar[0];
    for a in alpha_bar.iter_mut() {
        *a /= a0;
    }
    // The floor clip can flatten the tail into ties; lower each tied entry a
    // hair below its predecessor to restore strict decrease.
    for k in 1..alpha_bar.len() {
        if alpha_bar[k] >= alpha_bar[k - 1] {
            alpha_bar[k] = alpha_bar[k - 1] * (1.0 - TIE_BREAK);
        }
    }
    DiffusionSchedule::from_alpha_bar(family, alpha_bar)
}
