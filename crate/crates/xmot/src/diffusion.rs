//! Diffusion kernels in the v-prediction parameterization.
//!
//! With `(a, s) = (alpha_hat_k, sigma_k)` from the schedule, the algebra is:
//!
//! ```text
//! z_k   = a * z0 + s * eps            forward corruption
//! v     = a * eps - s * z0            regression target
//! z0^   = a * z_k - s * v^            reconstruction
//! eps^  = s * z_k + a * v^
//! z_k'  = a' * z0^ + s' * eps^        deterministic DDIM step to k' < k
//! ```
//!
//! Every function takes per-frame timesteps where the operation is defined
//! per row; the DDIM step is inherently a uniform-timestep move.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::schedule::DiffusionSchedule;
use crate::types::{MotionSequence, NoiseAssignment};

fn check_same_shape(a: &Array2<f64>, b: &Array2<f64>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::invalid(format!(
            "{what}: shape mismatch {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Corrupt each row `t` of `z0` to its assigned timestep using the paired
/// noise rows `eps`.
pub fn diffuse(
    z0: &Array2<f64>,
    assignment: &NoiseAssignment,
    eps: &Array2<f64>,
    schedule: &DiffusionSchedule,
) -> Result<Array2<f64>> {
    check_same_shape(z0, eps, "diffuse")?;
    assignment.validate(z0.nrows(), schedule.num_steps())?;
    let mut out = Array2::zeros(z0.raw_dim());
    for (t, &k) in assignment.timesteps.iter().enumerate() {
        let (a, s) = schedule.coeffs(k);
        let z_row = z0.row(t);
        let e_row = eps.row(t);
        let mut o_row = out.row_mut(t);
        for j in 0..z0.ncols() {
            o_row[j] = a * z_row[j] + s * e_row[j];
        }
    }
    Ok(out)
}

/// [`diffuse`] lifted to a whole motion sequence.
pub fn forward_diffuse(
    seq: &MotionSequence,
    assignment: &NoiseAssignment,
    eps: &Array2<f64>,
    schedule: &DiffusionSchedule,
) -> Result<MotionSequence> {
    let noised = diffuse(seq.data(), assignment, eps, schedule)?;
    MotionSequence::new(noised, seq.frame_rate())
}

/// The v-prediction regression target for each row at its assigned timestep.
pub fn v_target(
    z0: &Array2<f64>,
    eps: &Array2<f64>,
    assignment: &NoiseAssignment,
    schedule: &DiffusionSchedule,
) -> Result<Array2<f64>> {
    check_same_shape(z0, eps, "v_target")?;
    assignment.validate(z0.nrows(), schedule.num_steps())?;
    let mut out = Array2::zeros(z0.raw_dim());
    for (t, &k) in assignment.timesteps.iter().enumerate() {
        let (a, s) = schedule.coeffs(k);
        let z_row = z0.row(t);
        let e_row = eps.row(t);
        let mut o_row = out.row_mut(t);
        for j in 0..z0.ncols() {
            o_row[j] = a * e_row[j] - s * z_row[j];
        }
    }
    Ok(out)
}

/// Invert the corruption: recover `(z0_hat, eps_hat)` from a noised row and a
/// v prediction, per-row timesteps.
pub fn reconstruct(
    z_k: &Array2<f64>,
    v_hat: &Array2<f64>,
    assignment: &NoiseAssignment,
    schedule: &DiffusionSchedule,
) -> Result<(Array2<f64>, Array2<f64>)> {
    check_same_shape(z_k, v_hat, "reconstruct")?;
    assignment.validate(z_k.nrows(), schedule.num_steps())?;
    let mut z0_hat = Array2::zeros(z_k.raw_dim());
    let mut eps_hat = Array2::zeros(z_k.raw_dim());
    for (t, &k) in assignment.timesteps.iter().enumerate() {
        let (a, s) = schedule.coeffs(k);
        let z_row = z_k.row(t);
        let v_row = v_hat.row(t);
        let mut z0_row = z0_hat.row_mut(t);
        let mut ep_row = eps_hat.row_mut(t);
        for j in 0..z_k.ncols() {
            z0_row[j] = a * z_row[j] - s * v_row[j];
            ep_row[j] = s * z_row[j] + a * v_row[j];
        }
    }
    Ok((z0_hat, eps_hat))
}

/// One deterministic DDIM move of every row from timestep `k_from` down to
/// `k_to`: reconstruct `(z0_hat, eps_hat)` at `k_from`, then re-corrupt to
/// `k_to` with `eps_hat` held fixed.
pub fn ddim_step(
    z_k: &Array2<f64>,
    v_hat: &Array2<f64>,
    k_from: usize,
    k_to: usize,
    schedule: &DiffusionSchedule,
) -> Result<Array2<f64>> {
    check_same_shape(z_k, v_hat, "ddim_step")?;
    if k_from > schedule.num_steps() {
        return Err(Error::invalid(format!(
            "ddim_step: k_from {k_from} exceeds schedule maximum {}",
            schedule.num_steps()
        )));
    }
    if k_to >= k_from {
        return Err(Error::invalid(format!(
            "ddim_step must move toward clean: k_to {k_to} >= k_from {k_from}"
        )));
    }
    let (a_f, s_f) = schedule.coeffs(k_from);
    let (a_t, s_t) = schedule.coeffs(k_to);
    let mut out = Array2::zeros(z_k.raw_dim());
    for t in 0..z_k.nrows() {
        let z_row = z_k.row(t);
        let v_row = v_hat.row(t);
        let mut o_row = out.row_mut(t);
        for j in 0..z_k.ncols() {
            let z0_hat = a_f * z_row[j] - s_f * v_row[j];
            let eps_hat = s_f * z_row[j] + a_f * v_row[j];
            o_row[j] = a_t * z0_hat + s_t * eps_hat;
        }
    }
    Ok(out)
}

/// Classifier-free guidance in v-space:
/// `v = v_uncond + scale * (v_cond - v_uncond)`.
///
/// Scales 1 and 0 return the conditional / unconditional input bitwise, so
/// guidance-off paths are exactly single-pass sampling.
pub fn cfg_combine(
    v_cond: &Array2<f64>,
    v_uncond: &Array2<f64>,
    scale: f64,
) -> Result<Array2<f64>> {
    check_same_shape(v_cond, v_uncond, "cfg_combine")?;
    if !scale.is_finite() {
        return Err(Error::invalid(format!("cfg scale must be finite, got {scale}")));
    }
    if scale == 1.0 {
        return Ok(v_cond.clone());
    }
    if scale == 0.0 {
        return Ok(v_uncond.clone());
    }
    let mut out = Array2::zeros(v_cond.raw_dim());
    for t in 0..v_cond.nrows() {
        for j in 0..v_cond.ncols() {
            out[[t, j]] = v_uncond[[t, j]] + scale * (v_cond[[t, j]] - v_uncond[[t, j]]);
        }
    }
    Ok(out)
}
