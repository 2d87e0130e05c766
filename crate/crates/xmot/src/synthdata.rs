//! Synthetic paired corpus: conditioning streams with speech-like structure
//! and motion-latent sequences causally driven by them.
//!
//! Every sequence is built from one latent regime process and one envelope
//! process:
//!
//! - *conditioning* channel 0 is a bursty, fast-varying envelope (gated,
//!   rectified, lightly smoothed noise); channels `1..=regime_count` carry a
//!   slow exponentially-smeared one-hot of the active regime; any remaining
//!   channels are white distractors.
//! - *motion* channel 0 follows the envelope through a first-order filter
//!   delayed by `lag` frames (articulation); channels 1-2 are noise-driven
//!   resonators whose peak frequency and amplitude are set by the active
//!   regime (expression); channels 3-4 are a slow random walk with
//!   regime-dependent step size (posture); all further channels are smoothed
//!   nuisance noise, predictable from nearby frames but unrelated to the
//!   conditioning.
//!
//! All channels are standardized with statistics computed over the train
//! split and applied to every split, and each sequence ships a per-frame
//! truth sidecar (regime id, envelope value) plus corpus-level metadata so
//! the metric suite can score generations against ground truth.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::training::derive_rng;
use crate::types::{ConditioningSequence, FrameRate, MotionSequence};

/// Oscillator frequencies per regime, cycles/frame. Neighbors are ~55%
/// apart so a 64-frame chunk resolves them cleanly; all stay below Nyquist.
pub const REGIME_FREQS: [f64; 5] = [0.055, 0.085, 0.132, 0.205, 0.317];
/// Oscillator amplitude per regime, strictly increasing so higher regimes
/// are visibly more animated.
pub const REGIME_AMPS: [f64; 5] = [0.7, 1.0, 1.4, 1.8, 2.2];
/// Random-walk innovation scale per regime.
const REGIME_WALK_STD: [f64; 5] = [0.05, 0.08, 0.12, 0.17, 0.23];
/// Articulation filter coefficient: motion ch0 tracks the lagged envelope
/// with most of its weight on the most recent lagged frame.
const LIP_ALPHA: f64 = 0.75;
/// Pose random-walk pole.
const WALK_RHO: f64 = 0.995;
/// Expression resonator pole radius: close enough to the unit circle for a
/// sharp spectral peak at the regime frequency, damped enough that the
/// channel stays predictable from a local neighborhood of frames.
const OSC_RADIUS: f64 = 0.98;
/// Nuisance smoother pole, applied in a short cascade so the channel is
/// band-limited (interpolable from neighbors) yet mixes within ~20 frames.
const NUISANCE_POLE: f64 = 0.8;
const NUISANCE_STAGES: usize = 4;
/// Envelope gate transition probabilities (voiced -> pause, pause -> voiced).
const GATE_OFF_P: f64 = 0.025;
const GATE_ON_P: f64 = 1.0 / 15.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_sequences: usize,
    /// Train/val sequence lengths are drawn uniformly from this range.
    pub len_min: usize,
    pub len_max: usize,
    /// Motion latent channels (>= 4).
    pub d: usize,
    /// Conditioning channels (>= 2, and > regime_count).
    pub d_a: usize,
    pub frame_rate: FrameRate,
    /// Number of regimes (1..=5).
    pub regime_count: usize,
    /// Per-frame probability of switching to a different regime.
    pub regime_switch_prob: f64,
    /// Articulation delay in frames between envelope and motion channel 0.
    pub lag: usize,
    pub seed: u64,
    /// Fraction of `num_sequences` held out as the validation split.
    pub val_fraction: f64,
    /// Extra held-out conditioning sequences for generation benchmarks.
    pub eval_sequences: usize,
    /// Fixed length of eval sequences.
    pub eval_len: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_sequences: 200,
            len_min: 256,
            len_max: 512,
            d: 16,
            d_a: 8,
            frame_rate: FrameRate::default(),
            regime_count: 3,
            regime_switch_prob: 0.005,
            lag: 2,
            seed: 0,
            val_fraction: 0.1,
            eval_sequences: 0,
            eval_len: 1024,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_sequences == 0 {
            return Err(Error::invalid("num_sequences must be positive"));
        }
        if self.d < 4 {
            return Err(Error::invalid(format!(
                "motion needs at least 4 channels (lip, expression, pose), got {}",
                self.d
            )));
        }
        if self.d_a < 2 {
            return Err(Error::invalid(format!(
                "conditioning needs at least 2 channels (envelope + regime), got {}",
                self.d_a
            )));
        }
        if self.regime_count == 0 || self.regime_count > REGIME_FREQS.len() {
            return Err(Error::invalid(format!(
                "regime_count must be in 1..={}, got {}",
                REGIME_FREQS.len(),
                self.regime_count
            )));
        }
        if self.regime_count + 1 > self.d_a {
            return Err(Error::invalid(format!(
                "d_a = {} cannot carry an envelope plus {} regime channels",
                self.d_a, self.regime_count
            )));
        }
        if !(0.0..1.0).contains(&self.regime_switch_prob) {
            return Err(Error::invalid(format!(
                "regime_switch_prob must be in [0, 1), got {}",
                self.regime_switch_prob
            )));
        }
        if self.len_min < 128 {
            return Err(Error::invalid(format!(
                "len_min must cover at least two default chunks (128 frames), got {}",
                self.len_min
            )));
        }
        if self.len_min > self.len_max {
            return Err(Error::invalid(format!(
                "len_min {} exceeds len_max {}",
                self.len_min, self.len_max
            )));
        }
        if self.lag >= self.len_min {
            return Err(Error::invalid(format!(
                "lag {} must be smaller than the shortest sequence {}",
                self.lag, self.len_min
            )));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::invalid(format!(
                "val_fraction must be in [0, 1), got {}",
                self.val_fraction
            )));
        }
        if self.eval_sequences > 0 && self.eval_len < 128 {
            return Err(Error::invalid(format!(
                "eval_len must cover at least two default chunks (128 frames), got {}",
                self.eval_len
            )));
        }
        Ok(())
    }
}

/// Ground truth for one frame, written to `.truth.jsonl` sidecars.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameTruth {
    /// 0-based frame index.
    pub frame: usize,
    pub regime: usize,
    /// Standardized envelope value (equals conditioning channel 0).
    pub envelope: f64,
}

#[derive(Debug, Clone)]
pub struct GeneratedSequence {
    pub id: String,
    pub motion: MotionSequence,
    pub cond: ConditioningSequence,
    pub truth: Vec<FrameTruth>,
}

/// Per-channel standardization applied to the corpus (train-split stats).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub motion_mean: Vec<f64>,
    pub motion_std: Vec<f64>,
    pub cond_mean: Vec<f64>,
    pub cond_std: Vec<f64>,
}

/// Reference per-channel moments of standardized train-split motion, the
/// yardstick for distributional drift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusMeta {
    pub config: SynthConfig,
    /// Active regime frequencies (cycles/frame), index = regime id.
    pub regime_freqs: Vec<f64>,
    pub regime_amps: Vec<f64>,
    pub motion_roles: Vec<String>,
    pub cond_roles: Vec<String>,
    pub standardization: Standardization,
    pub ref_stats: RefStats,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub train: Vec<GeneratedSequence>,
    pub val: Vec<GeneratedSequence>,
    pub eval: Vec<GeneratedSequence>,
    pub meta: CorpusMeta,
}

struct RawSequence {
    id: String,
    motion: Array2<f64>,
    cond: Array2<f64>,
    regimes: Vec<usize>,
}

/// Innovation gain that gives the second-order section `y_t = c1 y_{t-1} +
/// c2 y_{t-2} + g n_t` (poles `r e^{±i 2π f}`) unit stationary variance,
/// from the closed form for the variance of an AR(2) process:
/// `var = (1 - c2) / ((1 + c2) ((1 - c2)^2 - c1^2))` per unit innovation.
fn resonator_gain(r: f64, omega: f64) -> f64 {
    let c1 = 2.0 * r * omega.cos();
    let c2 = -r * r;
    let var = (1.0 - c2) / ((1.0 + c2) * ((1.0 - c2) * (1.0 - c2) - c1 * c1));
    (1.0 / var).sqrt()
}

/// Lag-1 autocorrelation of the same section, `c1 / (1 - c2)`.
fn resonator_lag1_corr(r: f64, f: f64) -> f64 {
    let omega = std::f64::consts::TAU * f;
    let c1 = 2.0 * r * omega.cos();
    let c2 = -r * r;
    c1 / (1.0 - c2)
}

fn generate_raw(cfg: &SynthConfig, id: String, t: usize, rng: &mut ChaCha20Rng) -> RawSequence {
    let g = cfg.regime_count;

    // --- regime process -----------------------------------------------------
    let mut regimes = Vec::with_capacity(t);
    let mut r = rng.random_range(0..g);
    regimes.push(r);
    for _ in 1..t {
        if g > 1 && rng.random::<f64>() < cfg.regime_switch_prob {
            r = (r + 1 + rng.random_range(0..g - 1)) % g;
        }
        regimes.push(r);
    }

    // --- envelope process ---------------------------------------------------
    // gated, rectified, lightly smoothed noise: bursts with pauses
    let mut env = vec![0.0f64; t];
    let mut gate = rng.random::<f64>() < 0.7;
    let mut carrier = [0.0f64; 3];
    let mut ema = 0.0;
    for (ti, e) in env.iter_mut().enumerate() {
        if ti > 0 {
            let p = if gate { GATE_OFF_P } else { GATE_ON_P };
            if rng.random::<f64>() < p {
                gate = !gate;
            }
        }
        let n: f64 = rng.sample(StandardNormal);
        carrier.rotate_right(1);
        carrier[0] = n;
        let smooth = (carrier[0] + carrier[1] + carrier[2]) / 3.0;
        let raw = if gate { smooth.abs() } else { 0.0 };
        ema = 0.5 * ema + 0.5 * raw;
        *e = ema;
    }

    // --- conditioning -------------------------------------------------------
    let mut cond = Array2::zeros((t, cfg.d_a));
    let mut smear = vec![0.0f64; g];
    for ti in 0..t {
        cond[[ti, 0]] = env[ti];
        for (j, s) in smear.iter_mut().enumerate() {
            let onehot = if regimes[ti] == j { 1.0 } else { 0.0 };
            *s = 0.9 * *s + 0.1 * onehot;
            cond[[ti, 1 + j]] = *s;
        }
        for j in (1 + g)..cfg.d_a {
            cond[[ti, j]] = rng.sample(StandardNormal);
        }
    }

    // --- motion ---------------------------------------------------------------
    let mut motion = Array2::zeros((t, cfg.d));
    // ch0: lagged articulation filter on the envelope
    let mut lip = 0.0;
    for ti in 0..t {
        let drive = if ti >= cfg.lag { env[ti - cfg.lag] } else { 0.0 };
        lip = (1.0 - LIP_ALPHA) * lip + LIP_ALPHA * drive;
        motion[[ti, 0]] = lip;
    }
    // ch1-2: regime resonators with independent excitation. A second-order
    // section with poles at OSC_RADIUS * e^{±i 2π f} turns white noise into a
    // narrowband tone at the regime frequency; the innovation gain keeps the
    // state at unit stationary variance so REGIME_AMPS is the output scale.
    let osc_hi = cfg.d.min(3);
    for ch in 1..osc_hi {
        // start from the stationary joint law of two adjacent states
        let rho1 = resonator_lag1_corr(OSC_RADIUS, REGIME_FREQS[regimes[0]]);
        let n0: f64 = rng.sample(StandardNormal);
        let n1: f64 = rng.sample(StandardNormal);
        let mut y2 = n0;
        let mut y1 = rho1 * y2 + (1.0 - rho1 * rho1).max(0.0).sqrt() * n1;
        for ti in 0..t {
            let reg = regimes[ti];
            let omega = std::f64::consts::TAU * REGIME_FREQS[reg];
            let c1 = 2.0 * OSC_RADIUS * omega.cos();
            let c2 = -OSC_RADIUS * OSC_RADIUS;
            let n: f64 = rng.sample(StandardNormal);
            let y = c1 * y1 + c2 * y2 + resonator_gain(OSC_RADIUS, omega) * n;
            y2 = y1;
            y1 = y;
            motion[[ti, ch]] = REGIME_AMPS[reg] * y;
        }
    }
    // ch3-4: slow pose walk with regime-scaled steps
    let pose_hi = cfg.d.min(5);
    for ch in 3..pose_hi {
        let mut w = 0.0;
        for ti in 0..t {
            let n: f64 = rng.sample(StandardNormal);
            w = WALK_RHO * w + REGIME_WALK_STD[regimes[ti]] * n;
            motion[[ti, ch]] = w;
        }
    }
    // ch5+: smooth nuisance, unrelated to conditioning: white noise through a
    // short one-pole smoothing cascade, kept small before standardization
    for ch in 5..cfg.d {
        let mut stages = [0.0f64; NUISANCE_STAGES];
        for ti in 0..t {
            let mut x: f64 = rng.sample(StandardNormal);
            for s in stages.iter_mut() {
                *s = NUISANCE_POLE * *s + (1.0 - NUISANCE_POLE) * x;
                x = *s;
            }
            motion[[ti, ch]] = 0.05 * x;
        }
    }

    RawSequence {
        id,
        motion,
        cond,
        regimes,
    }
}

fn channel_moments(seqs: &[&RawSequence], pick: impl Fn(&RawSequence) -> &Array2<f64>) -> (Vec<f64>, Vec<f64>) {
    let d = pick(seqs[0]).ncols();
    let mut mean = vec![0.0f64; d];
    let mut count = 0usize;
    for s in seqs {
        let m = pick(s);
        count += m.nrows();
        for row in m.rows() {
            for (j, &v) in row.iter().enumerate() {
                mean[j] += v;
            }
        }
    }
    for m in mean.iter_mut() {
        *m /= count as f64;
    }
    let mut var = vec![0.0f64; d];
    for s in seqs {
        let m = pick(s);
        for row in m.rows() {
            for (j, &v) in row.iter().enumerate() {
                let dlt = v - mean[j];
                var[j] += dlt * dlt;
            }
        }
    }
    for v in var.iter_mut() {
        *v /= count as f64;
    }
    (mean, var)
}

fn standardize(m: &mut Array2<f64>, mean: &[f64], std: &[f64]) {
    for mut row in m.rows_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mean[j]) / std[j];
        }
    }
}

/// Generate a full corpus: train/val (and optional eval) splits, standardized
/// with train-split statistics, plus truth sidecars and metadata.
/// Deterministic in the config.
pub fn generate_corpus(cfg: &SynthConfig) -> Result<Corpus> {
    cfg.validate()?;
    let n_val = ((cfg.num_sequences as f64 * cfg.val_fraction).round() as usize)
        .min(cfg.num_sequences.saturating_sub(1));
    let n_train = cfg.num_sequences - n_val;

    let mut raws: Vec<(usize, RawSequence)> = Vec::with_capacity(cfg.num_sequences);
    for i in 0..cfg.num_sequences {
        let split = if i < n_train { "train" } else { "val" };
        let local = if i < n_train { i } else { i - n_train };
        let id = format!("{split}_{local:04}");
        let mut rng = derive_rng(cfg.seed, &format!("seq/{split}/{local}"));
        let t = rng.random_range(cfg.len_min..=cfg.len_max);
        raws.push((i, generate_raw(cfg, id, t, &mut rng)));
    }
    let mut evals: Vec<RawSequence> = Vec::with_capacity(cfg.eval_sequences);
    for i in 0..cfg.eval_sequences {
        let id = format!("eval_{i:04}");
        let mut rng = derive_rng(cfg.seed, &format!("seq/eval/{i}"));
        evals.push(generate_raw(cfg, id, cfg.eval_len, &mut rng));
    }

    // standardization from the train split only
    let train_refs: Vec<&RawSequence> = raws[..n_train].iter().map(|(_, s)| s).collect();
    let (m_mean, m_var) = channel_moments(&train_refs, |s| &s.motion);
    let (c_mean, c_var) = channel_moments(&train_refs, |s| &s.cond);
    let guard = |v: &f64| if *v < 1e-18 { 1.0 } else { v.sqrt() };
    let m_std: Vec<f64> = m_var.iter().map(guard).collect();
    let c_std: Vec<f64> = c_var.iter().map(guard).collect();

    let finish = |raw: RawSequence| -> Result<GeneratedSequence> {
        let mut motion = raw.motion;
        let mut cond = raw.cond;
        standardize(&mut motion, &m_mean, &m_std);
        standardize(&mut cond, &c_mean, &c_std);
        let truth = raw
            .regimes
            .iter()
            .enumerate()
            .map(|(ti, &r)| FrameTruth {
                frame: ti,
                regime: r,
                envelope: cond[[ti, 0]],
            })
            .collect();
        Ok(GeneratedSequence {
            id: raw.id,
            motion: MotionSequence::new(motion, cfg.frame_rate)?,
            cond: ConditioningSequence::new(cond, cfg.frame_rate)?,
            truth,
        })
    };

    let mut train = Vec::with_capacity(n_train);
    let mut val = Vec::with_capacity(n_val);
    for (i, raw) in raws {
        let seq = finish(raw)?;
        if i < n_train {
            train.push(seq);
        } else {
            val.push(seq);
        }
    }
    let eval = evals.into_iter().map(finish).collect::<Result<Vec<_>>>()?;

    // drift reference: moments of the standardized train motion
    let (ref_mean, ref_var) = {
        let d = cfg.d;
        let mut mean = vec![0.0f64; d];
        let mut count = 0usize;
        for s in &train {
            count += s.motion.len();
            for row in s.motion.data().rows() {
                for (j, &v) in row.iter().enumerate() {
                    mean[j] += v;
                }
            }
        }
        for m in mean.iter_mut() {
            *m /= count as f64;
        }
        let mut var = vec![0.0f64; d];
        for s in &train {
            for row in s.motion.data().rows() {
                for (j, &v) in row.iter().enumerate() {
                    let dlt = v - mean[j];
                    var[j] += dlt * dlt;
                }
            }
        }
        for v in var.iter_mut() {
            *v /= count as f64;
        }
        (mean, var)
    };

    let motion_roles: Vec<String> = (0..cfg.d)
        .map(|ch| match ch {
            0 => "lip".to_string(),
            1 | 2 => "expression".to_string(),
            3 | 4 => "pose".to_string(),
            _ => "nuisance".to_string(),
        })
        .collect();
    let cond_roles: Vec<String> = (0..cfg.d_a)
        .map(|ch| {
            if ch == 0 {
                "envelope".to_string()
            } else if ch <= cfg.regime_count {
                "regime".to_string()
            } else {
                "noise".to_string()
            }
        })
        .collect();

    Ok(Corpus {
        train,
        val,
        eval,
        meta: CorpusMeta {
            config: cfg.clone(),
            regime_freqs: REGIME_FREQS[..cfg.regime_count].to_vec(),
            regime_amps: REGIME_AMPS[..cfg.regime_count].to_vec(),
            motion_roles,
            cond_roles,
            standardization: Standardization {
                motion_mean: m_mean,
                motion_std: m_std,
                cond_mean: c_mean,
                cond_std: c_std,
            },
            ref_stats: RefStats {
                mean: ref_mean,
                var: ref_var,
            },
        },
    })
}
