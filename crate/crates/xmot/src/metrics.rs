//! Evaluation metrics for generated motion: audio-motion synchrony, motion
//! liveliness, long-horizon distributional drift, and regime classification
//! from oscillator spectra.
//!
//! Channel-role conventions follow the corpus generator: motion channel 0
//! is articulation, channels 1-2 are expression oscillators, channels 3-4
//! are pose; conditioning channel 0 is the envelope and channels
//! `1..=regime_count` are the regime indicators.

use ndarray::ArrayView2;

use crate::error::{Error, Result};
use crate::synthdata::RefStats;
use crate::types::{ChunkLayout, ConditioningSequence, MotionSequence};

/// Minimum frames a chunk needs to contribute to chunk-level statistics
/// (drift, regime classification); shorter ragged tails are skipped.
pub const MIN_CHUNK_FRAMES: usize = 4;

/// Synchrony between the conditioning envelope and generated articulation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyncScore {
    /// Best Pearson correlation over the scanned lags.
    pub sync_c: f64,
    /// The lag (frames of motion delay) achieving it; negative = motion leads.
    pub lag: isize,
    /// Distance from the expected lag when one is known, else the raw lag.
    pub sync_d: f64,
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in x.iter().zip(y) {
        let da = a - mx;
        let db = b - my;
        num += da * db;
        vx += da * da;
        vy += db * db;
    }
    if vx <= 0.0 || vy <= 0.0 {
        return Err(Error::invalid(
            "zero-variance channel makes correlation undefined",
        ));
    }
    Ok(num / (vx.sqrt() * vy.sqrt()))
}

/// Scan integer lags in `[-max_lag, max_lag]` for the highest Pearson
/// correlation between conditioning channel 0 and motion channel 0. A
/// positive lag means the motion is delayed relative to the conditioning.
/// `true_lag`, when known, turns `sync_d` into the absolute error of the
/// recovered lag.
pub fn sync_proxy(
    cond: &ConditioningSequence,
    motion: &MotionSequence,
    max_lag: usize,
    true_lag: Option<isize>,
) -> Result<SyncScore> {
    let t = cond.len();
    if motion.len() != t {
        return Err(Error::invalid(format!(
            "conditioning has {t} frames but motion has {}",
            motion.len()
        )));
    }
    if t < 16 {
        return Err(Error::invalid(format!(
            "synchrony needs at least 16 frames, got {t}"
        )));
    }
    if max_lag + 2 > t {
        return Err(Error::invalid(format!(
            "max_lag {max_lag} leaves no overlap at length {t}"
        )));
    }
    let env: Vec<f64> = cond.data().column(0).to_vec();
    let lip: Vec<f64> = motion.data().column(0).to_vec();

    let mut best = f64::NEG_INFINITY;
    let mut best_lag = 0isize;
    for lag in -(max_lag as isize)..=(max_lag as isize) {
        let shift = lag.unsigned_abs();
        let n = t - shift;
        let (x, y) = if lag >= 0 {
            (&env[..n], &lip[shift..])
        } else {
            (&env[shift..], &lip[..n])
        };
        let c = pearson(x, y)?;
        if c > best {
            best = c;
            best_lag = lag;
        }
    }
    let sync_d = match true_lag {
        Some(tl) => (best_lag - tl).abs() as f64,
        None => best_lag as f64,
    };
    Ok(SyncScore {
        sync_c: best,
        lag: best_lag,
        sync_d,
    })
}

fn channel_temporal_variance(data: ArrayView2<f64>, lo: usize, hi: usize) -> f64 {
    let t = data.nrows() as f64;
    let mut acc = 0.0;
    let mut n = 0usize;
    for ch in lo..hi {
        let col = data.column(ch);
        let mean = col.sum() / t;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / t;
        acc += var;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        acc / n as f64
    }
}

/// Liveliness: `glo` is the mean temporal variance of the pose channels
/// (3-4), `exp` the same over the expression channels (1-2).
pub fn glo_exp(motion: &MotionSequence) -> Result<(f64, f64)> {
    if motion.len() < 2 {
        return Err(Error::invalid("liveliness needs at least 2 frames"));
    }
    if motion.dim() < 4 {
        return Err(Error::invalid(format!(
            "liveliness needs the 4-channel role convention, got {} channels",
            motion.dim()
        )));
    }
    let d = motion.dim();
    let data = motion.data().view();
    let glo = channel_temporal_variance(data, 3, d.min(5));
    let exp = channel_temporal_variance(data, 1, d.min(3));
    Ok((glo, exp))
}

/// Absolute differences of the liveliness statistics between a generated
/// sequence and its reference.
pub fn dglo_dexp(generated: &MotionSequence, reference: &MotionSequence) -> Result<(f64, f64)> {
    let (gg, ge) = glo_exp(generated)?;
    let (rg, re) = glo_exp(reference)?;
    Ok(((gg - rg).abs(), (ge - re).abs()))
}

/// Per-chunk distance between the chunk's per-dimension moments and the
/// reference moments, in a form that is indifferent to how slowly the
/// underlying process moves: by the law of total variance, an
/// in-distribution chunk satisfies
/// `E[(chunk_mean - ref_mean)^2] + E[chunk_var] = ref_var`
/// per dimension at any correlation time. The distance is the absolute
/// value of the signed sum of those per-dimension deviations, so
/// in-distribution fluctuations cancel across dimensions while systematic
/// deviations add up: a rollout that wanders off-distribution inflates the
/// mean terms without the within-chunk variances shrinking to match, and
/// one that over-smooths collapses both below the reference variance.
/// Either way the distance rises, while real data scores near zero.
/// Chunks shorter than [`MIN_CHUNK_FRAMES`] are skipped.
pub fn drift_curve(
    generated: &MotionSequence,
    ref_stats: &RefStats,
    layout: &ChunkLayout,
) -> Result<Vec<f64>> {
    let d = generated.dim();
    if ref_stats.mean.len() != d || ref_stats.var.len() != d {
        return Err(Error::invalid(format!(
            "reference stats cover {} dims, motion has {d}",
            ref_stats.mean.len()
        )));
    }
    if layout.total_frames() != generated.len() {
        return Err(Error::invalid(format!(
            "layout covers {} frames, motion has {}",
            layout.total_frames(),
            generated.len()
        )));
    }
    if layout.num_chunks() < 2 {
        return Err(Error::invalid("drift needs at least 2 chunks"));
    }
    let data = generated.data();
    let mut curve = Vec::with_capacity(layout.num_chunks());
    for c in 0..layout.num_chunks() {
        let r = layout.range0(c);
        let n = r.len();
        if n < MIN_CHUNK_FRAMES {
            continue;
        }
        let chunk = data.slice(ndarray::s![r.start..r.end, ..]);
        let mut dist = 0.0;
        for j in 0..d {
            let col = chunk.column(j);
            let mean = col.sum() / n as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let dmu = mean - ref_stats.mean[j];
            dist += dmu * dmu + var - ref_stats.var[j];
        }
        curve.push(dist.abs());
    }
    Ok(curve)
}

/// Mean of the drift curve — a single long-horizon stability number.
pub fn drift_auc(curve: &[f64]) -> f64 {
    if curve.is_empty() {
        return f64::NAN;
    }
    curve.iter().sum::<f64>() / curve.len() as f64
}

/// Power of `x` (mean removed) at frequency `f` cycles/frame.
fn spectral_power(x: &[f64], f: f64) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let (mut re, mut im) = (0.0, 0.0);
    for (t, &v) in x.iter().enumerate() {
        let ph = std::f64::consts::TAU * f * t as f64;
        re += (v - mean) * ph.cos();
        im += (v - mean) * ph.sin();
    }
    re * re + im * im
}

/// Per-frame regime labels implied by the conditioning's regime-indicator
/// channels (argmax of channels `1..=regime_count`).
pub fn regimes_from_cond(cond: &ConditioningSequence, regime_count: usize) -> Result<Vec<usize>> {
    if regime_count == 0 || regime_count + 1 > cond.dim() {
        return Err(Error::invalid(format!(
            "conditioning with {} channels cannot carry {regime_count} regime indicators",
            cond.dim()
        )));
    }
    let data = cond.data();
    Ok((0..cond.len())
        .map(|t| {
            let mut best = 0usize;
            let mut best_v = f64::NEG_INFINITY;
            for r in 0..regime_count {
                let v = data[[t, 1 + r]];
                if v > best_v {
                    best_v = v;
                    best = r;
                }
            }
            best
        })
        .collect())
}

/// Fraction of chunks whose spectral peak over the expression channels sits
/// at the frequency of the chunk's majority regime. `frame_regimes` holds
/// the per-frame ground-truth (or conditioning-implied) regime. Chunks
/// shorter than [`MIN_CHUNK_FRAMES`] are skipped.
pub fn regime_acc(
    motion: &MotionSequence,
    frame_regimes: &[usize],
    regime_freqs: &[f64],
    layout: &ChunkLayout,
) -> Result<f64> {
    if frame_regimes.len() != motion.len() {
        return Err(Error::invalid(format!(
            "{} regime labels for {} frames",
            frame_regimes.len(),
            motion.len()
        )));
    }
    if layout.total_frames() != motion.len() {
        return Err(Error::invalid("layout does not match motion length"));
    }
    if regime_freqs.is_empty() {
        return Err(Error::invalid("no regime frequencies given"));
    }
    if motion.dim() < 3 {
        return Err(Error::invalid(
            "regime classification needs the expression channels (1-2)",
        ));
    }
    if frame_regimes.iter().any(|&r| r >= regime_freqs.len()) {
        return Err(Error::invalid("regime label out of range"));
    }

    let data = motion.data();
    let mut hits = 0usize;
    let mut total = 0usize;
    for c in 0..layout.num_chunks() {
        let r = layout.range0(c);
        if r.len() < MIN_CHUNK_FRAMES {
            continue;
        }
        // majority regime over the chunk; ties break to the smaller id
        let mut counts = vec![0usize; regime_freqs.len()];
        for &reg in &frame_regimes[r.clone()] {
            counts[reg] += 1;
        }
        let truth = counts
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .unwrap();

        let ch1: Vec<f64> = data.column(1).slice(ndarray::s![r.clone()]).to_vec();
        let ch2: Vec<f64> = data.column(2).slice(ndarray::s![r.clone()]).to_vec();
        let mut best = 0usize;
        let mut best_p = f64::NEG_INFINITY;
        for (i, &f) in regime_freqs.iter().enumerate() {
            let p = spectral_power(&ch1, f) + spectral_power(&ch2, f);
            if p > best_p {
                best_p = p;
                best = i;
            }
        }
        total += 1;
        if best == truth {
            hits += 1;
        }
    }
    if total == 0 {
        return Err(Error::invalid("no chunk long enough to classify"));
    }
    Ok(hits as f64 / total as f64)
}
