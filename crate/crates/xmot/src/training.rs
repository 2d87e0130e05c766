//! Training: noise-assignment sampling, the diffusion-forcing and
//! teacher-forcing losses, Adam, and the step loop.
//!
//! The two regimes differ only in how per-token timesteps are assigned and
//! which frames the loss covers:
//!
//! - *diffusion forcing*: every chunk draws its own timestep (per token when
//!   intra-chunk assignment is asynchronous), the loss covers all frames, and
//!   the model therefore learns to denoise against noisy history;
//! - *teacher forcing*: one target chunk is drawn, history chunks stay clean
//!   (timestep 0), the target and all later chunks share one drawn timestep,
//!   and only the target chunk contributes loss.
//!
//! For a single-chunk sequence the two sampling rules consume the RNG
//! identically (teacher forcing skips the target-chunk draw when there is
//! only one chunk), making the losses bitwise equal from the same seed.

use std::fmt;
use std::io::Write as IoWrite;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::diffusion::{diffuse, v_target};
use crate::error::{Error, Result};
use crate::model::params::fnv1a64;
use crate::model::{build_mask, CheckpointMeta, Denoiser, DenoiserConfig};
use crate::schedule::{make_schedule, DiffusionSchedule, ScheduleFamily};
use crate::types::{build_chunk_layout, ChunkLayout, NoiseAssignment};

/// Deterministically derive an independent RNG stream for a named purpose.
pub(crate) fn derive_rng(seed: u64, tag: &str) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(fnv1a64(format!("{seed}/{tag}").as_bytes()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    DiffusionForcing,
    TeacherForcing,
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainMode::DiffusionForcing => write!(f, "diffusion_forcing"),
            TrainMode::TeacherForcing => write!(f, "teacher_forcing"),
        }
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diffusion_forcing" => Ok(TrainMode::DiffusionForcing),
            "teacher_forcing" => Ok(TrainMode::TeacherForcing),
            other => Err(Error::Config(format!(
                "unknown training mode {other:?}, expected \"diffusion_forcing\" or \"teacher_forcing\""
            ))),
        }
    }
}

/// How timesteps are assigned to tokens *within* one chunk under diffusion
/// forcing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IntraChunk {
    /// All tokens of a chunk share one drawn timestep.
    Synchronous,
    /// Every token draws independently.
    Asynchronous,
}

impl fmt::Display for IntraChunk {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IntraChunk::Synchronous => write!(f, "synchronous"),
            IntraChunk::Asynchronous => write!(f, "asynchronous"),
        }
    }
}

impl FromStr for IntraChunk {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synchronous" => Ok(IntraChunk::Synchronous),
            "asynchronous" => Ok(IntraChunk::Asynchronous),
            other => Err(Error::Config(format!(
                "unknown intra-chunk assignment {other:?}, expected \"synchronous\" or \"asynchronous\""
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub intra_chunk: IntraChunk,
    /// Probability of replacing the conditioning stream with the null
    /// embedding for a whole batch item (enables classifier-free guidance).
    pub cond_dropout: f64,
    pub learning_rate: f64,
    /// Cosine-decay floor as a fraction of `learning_rate`: the step size
    /// anneals from `learning_rate` to `learning_rate * lr_final_fraction`
    /// over the run. 1.0 keeps the rate constant.
    pub lr_final_fraction: f64,
    /// Per-step token budget; batches pack chunk-aligned crops up to this.
    pub batch_tokens: usize,
    pub total_steps: usize,
    pub seed: u64,
    pub schedule_family: ScheduleFamily,
    pub num_diffusion_steps: usize,
    /// Write a training-log row every this many steps.
    pub log_every: usize,
    /// Also checkpoint every this many steps (0: final checkpoint only).
    pub checkpoint_every: usize,
    /// Evaluate on the validation split every this many steps (0: only at
    /// the end, and only if a validation split is present).
    pub val_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::DiffusionForcing,
            intra_chunk: IntraChunk::Asynchronous,
            cond_dropout: 0.10,
            learning_rate: 1e-4,
            lr_final_fraction: 1.0,
            batch_tokens: 512,
            total_steps: 1000,
            seed: 0,
            schedule_family: ScheduleFamily::Cosine,
            num_diffusion_steps: 1000,
            log_every: 1,
            checkpoint_every: 0,
            val_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.cond_dropout) {
            return Err(Error::invalid(format!(
                "cond_dropout must be in [0, 1), got {}",
                self.cond_dropout
            )));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::invalid(format!(
                "learning_rate must be positive and finite, got {}",
                self.learning_rate
            )));
        }
        if !(self.lr_final_fraction.is_finite()
            && self.lr_final_fraction > 0.0
            && self.lr_final_fraction <= 1.0)
        {
            return Err(Error::invalid(format!(
                "lr_final_fraction must be in (0, 1], got {}",
                self.lr_final_fraction
            )));
        }
        for (name, v) in [
            ("batch_tokens", self.batch_tokens),
            ("total_steps", self.total_steps),
            ("num_diffusion_steps", self.num_diffusion_steps),
            ("log_every", self.log_every),
        ] {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// A per-token noise assignment plus the frames the loss covers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssignmentSample {
    pub assignment: NoiseAssignment,
    pub loss_mask: Vec<bool>,
}

/// Draw a noise assignment for one sequence window under the given regime.
pub fn sample_noise_assignment(
    layout: &ChunkLayout,
    mode: TrainMode,
    intra: IntraChunk,
    num_steps: usize,
    rng: &mut ChaCha20Rng,
) -> AssignmentSample {
    let t = layout.total_frames();
    let c = layout.num_chunks();
    let mut timesteps = vec![0usize; t];
    match mode {
        TrainMode::DiffusionForcing => {
            for ci in 0..c {
                match intra {
                    IntraChunk::Synchronous => {
                        let k = rng.random_range(0..=num_steps);
                        for ti in layout.range0(ci) {
                            timesteps[ti] = k;
                        }
                    }
                    IntraChunk::Asynchronous => {
                        for ti in layout.range0(ci) {
                            timesteps[ti] = rng.random_range(0..=num_steps);
                        }
                    }
                }
            }
            AssignmentSample {
                assignment: NoiseAssignment { timesteps },
                loss_mask: vec![true; t],
            }
        }
        TrainMode::TeacherForcing => {
            // With a single chunk the target is forced, and skipping the draw
            // keeps the RNG stream identical to synchronous diffusion forcing.
            let target = if c > 1 { rng.random_range(0..c) } else { 0 };
            let k = rng.random_range(0..=num_steps);
            let mut loss_mask = vec![false; t];
            for ci in 0..c {
                for ti in layout.range0(ci) {
                    timesteps[ti] = if ci < target { 0 } else { k };
                    if ci == target {
                        loss_mask[ti] = true;
                    }
                }
            }
            AssignmentSample {
                assignment: NoiseAssignment { timesteps },
                loss_mask,
            }
        }
    }
}

/// One training example: a motion window, its aligned conditioning window,
/// and the chunk layout both share.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub id: String,
    pub motion: Array2<f64>,
    pub cond: Array2<f64>,
    pub layout: ChunkLayout,
}

impl TrainItem {
    pub fn new(id: impl Into<String>, motion: Array2<f64>, cond: Array2<f64>, chunk_size: usize) -> Result<Self> {
        if motion.nrows() != cond.nrows() {
            return Err(Error::invalid(format!(
                "motion has {} frames, conditioning {}",
                motion.nrows(),
                cond.nrows()
            )));
        }
        let layout = build_chunk_layout(motion.nrows(), chunk_size)?;
        Ok(TrainItem {
            id: id.into(),
            motion,
            cond,
            layout,
        })
    }
}

fn randn(rng: &mut ChaCha20Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.sample(StandardNormal))
}

/// Shared loss kernel. Per item, in order: draw noise, draw the conditioning
/// dropout decision, corrupt, forward. Returns (loss, masked token count, and
/// parameter gradients when requested).
fn loss_core(
    model: &Denoiser,
    items: &[&TrainItem],
    assignments: &[AssignmentSample],
    schedule: &DiffusionSchedule,
    rng: &mut ChaCha20Rng,
    cond_dropout: f64,
    want_grads: bool,
) -> Result<(f64, usize, Option<Vec<Array2<f64>>>)> {
    assert_eq!(items.len(), assignments.len());
    let d = model.config().d_latent;
    let mut total_sse = 0.0;
    let mut total_tokens = 0usize;
    let mut pending = Vec::new();

    for (item, sample) in items.iter().zip(assignments.iter()) {
        let t = item.motion.nrows();
        sample.assignment.validate(t, schedule.num_steps())?;
        if sample.loss_mask.len() != t {
            return Err(Error::invalid(format!(
                "loss mask covers {} frames, item {} has {t}",
                sample.loss_mask.len(),
                item.id
            )));
        }
        let eps = randn(rng, t, d);
        let drop_cond = rng.random::<f64>() < cond_dropout;
        let z_k = diffuse(&item.motion, &sample.assignment, &eps, schedule)?;
        let target = v_target(&item.motion, &eps, &sample.assignment, schedule)?;
        let mask = build_mask(model.config().mask, &item.layout);
        let cond_opt = if drop_cond { None } else { Some(&item.cond) };

        let masked: usize = sample.loss_mask.iter().filter(|&&m| m).count();
        if masked == 0 {
            return Err(Error::invalid(format!(
                "loss mask for item {} covers no frames",
                item.id
            )));
        }
        total_tokens += masked;

        if want_grads {
            let (out, cache) = model.forward_cached(
                &z_k,
                &sample.assignment.timesteps,
                cond_opt,
                &mask,
                if model.config().dropout_rate > 0.0 {
                    Some(rng)
                } else {
                    None
                },
            )?;
            let mut diff = &out - &target;
            for (ti, &keep) in sample.loss_mask.iter().enumerate() {
                if !keep {
                    diff.row_mut(ti).fill(0.0);
                }
            }
            let sse: f64 = diff.iter().map(|&v| v * v).sum();
            if !sse.is_finite() {
                return Err(Error::NonFinite(format!("loss for item {}", item.id)));
            }
            total_sse += sse;
            pending.push((cache, diff));
        } else {
            let out = model.forward(&z_k, &sample.assignment.timesteps, cond_opt, &mask)?;
            let sse: f64 = sample
                .loss_mask
                .iter()
                .enumerate()
                .filter(|(_, &keep)| keep)
                .map(|(ti, _)| {
                    let o = out.row(ti);
                    let g = target.row(ti);
                    o.iter().zip(g.iter()).map(|(&a, &b)| (a - b) * (a - b)).sum::<f64>()
                })
                .sum();
            if !sse.is_finite() {
                return Err(Error::NonFinite(format!("loss for item {}", item.id)));
            }
            total_sse += sse;
        }
    }

    let norm = (total_tokens * d) as f64;
    let loss = total_sse / norm;
    let grads = if want_grads {
        let mut acc = model.zero_grads();
        for (cache, diff) in pending {
            let d_out = diff.mapv(|v| 2.0 * v / norm);
            let back = model.backward(&cache, &d_out);
            for (a, g) in acc.iter_mut().zip(back.grads.into_iter()) {
                *a += &g;
            }
        }
        Some(acc)
    } else {
        None
    };
    Ok((loss, total_tokens, grads))
}

/// Diffusion-forcing loss with caller-supplied assignments: mean squared
/// error between predicted and target v over every loss-covered frame.
pub fn df_loss(
    model: &Denoiser,
    items: &[&TrainItem],
    assignments: &[AssignmentSample],
    schedule: &DiffusionSchedule,
    rng: &mut ChaCha20Rng,
    cond_dropout: f64,
) -> Result<f64> {
    let (loss, _, _) = loss_core(model, items, assignments, schedule, rng, cond_dropout, false)?;
    Ok(loss)
}

/// Like [`df_loss`] but also returns schema-indexed parameter gradients.
pub fn df_loss_and_grads(
    model: &Denoiser,
    items: &[&TrainItem],
    assignments: &[AssignmentSample],
    schedule: &DiffusionSchedule,
    rng: &mut ChaCha20Rng,
    cond_dropout: f64,
) -> Result<(f64, Vec<Array2<f64>>)> {
    let (loss, _, grads) =
        loss_core(model, items, assignments, schedule, rng, cond_dropout, true)?;
    Ok((loss, grads.expect("grads requested")))
}

/// Teacher-forcing loss: samples the clean-history assignment internally
/// (one per item, immediately before that item's noise draw).
pub fn tf_loss(
    model: &Denoiser,
    items: &[&TrainItem],
    schedule: &DiffusionSchedule,
    rng: &mut ChaCha20Rng,
    cond_dropout: f64,
) -> Result<f64> {
    let mut total = 0.0;
    let mut tokens = 0usize;
    for item in items {
        let sample = sample_noise_assignment(
            &item.layout,
            TrainMode::TeacherForcing,
            IntraChunk::Synchronous,
            schedule.num_steps(),
            rng,
        );
        let (loss, t, _) = loss_core(
            model,
            &[item],
            std::slice::from_ref(&sample),
            schedule,
            rng,
            cond_dropout,
            false,
        )?;
        total += loss * t as f64;
        tokens += t;
    }
    Ok(total / tokens as f64)
}

/// Adam with bias correction; no weight decay.
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: usize,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(model: &Denoiser, learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: model.zero_grads(),
            v: model.zero_grads(),
        }
    }

    pub fn step(&mut self, params: &mut [Array2<f64>], grads: &[Array2<f64>]) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            ndarray::Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= self.learning_rate * mhat / (vhat.sqrt() + self.eps);
                });
        }
    }
}

/// One sequence of a training corpus.
#[derive(Debug, Clone)]
pub struct CorpusPair {
    pub id: String,
    pub motion: Array2<f64>,
    pub cond: Array2<f64>,
}

/// Plan a chunk-aligned crop of a `total`-frame sequence: whole chunks from a
/// uniformly drawn chunk-aligned start, the ragged tail included only when
/// the crop reaches the sequence end. Returns the 0-based frame range, or
/// `None` if nothing fits the budget.
pub fn plan_crop(
    total: usize,
    chunk_size: usize,
    max_context: usize,
    budget: usize,
    rng: &mut ChaCha20Rng,
) -> Option<std::ops::Range<usize>> {
    let cap = max_context.min(budget);
    if total <= cap {
        return Some(0..total);
    }
    let n = cap / chunk_size; // whole chunks that fit
    if n == 0 {
        return None;
    }
    let layout = build_chunk_layout(total, chunk_size).expect("total, chunk_size > 0");
    let c = layout.num_chunks();
    let start_chunk = rng.random_range(0..=c - n);
    let start = start_chunk * chunk_size;
    let end = (start + n * chunk_size).min(total);
    // the span covers chunks start_chunk..start_chunk+n, except when it runs
    // into the ragged tail, where it ends at the sequence end
    Some(start..end)
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub steps: usize,
    pub final_train_loss: f64,
    pub final_val_loss: Option<f64>,
}

/// Mean diffusion-forcing validation loss over a corpus with a fixed seed:
/// identical assignments and noise every call, so two models are compared
/// on exactly the same corruption. `cond_dropout` is 0 for conditional
/// evaluation; 1 evaluates the model with its conditioning nulled (the
/// unconditional operating mode) on the *same* noise, because the dropout
/// draw is consumed either way.
pub fn validate(
    model: &Denoiser,
    schedule: &DiffusionSchedule,
    corpus: &[CorpusPair],
    intra: IntraChunk,
    seed: u64,
    cond_dropout: f64,
) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::invalid("validation corpus is empty"));
    }
    let chunk_size = model.config().chunk_size;
    let max_context = model.config().max_context;
    let mut rng = derive_rng(seed, "validate");
    let mut total = 0.0;
    let mut tokens = 0usize;
    for pair in corpus {
        // deterministic crop: leading window if the sequence overflows the
        // attention span
        let t = pair.motion.nrows().min(max_context);
        let item = TrainItem::new(
            pair.id.clone(),
            pair.motion.slice(ndarray::s![..t, ..]).to_owned(),
            pair.cond.slice(ndarray::s![..t, ..]).to_owned(),
            chunk_size,
        )?;
        let sample = sample_noise_assignment(
            &item.layout,
            TrainMode::DiffusionForcing,
            intra,
            schedule.num_steps(),
            &mut rng,
        );
        let (loss, n, _) = loss_core(
            model,
            &[&item],
            std::slice::from_ref(&sample),
            schedule,
            &mut rng,
            cond_dropout,
            false,
        )?;
        total += loss * n as f64;
        tokens += n;
    }
    Ok(total / tokens as f64)
}

/// Train a fresh denoiser on `train` (optionally validating on `val`),
/// writing the checkpoint, manifest, and CSV logs into `out_dir`.
pub fn train(
    train: &[CorpusPair],
    val: &[CorpusPair],
    model_cfg: &DenoiserConfig,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model_cfg.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("training corpus is empty"));
    }
    for pair in train.iter().chain(val.iter()) {
        if pair.motion.ncols() != model_cfg.d_latent {
            return Err(Error::invalid(format!(
                "sequence {} has latent dim {}, model expects {}",
                pair.id,
                pair.motion.ncols(),
                model_cfg.d_latent
            )));
        }
        if pair.cond.ncols() != model_cfg.d_cond {
            return Err(Error::invalid(format!(
                "sequence {} has conditioning dim {}, model expects {}",
                pair.id,
                pair.cond.ncols(),
                model_cfg.d_cond
            )));
        }
        if pair.motion.nrows() != pair.cond.nrows() {
            return Err(Error::invalid(format!(
                "sequence {} has misaligned motion/conditioning lengths",
                pair.id
            )));
        }
    }
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;

    let schedule = make_schedule(cfg.schedule_family, cfg.num_diffusion_steps)?;
    let mut init_rng = derive_rng(cfg.seed, "init");
    let mut model = Denoiser::new(model_cfg.clone(), &mut init_rng)?;
    let mut batch_rng = derive_rng(cfg.seed, "batch");
    let mut noise_rng = derive_rng(cfg.seed, "noise");
    let mut adam = Adam::new(&model, cfg.learning_rate);

    let log_path = out_dir.join("train_log.csv");
    let mut log = std::io::BufWriter::new(
        std::fs::File::create(&log_path)
            .map_err(|e| Error::io(format!("creating {}", log_path.display()), e))?,
    );
    writeln!(log, "step,loss,lr,tokens_per_s")
        .map_err(|e| Error::io("writing training log", e))?;
    let mut val_log = if !val.is_empty() {
        let p = out_dir.join("val_log.csv");
        let mut f = std::io::BufWriter::new(
            std::fs::File::create(&p)
                .map_err(|e| Error::io(format!("creating {}", p.display()), e))?,
        );
        writeln!(f, "step,val_loss").map_err(|e| Error::io("writing val log", e))?;
        Some(f)
    } else {
        None
    };

    let meta = |step: usize| -> CheckpointMeta {
        let mut extra = std::collections::BTreeMap::new();
        extra.insert("train_mode".into(), cfg.mode.to_string());
        extra.insert("intra_chunk".into(), cfg.intra_chunk.to_string());
        extra.insert("cond_dropout".into(), cfg.cond_dropout.to_string());
        extra.insert("learning_rate".into(), cfg.learning_rate.to_string());
        extra.insert("lr_final_fraction".into(), cfg.lr_final_fraction.to_string());
        extra.insert("batch_tokens".into(), cfg.batch_tokens.to_string());
        extra.insert("seed".into(), cfg.seed.to_string());
        extra.insert("step".into(), step.to_string());
        CheckpointMeta {
            config: model_cfg.clone(),
            schedule_family: cfg.schedule_family,
            num_diffusion_steps: cfg.num_diffusion_steps,
            extra,
        }
    };

    // epoch-shuffled cycle over sequence indices
    let mut order: Vec<usize> = Vec::new();
    let mut next_in_order = 0usize;
    let mut final_loss = f64::NAN;

    for step in 1..=cfg.total_steps {
        // assemble a batch of chunk-aligned crops within the token budget
        let mut items: Vec<TrainItem> = Vec::new();
        let mut budget = cfg.batch_tokens;
        while budget >= model_cfg.chunk_size.min(budget.max(1)) {
            if next_in_order >= order.len() {
                order = (0..train.len()).collect();
                order.shuffle(&mut batch_rng);
                next_in_order = 0;
            }
            let pair = &train[order[next_in_order]];
            next_in_order += 1;
            let crop = plan_crop(
                pair.motion.nrows(),
                model_cfg.chunk_size,
                model_cfg.max_context,
                budget,
                &mut batch_rng,
            );
            let Some(range) = crop else {
                if items.is_empty() {
                    continue; // batch must not stay empty; try another sequence
                }
                break;
            };
            let len = range.len();
            items.push(TrainItem::new(
                format!("{}[{}..{}]", pair.id, range.start, range.end),
                pair.motion.slice(ndarray::s![range.clone(), ..]).to_owned(),
                pair.cond.slice(ndarray::s![range, ..]).to_owned(),
                model_cfg.chunk_size,
            )?);
            budget -= len.min(budget);
            if budget < model_cfg.chunk_size {
                break;
            }
        }

        let started = Instant::now();
        let assignments: Vec<AssignmentSample> = match cfg.mode {
            TrainMode::DiffusionForcing => items
                .iter()
                .map(|it| {
                    sample_noise_assignment(
                        &it.layout,
                        TrainMode::DiffusionForcing,
                        cfg.intra_chunk,
                        cfg.num_diffusion_steps,
                        &mut noise_rng,
                    )
                })
                .collect(),
            TrainMode::TeacherForcing => items
                .iter()
                .map(|it| {
                    sample_noise_assignment(
                        &it.layout,
                        TrainMode::TeacherForcing,
                        cfg.intra_chunk,
                        cfg.num_diffusion_steps,
                        &mut noise_rng,
                    )
                })
                .collect(),
        };
        let refs: Vec<&TrainItem> = items.iter().collect();
        let batch_desc = || {
            items
                .iter()
                .map(|it| it.id.as_str())
                .collect::<Vec<_>>()
                .join(";")
        };
        let (loss, tokens, grads) = loss_core(
            &model,
            &refs,
            &assignments,
            &schedule,
            &mut noise_rng,
            cfg.cond_dropout,
            true,
        )
        .map_err(|e| match e {
            Error::NonFinite(_) => Error::NonFiniteLoss {
                step,
                batch: batch_desc(),
            },
            other => other,
        })?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                batch: batch_desc(),
            });
        }
        // cosine anneal from learning_rate down to learning_rate * floor
        let progress = (step - 1) as f64 / cfg.total_steps.max(1) as f64;
        let floor = cfg.lr_final_fraction;
        let anneal = floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        adam.learning_rate = cfg.learning_rate * anneal;
        adam.step(&mut model.params_mut(), &grads.expect("grads requested"));
        final_loss = loss;

        if step % cfg.log_every == 0 || step == cfg.total_steps {
            let elapsed = started.elapsed().as_secs_f64().max(1e-9);
            let tps = tokens as f64 / elapsed;
            writeln!(log, "{step},{loss},{},{tps:.1}", adam.learning_rate)
                .map_err(|e| Error::io("writing training log", e))?;
        }
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step != cfg.total_steps
        {
            let p = out_dir.join(format!("checkpoint_step{step}.xckp"));
            crate::model::save_checkpoint(&p, &model, &meta(step))?;
        }
        if let Some(vlog) = val_log.as_mut() {
            if cfg.val_every > 0 && step % cfg.val_every == 0 {
                let vl = validate(&model, &schedule, val, cfg.intra_chunk, cfg.seed, 0.0)?;
                writeln!(vlog, "{step},{vl}")
                    .map_err(|e| Error::io("writing val log", e))?;
            }
        }
    }

    let final_val_loss = if val.is_empty() {
        None
    } else {
        let vl = validate(&model, &schedule, val, cfg.intra_chunk, cfg.seed, 0.0)?;
        if let Some(vlog) = val_log.as_mut() {
            writeln!(vlog, "{},{vl}", cfg.total_steps)
                .map_err(|e| Error::io("writing val log", e))?;
        }
        Some(vl)
    };
    log.flush().map_err(|e| Error::io("flushing training log", e))?;
    if let Some(mut vlog) = val_log {
        vlog.flush().map_err(|e| Error::io("flushing val log", e))?;
    }

    let ckpt = out_dir.join("checkpoint.xckp");
    crate::model::save_checkpoint(&ckpt, &model, &meta(cfg.total_steps))?;
    Ok(TrainOutcome {
        checkpoint: ckpt,
        steps: cfg.total_steps,
        final_train_loss: final_loss,
        final_val_loss,
    })
}
