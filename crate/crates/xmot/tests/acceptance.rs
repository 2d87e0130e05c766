//! Acceptance suite: nine standalone checks of the generator's
//! contracts, from exact kernel algebra up to directional behavior of
//! trained models. Each test prints a single
//! `criterion N (<name>): PASS — <evidence>` line when it holds.
//!
//! Heavy artifacts (the shared corpus, trained checkpoints, the variant
//! matrix) are built once under `CARGO_TARGET_TMPDIR` and reused both
//! across tests in one run and across repeated runs: retraining is
//! skipped when an existing checkpoint's manifest matches the requested
//! configuration exactly.

use std::path::{Path, PathBuf};
use std::sync::LazyLock;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use xmot::diffusion::{cfg_combine, ddim_step, diffuse, reconstruct, v_target};
use xmot::harness::{load_meta, load_split, run_ablate, run_gen_data, to_pairs, AblateOptions};
use xmot::inference::{
    ddim_grid, generate_sequence, history_window_start, HistoryScheduler, InferenceConfig,
};
use xmot::metrics::{drift_auc, drift_curve};
use xmot::model::{
    build_mask, load_checkpoint, Denoiser, DenoiserConfig, MaskKind,
};
use xmot::schedule::{make_schedule, ScheduleFamily};
use xmot::synthdata::SynthConfig;
use xmot::training::{
    df_loss, df_loss_and_grads, sample_noise_assignment, tf_loss, train, validate, CorpusPair,
    IntraChunk, TrainConfig, TrainItem, TrainMode,
};
use xmot::types::{build_chunk_layout, ConditioningSequence, NoiseAssignment};

// ---------------------------------------------------------------------------
// Shared fixture constants. The corpus matches the training-smoke contract:
// 200 sequences, lengths in [256, 512], 16 motion channels, chunks of 64
// frames, plus 20 held-out conditioning sequences of 16 chunks each.
// ---------------------------------------------------------------------------
const CORPUS_SEED: u64 = 11;
const CHUNK: usize = 64;
const EVAL_LEN: usize = 1024; // 16 chunks
const EVAL_COUNT: usize = 20;

/// Width used by every trained fixture; attention cost dominates, so the
/// models stay narrow and rely on step count for quality.
const D_MODEL: usize = 48;
const LAYERS: usize = 2;
const HEADS: usize = 2;

/// Steps for the variant matrix (directional checks).
const ABLATE_STEPS: usize = 8_000;
const ABLATE_SEEDS: [u64; 3] = [0, 1, 2];
const ABLATE_DDIM: usize = 12;
const ABLATE_CFG: f64 = 3.0;

/// Steps pinned by the training-smoke contract.
const SMOKE_STEPS: usize = 20_000;

/// Long-form run: 100 chunks under a 512-frame rolling context.
const LONG_CHUNKS: usize = 100;
const LONG_CONTEXT: usize = 512;
const LONG_STEPS: usize = 6_000;

fn root() -> PathBuf {
    Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

fn synth_config() -> SynthConfig {
    SynthConfig {
        num_sequences: 200,
        len_min: 256,
        len_max: 512,
        d: 16,
        d_a: 8,
        eval_sequences: EVAL_COUNT,
        eval_len: EVAL_LEN,
        seed: CORPUS_SEED,
        ..SynthConfig::default()
    }
}

/// Corpus A: regenerated from scratch on every run (cheap and
/// deterministic, so downstream checkpoints stay valid across runs).
static CORPUS: LazyLock<PathBuf> = LazyLock::new(|| {
    let dir = root().join("corpus");
    if dir.exists() {
        std::fs::remove_dir_all(&dir).unwrap();
    }
    run_gen_data(&synth_config(), &dir).unwrap();
    dir
});

fn denoiser_config(max_context: usize) -> DenoiserConfig {
    DenoiserConfig {
        d_latent: 16,
        d_cond: 8,
        d_model: D_MODEL,
        num_layers: LAYERS,
        num_heads: HEADS,
        chunk_size: CHUNK,
        max_context,
        ..DenoiserConfig::default()
    }
}

/// Train into `dir` unless a checkpoint with the same mode/seed/steps is
/// already there from a previous run.
fn train_cached(
    dir: &Path,
    train_pairs: &[CorpusPair],
    val_pairs: &[CorpusPair],
    model_cfg: &DenoiserConfig,
    train_cfg: &TrainConfig,
) -> PathBuf {
    let ckpt = dir.join("checkpoint.xckp");
    if let Ok((model, meta)) = load_checkpoint(&ckpt) {
        let extra = |k: &str| meta.extra.get(k).map(String::as_str);
        if model.config() == model_cfg
            && extra("train_mode") == Some(&train_cfg.mode.to_string())
            && extra("seed") == Some(&train_cfg.seed.to_string())
            && extra("step") == Some(&train_cfg.total_steps.to_string())
            && extra("cond_dropout") == Some(&train_cfg.cond_dropout.to_string())
        {
            return ckpt;
        }
    }
    train(train_pairs, val_pairs, model_cfg, train_cfg, dir).unwrap();
    ckpt
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn randn(rows: usize, cols: usize, rng: &mut ChaCha20Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(rng))
}

fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for k in i..=j {
                r[idx[k]] = avg;
            }
            i = j + 1;
        }
        r
    }
    let rx = ranks(xs);
    let ry = ranks(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut num, mut dx, mut dy) = (0.0, 0.0, 0.0);
    for i in 0..xs.len() {
        num += (rx[i] - mx) * (ry[i] - my);
        dx += (rx[i] - mx).powi(2);
        dy += (ry[i] - my).powi(2);
    }
    num / (dx * dy).sqrt()
}

// ---------------------------------------------------------------------------
// criterion 1
// ---------------------------------------------------------------------------

#[test]
fn criterion_1_algebraic_kernels() {
    let started = Instant::now();
    let schedule = make_schedule(ScheduleFamily::Cosine, 1000).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(101);
    let (t, d) = (32, 8);
    let z0 = randn(t, d, &mut rng);
    let eps = randn(t, d, &mut rng);
    let assignment = NoiseAssignment {
        timesteps: (0..t).map(|_| rng.random_range(0..=1000)).collect(),
    };

    // corrupt -> v target -> invert, per-row timesteps
    let z_k = diffuse(&z0, &assignment, &eps, &schedule).unwrap();
    let v = v_target(&z0, &eps, &assignment, &schedule).unwrap();
    let (z0_hat, eps_hat) = reconstruct(&z_k, &v, &assignment, &schedule).unwrap();
    let round_trip = max_abs_diff(&z0_hat, &z0).max(max_abs_diff(&eps_hat, &eps));
    assert!(
        round_trip <= 1e-10,
        "round-trip error {round_trip:.3e} exceeds 1e-10"
    );

    // with exact v supplied at every step, a sampler ladder and a single
    // jump land on the same point
    let ladder = [1000usize, 700, 350, 120, 35, 0];
    let start = NoiseAssignment::uniform(ladder[0], t);
    let mut z = diffuse(&z0, &start, &eps, &schedule).unwrap();
    for w in ladder.windows(2) {
        let at = NoiseAssignment::uniform(w[0], t);
        let v_exact = v_target(&z0, &eps, &at, &schedule).unwrap();
        z = ddim_step(&z, &v_exact, w[0], w[1], &schedule).unwrap();
    }
    let z_start = diffuse(&z0, &start, &eps, &schedule).unwrap();
    let v_start = v_target(&z0, &eps, &start, &schedule).unwrap();
    let direct = ddim_step(&z_start, &v_start, ladder[0], 0, &schedule).unwrap();
    let multi_vs_single = max_abs_diff(&z, &direct);
    let vs_clean = max_abs_diff(&z, &z0);
    assert!(
        multi_vs_single <= 1e-8,
        "multi-step vs single-step divergence {multi_vs_single:.3e} exceeds 1e-8"
    );
    assert!(
        vs_clean <= 1e-8,
        "exact-v sampling should recover the clean signal, off by {vs_clean:.3e}"
    );

    // guidance identities are exact at the two special scales
    let v_c = randn(t, d, &mut rng);
    let v_u = randn(t, d, &mut rng);
    let at_one = cfg_combine(&v_c, &v_u, 1.0).unwrap();
    let at_zero = cfg_combine(&v_c, &v_u, 0.0).unwrap();
    assert_eq!(at_one, v_c, "scale 1 must return the conditional branch bitwise");
    assert_eq!(at_zero, v_u, "scale 0 must return the unconditional branch bitwise");

    let elapsed = started.elapsed().as_secs_f64();
    assert!(elapsed < 10.0, "kernel suite took {elapsed:.1}s, budget 10s");
    println!(
        "criterion 1 (algebraic kernels): PASS — round-trip {round_trip:.2e}, \
         ladder vs jump {multi_vs_single:.2e}, guidance identities bitwise, {elapsed:.2}s"
    );
}

// ---------------------------------------------------------------------------
// criterion 2
// ---------------------------------------------------------------------------

/// Forward the same batch twice with one input row perturbed and report
/// which output rows changed.
fn changed_rows(
    model: &Denoiser,
    mask_kind: MaskKind,
    z: &Array2<f64>,
    cond: &Array2<f64>,
    perturb: impl Fn(&mut Array2<f64>, &mut Array2<f64>),
) -> Vec<bool> {
    let t = z.nrows();
    let layout = build_chunk_layout(t, model.config().chunk_size).unwrap();
    let mask = build_mask(mask_kind, &layout);
    let timesteps: Vec<usize> = (0..t).map(|i| 40 + 10 * i).collect();
    let base = model.forward(z, &timesteps, Some(cond), &mask).unwrap();
    let mut z2 = z.clone();
    let mut c2 = cond.clone();
    perturb(&mut z2, &mut c2);
    let out = model.forward(&z2, &timesteps, Some(&c2), &mask).unwrap();
    (0..t)
        .map(|i| base.row(i) != out.row(i))
        .collect()
}

#[test]
fn criterion_2_mask_causality() {
    let started = Instant::now();
    // two chunks of four frames, as small as the contract allows
    let cfg = DenoiserConfig {
        d_latent: 6,
        d_cond: 4,
        d_model: 16,
        num_layers: 2,
        num_heads: 2,
        chunk_size: 4,
        max_context: 8,
        audio_window: 1,
        ..DenoiserConfig::default()
    };
    let mut rng = ChaCha20Rng::seed_from_u64(202);
    let model = Denoiser::new(cfg.clone(), &mut rng).unwrap();
    let z = randn(8, 6, &mut rng);
    let cond = randn(8, 4, &mut rng);

    // future chunk -> earlier chunk: dead, exactly
    let fwd = changed_rows(&model, MaskKind::Chunked, &z, &cond, |z, _| z[[6, 0]] += 1.0);
    assert_eq!(&fwd[..4], &[false; 4], "chunk 1 must not react to chunk 2 inputs");
    assert!(fwd[4..].iter().all(|&c| c), "chunk 2 must react to its own inputs");

    // within a chunk: bidirectional, and earlier chunks feed later ones
    let intra = changed_rows(&model, MaskKind::Chunked, &z, &cond, |z, _| z[[1, 0]] += 1.0);
    assert!(intra[0], "frame 1 must influence frame 0 inside the same chunk");
    assert!(intra.iter().all(|&c| c), "a chunk-1 input feeds every frame");

    // strict per-token causal mask kills the backward intra-chunk path
    let causal = changed_rows(&model, MaskKind::Causal, &z, &cond, |z, _| z[[6, 0]] += 1.0);
    assert_eq!(&causal[..6], &[false; 6], "causal mask: nothing before frame 6 reacts");
    assert!(causal[6] && causal[7]);
    let causal_back =
        changed_rows(&model, MaskKind::Causal, &z, &cond, |z, _| z[[1, 0]] += 1.0);
    assert!(!causal_back[0], "causal mask: frame 0 must ignore frame 1");

    // conditioning reaches tokens only through a +/-1-frame window: a
    // chunk-2 conditioning frame whose window stays inside chunk 2 leaves
    // chunk 1 untouched ...
    let cond_far = changed_rows(&model, MaskKind::Chunked, &z, &cond, |_, c| c[[6, 0]] += 1.0);
    assert_eq!(&cond_far[..4], &[false; 4], "chunk-2 conditioning must not leak backward");
    assert!(cond_far[4..].iter().all(|&c| c));
    // ... while the boundary frame's window crosses into chunk 1 (frame 3)
    let cond_edge = changed_rows(&model, MaskKind::Chunked, &z, &cond, |_, c| c[[4, 0]] += 1.0);
    assert!(
        cond_edge.iter().all(|&c| c),
        "conditioning at the boundary reaches chunk 1 through the window"
    );
    // ... and with a zero-width window the same perturbation stays put
    let narrow = Denoiser::new(
        DenoiserConfig {
            audio_window: 0,
            ..cfg
        },
        &mut ChaCha20Rng::seed_from_u64(202),
    )
    .unwrap();
    let cond_narrow = changed_rows(&narrow, MaskKind::Chunked, &z, &cond, |_, c| c[[4, 0]] += 1.0);
    assert_eq!(
        &cond_narrow[..4],
        &[false; 4],
        "window 0: conditioning frame 4 must stay inside chunk 2"
    );

    let elapsed = started.elapsed().as_secs_f64();
    assert!(elapsed < 60.0, "causality suite took {elapsed:.1}s, budget 60s");
    println!(
        "criterion 2 (mask causality): PASS — future-chunk influence zero, \
         intra-chunk bidirectional, causal variant strictly ordered, \
         conditioning window local, {elapsed:.2}s"
    );
}

// ---------------------------------------------------------------------------
// criterion 3
// ---------------------------------------------------------------------------

#[test]
fn criterion_3_gradient_check() {
    let started = Instant::now();
    let cfg = DenoiserConfig {
        d_latent: 5,
        d_cond: 3,
        d_model: 16,
        num_layers: 2,
        num_heads: 2,
        chunk_size: 4,
        max_context: 12,
        audio_window: 1,
        dropout_rate: 0.0,
        ..DenoiserConfig::default()
    };
    let mut rng = ChaCha20Rng::seed_from_u64(303);
    let mut model = Denoiser::new(cfg, &mut rng).unwrap();
    let schedule = make_schedule(ScheduleFamily::Cosine, 60).unwrap();
    let item = TrainItem::new(
        "probe",
        randn(12, 5, &mut rng),
        randn(12, 3, &mut rng),
        4,
    )
    .unwrap();
    let sample = sample_noise_assignment(
        &item.layout,
        TrainMode::DiffusionForcing,
        IntraChunk::Asynchronous,
        schedule.num_steps(),
        &mut rng,
    );

    // the loss consumes randomness (noise draw + conditioning-dropout
    // draw), so every evaluation reseeds the same stream
    let loss_rng = || ChaCha20Rng::seed_from_u64(777);
    let items = [&item];
    let samples = [sample];
    let (_, grads) = df_loss_and_grads(
        &model,
        &items,
        &samples,
        &schedule,
        &mut loss_rng(),
        0.0,
    )
    .unwrap();

    let mut pick = ChaCha20Rng::seed_from_u64(42);
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for _ in 0..32 {
        let pi = pick.random_range(0..grads.len());
        let (rows, cols) = grads[pi].dim();
        let (r, c) = (pick.random_range(0..rows), pick.random_range(0..cols));
        let analytic = grads[pi][[r, c]];

        let orig = model.params()[pi][[r, c]];
        model.params_mut()[pi][[r, c]] = orig + h;
        let up = df_loss(&model, &items, &samples, &schedule, &mut loss_rng(), 0.0).unwrap();
        model.params_mut()[pi][[r, c]] = orig - h;
        let down = df_loss(&model, &items, &samples, &schedule, &mut loss_rng(), 0.0).unwrap();
        model.params_mut()[pi][[r, c]] = orig;

        let fd = (up - down) / (2.0 * h);
        let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-6);
        assert!(
            rel < 1e-3,
            "param {pi}[{r},{c}]: analytic {analytic:.6e} vs central difference {fd:.6e} (rel {rel:.2e})"
        );
        worst = worst.max(rel);
    }

    let elapsed = started.elapsed().as_secs_f64();
    assert!(elapsed < 120.0, "gradient check took {elapsed:.1}s, budget 2min");
    println!(
        "criterion 3 (gradient check): PASS — 32 sampled parameters, \
         worst relative error {worst:.2e} < 1e-3, {elapsed:.2}s"
    );
}

// ---------------------------------------------------------------------------
// criterion 4
// ---------------------------------------------------------------------------

#[test]
fn criterion_4_single_chunk_loss_equivalence() {
    // with exactly one chunk there is no history to treat differently, so
    // the two training modes must price the same batch identically when
    // fed the same random stream
    let cfg = DenoiserConfig {
        d_latent: 5,
        d_cond: 3,
        d_model: 16,
        num_layers: 1,
        num_heads: 2,
        chunk_size: 8,
        max_context: 8,
        audio_window: 1,
        ..DenoiserConfig::default()
    };
    let mut rng = ChaCha20Rng::seed_from_u64(404);
    let model = Denoiser::new(cfg, &mut rng).unwrap();
    let schedule = make_schedule(ScheduleFamily::Cosine, 80).unwrap();
    let mut gap: f64 = 0.0;
    for trial in 0..8u64 {
        let item = TrainItem::new(
            format!("t{trial}"),
            randn(8, 5, &mut rng),
            randn(8, 3, &mut rng),
            8,
        )
        .unwrap();
        let items = [&item];

        let mut df_rng = ChaCha20Rng::seed_from_u64(1000 + trial);
        let sample = sample_noise_assignment(
            &item.layout,
            TrainMode::DiffusionForcing,
            IntraChunk::Synchronous,
            schedule.num_steps(),
            &mut df_rng,
        );
        let df = df_loss(&model, &items, &[sample], &schedule, &mut df_rng, 0.1).unwrap();

        let mut tf_rng = ChaCha20Rng::seed_from_u64(1000 + trial);
        let tf = tf_loss(&model, &items, &schedule, &mut tf_rng, 0.1).unwrap();

        gap = gap.max((df - tf).abs());
    }
    assert!(gap <= 1e-12, "single-chunk loss gap {gap:.3e} exceeds 1e-12");
    println!(
        "criterion 4 (single-chunk loss equivalence): PASS — both training \
         modes agree to {gap:.1e} over 8 shared-randomness trials"
    );
}

// ---------------------------------------------------------------------------
// criterion 5
// ---------------------------------------------------------------------------

#[test]
fn criterion_5_training_smoke_conditioning_margin() {
    let corpus = &*CORPUS;
    let train_seqs = load_split(corpus, "train").unwrap();
    let val_seqs = load_split(corpus, "val").unwrap();
    let train_pairs = to_pairs(&train_seqs);
    let val_pairs = to_pairs(&val_seqs);

    // the ablated baseline never sees conditioning: same corpus with the
    // conditioning channels zeroed, training and validation alike, so the
    // only difference between the two runs is the information itself
    let zero_cond = |pairs: &[CorpusPair]| -> Vec<CorpusPair> {
        pairs
            .iter()
            .map(|p| CorpusPair {
                id: p.id.clone(),
                motion: p.motion.clone(),
                cond: Array2::zeros(p.cond.raw_dim()),
            })
            .collect()
    };
    let train_zero = zero_cond(&train_pairs);
    let val_zero = zero_cond(&val_pairs);

    let model_cfg = DenoiserConfig {
        d_model: 32,
        max_context: 128,
        ..denoiser_config(128)
    };
    let train_cfg = TrainConfig {
        mode: TrainMode::DiffusionForcing,
        total_steps: SMOKE_STEPS,
        batch_tokens: 256,
        num_diffusion_steps: 1000,
        seed: 0,
        lr_final_fraction: 0.05,
        val_every: SMOKE_STEPS,
        log_every: 2000,
        checkpoint_every: SMOKE_STEPS,
        ..TrainConfig::default()
    };

    let full_ckpt = train_cached(
        &root().join("smoke").join("full"),
        &train_pairs,
        &val_pairs,
        &model_cfg,
        &train_cfg,
    );
    let base_ckpt = train_cached(
        &root().join("smoke").join("no_conditioning"),
        &train_zero,
        &val_zero,
        &model_cfg,
        &train_cfg,
    );

    let (full_model, full_meta) = load_checkpoint(&full_ckpt).unwrap();
    let (base_model, _) = load_checkpoint(&base_ckpt).unwrap();
    let schedule =
        make_schedule(full_meta.schedule_family, full_meta.num_diffusion_steps).unwrap();

    let full_val = validate(
        &full_model,
        &schedule,
        &val_pairs,
        IntraChunk::Asynchronous,
        9,
        0.0,
    )
    .unwrap();
    let base_val = validate(
        &base_model,
        &schedule,
        &val_zero,
        IntraChunk::Asynchronous,
        9,
        0.0,
    )
    .unwrap();

    let margin = (base_val - full_val) / base_val;
    assert!(
        margin >= 0.20,
        "conditioning margin {margin:.4} below 0.20 (with conditioning {full_val:.6}, without {base_val:.6})"
    );
    println!(
        "criterion 5 (training smoke): PASS — {SMOKE_STEPS} steps, validation \
         loss {full_val:.4} with conditioning vs {base_val:.4} without: margin {:.1}%",
        margin * 100.0
    );
}

// ---------------------------------------------------------------------------
// criteria 6 and 8 share the trained variant matrix
// ---------------------------------------------------------------------------

struct MatrixFixture {
    out: PathBuf,
    scores: std::collections::BTreeMap<String, xmot::harness::VariantScore>,
}

static MATRIX: LazyLock<MatrixFixture> = LazyLock::new(|| {
    let corpus = &*CORPUS;
    let out = root().join("matrix");
    let train_cfg = TrainConfig {
        mode: TrainMode::DiffusionForcing,
        total_steps: ABLATE_STEPS,
        batch_tokens: 256,
        num_diffusion_steps: 1000,
        val_every: ABLATE_STEPS,
        log_every: 2000,
        checkpoint_every: ABLATE_STEPS,
        ..TrainConfig::default()
    };
    let mut opts = AblateOptions::new(train_cfg, denoiser_config(256));
    opts.variants = vec![
        "full".into(),
        "teacher_forcing".into(),
        "no_cfg".into(),
        "vanilla_history".into(),
    ];
    opts.seeds = ABLATE_SEEDS.to_vec();
    opts.ddim_steps = ABLATE_DDIM;
    opts.cfg_scale = ABLATE_CFG;
    opts.eval_limit = None;
    let outcome = run_ablate(corpus, &out, &opts).unwrap();
    let scores = outcome
        .scores
        .into_iter()
        .map(|s| (s.variant.clone(), s))
        .collect();
    MatrixFixture { out, scores }
});

/// Mean per-chunk drift curve of one variant's generated sequences,
/// averaged over every sequence and training seed.
fn mean_drift_curve(fixture: &MatrixFixture, variant: &str) -> Vec<f64> {
    let meta = load_meta(&CORPUS).unwrap();
    let mut sum = vec![0.0; EVAL_LEN / CHUNK];
    let mut n = 0usize;
    for seed in ABLATE_SEEDS {
        let gen_dir = fixture.out.join(variant).join(format!("seed{seed}")).join("gen");
        for entry in std::fs::read_dir(&gen_dir).unwrap() {
            let p = entry.unwrap().path();
            if p.extension().map(|e| e == "xmot") != Some(true) {
                continue;
            }
            let m = xmot::formats::read_motion(&p).unwrap();
            let layout = build_chunk_layout(m.len(), CHUNK).unwrap();
            let curve = drift_curve(&m, &meta.ref_stats, &layout).unwrap();
            assert_eq!(curve.len(), sum.len());
            for (s, c) in sum.iter_mut().zip(&curve) {
                *s += c;
            }
            n += 1;
        }
    }
    assert_eq!(n, EVAL_COUNT * ABLATE_SEEDS.len(), "missing generated sequences");
    for s in &mut sum {
        *s /= n as f64;
    }
    sum
}

#[test]
fn criterion_6_directional_ablations() {
    let fixture = &*MATRIX;
    let full = &fixture.scores["full"];
    let tf = &fixture.scores["teacher_forcing"];
    let no_cfg = &fixture.scores["no_cfg"];

    assert!(
        full.sync_c > tf.sync_c,
        "synchrony must favor noisy-history training: full {:.4} vs clean-history {:.4}",
        full.sync_c,
        tf.sync_c
    );
    assert!(
        no_cfg.sync_c < full.sync_c && no_cfg.sync_c < tf.sync_c,
        "unguided sampling must score lowest: {:.4} vs full {:.4}, clean-history {:.4}",
        no_cfg.sync_c,
        full.sync_c,
        tf.sync_c
    );
    assert!(
        tf.drift_auc > full.drift_auc,
        "clean-history training must drift more: {:.4} vs {:.4}",
        tf.drift_auc,
        full.drift_auc
    );

    // the drift gap must widen with chunk index
    let full_curve = mean_drift_curve(fixture, "full");
    let tf_curve = mean_drift_curve(fixture, "teacher_forcing");
    let gap: Vec<f64> = tf_curve
        .iter()
        .zip(&full_curve)
        .map(|(a, b)| a - b)
        .collect();
    let idx: Vec<f64> = (0..gap.len()).map(|i| i as f64).collect();
    let rho = spearman(&idx, &gap);
    assert!(
        rho > 0.0,
        "drift gap must grow with chunk index, got rank correlation {rho:.3} over gap {gap:.3?}"
    );

    println!(
        "criterion 6 (directional ablations): PASS — sync_c full {:.4} > clean-history {:.4} > unguided {:.4}; \
         drift {:.3} vs {:.3}, gap trend rho {:.3} over {} chunks, means over {} seeds x {} sequences",
        full.sync_c,
        tf.sync_c,
        no_cfg.sync_c,
        tf.drift_auc,
        full.drift_auc,
        rho,
        gap.len(),
        ABLATE_SEEDS.len(),
        EVAL_COUNT
    );
}

// ---------------------------------------------------------------------------
// criterion 7
// ---------------------------------------------------------------------------

#[test]
fn criterion_7_long_form_stability() {
    // same training distribution as the shared corpus, one held-out
    // conditioning stream of 100 chunks
    let long_dir = root().join("long_corpus");
    let cfg = SynthConfig {
        eval_sequences: 1,
        eval_len: LONG_CHUNKS * CHUNK,
        ..synth_config()
    };
    if long_dir.exists() {
        std::fs::remove_dir_all(&long_dir).unwrap();
    }
    run_gen_data(&cfg, &long_dir).unwrap();

    let train_seqs = load_split(&long_dir, "train").unwrap();
    let val_seqs = load_split(&long_dir, "val").unwrap();
    let model_cfg = DenoiserConfig {
        d_model: 32,
        ..denoiser_config(LONG_CONTEXT)
    };
    let train_cfg = TrainConfig {
        mode: TrainMode::DiffusionForcing,
        total_steps: LONG_STEPS,
        batch_tokens: LONG_CONTEXT,
        num_diffusion_steps: 1000,
        seed: 0,
        val_every: LONG_STEPS,
        log_every: 2000,
        checkpoint_every: LONG_STEPS,
        ..TrainConfig::default()
    };
    let ckpt = train_cached(
        &root().join("long_model"),
        &to_pairs(&train_seqs),
        &to_pairs(&val_seqs),
        &model_cfg,
        &train_cfg,
    );

    let (model, meta) = load_checkpoint(&ckpt).unwrap();
    let schedule = make_schedule(meta.schedule_family, meta.num_diffusion_steps).unwrap();
    let eval_seqs = load_split(&long_dir, "eval").unwrap();
    let cond = &eval_seqs[0].cond;
    assert_eq!(cond.len(), LONG_CHUNKS * CHUNK);

    let inf = InferenceConfig {
        ddim_steps: ABLATE_DDIM,
        cfg_scale: ABLATE_CFG,
        scheduler: HistoryScheduler::linear_ramp(schedule.num_steps()),
        seed: 5,
        chunk_size: None,
        max_context: None,
    };
    let motion = generate_sequence(&model, &schedule, cond, &inf).unwrap();
    assert_eq!(motion.len(), LONG_CHUNKS * CHUNK);
    assert!(
        motion.data().iter().all(|v| v.is_finite()),
        "every generated value must stay finite over the long rollout"
    );

    // the rolling window seen by the model is capped by the configured
    // context at every one of the 100 chunks: memory use stays flat no
    // matter how long the rollout runs
    let mut peak_window = 0usize;
    for c in 0..LONG_CHUNKS {
        let next_start = c * CHUNK;
        let start = history_window_start(next_start, CHUNK, CHUNK, LONG_CONTEXT);
        peak_window = peak_window.max(next_start + CHUNK - start);
    }
    assert_eq!(peak_window, LONG_CONTEXT, "rolling window must top out at the context cap");

    let meta_corpus = load_meta(&long_dir).unwrap();
    let layout = build_chunk_layout(motion.len(), CHUNK).unwrap();
    let curve = drift_curve(&motion, &meta_corpus.ref_stats, &layout).unwrap();
    assert_eq!(curve.len(), LONG_CHUNKS);
    // chunks 2-11 (1-indexed) against the final ten
    let early = drift_auc(&curve[1..11]);
    let late = drift_auc(&curve[LONG_CHUNKS - 10..]);
    assert!(
        late <= 2.0 * early,
        "late drift {late:.4} exceeds twice the early drift {early:.4}"
    );
    println!(
        "criterion 7 (long-form stability): PASS — {} chunks generated, all \
         latents finite, window peaked at {peak_window} frames, drift early {early:.3} \
         vs late {late:.3} (ratio {:.2} <= 2)",
        LONG_CHUNKS,
        late / early
    );
}

// ---------------------------------------------------------------------------
// criterion 8
// ---------------------------------------------------------------------------

#[test]
fn criterion_8_history_scheduler_contract() {
    let ramp = HistoryScheduler::linear_ramp(1000);
    let levels = ramp.history_levels(5);
    assert_eq!(
        levels,
        vec![1000, 750, 500, 250, 0],
        "five history frames under a 1000-step ramp"
    );

    let fixture = &*MATRIX;
    let ramp_acc = fixture.scores["full"].regime_acc;
    let vanilla_acc = fixture.scores["vanilla_history"].regime_acc;
    assert!(
        ramp_acc >= vanilla_acc,
        "recency-ramped history guidance must not lose to the constant level: {ramp_acc:.4} vs {vanilla_acc:.4}"
    );
    println!(
        "criterion 8 (history scheduler contract): PASS — ramp levels {levels:?}; \
         held-out regime accuracy {ramp_acc:.4} (ramp) >= {vanilla_acc:.4} (constant)"
    );
}

// ---------------------------------------------------------------------------
// criterion 9
// ---------------------------------------------------------------------------

#[test]
fn criterion_9_format_and_determinism() {
    let dir = root().join("determinism");
    std::fs::create_dir_all(&dir).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(909);

    // binary matrix files survive a round trip bitwise
    let fr = xmot::types::FrameRate::new(30, 1).unwrap();
    let quantized = Array2::from_shape_fn((96, 16), |_| {
        {
        let x: f64 = StandardNormal.sample(&mut rng);
        f64::from(x as f32)
    }
    });
    let motion = xmot::types::MotionSequence::new(quantized.clone(), fr).unwrap();
    let m_path = dir.join("round.xmot");
    xmot::formats::write_motion(&m_path, &motion).unwrap();
    let motion_back = xmot::formats::read_motion(&m_path).unwrap();
    assert_eq!(motion_back.data(), motion.data(), "motion payload must round-trip bitwise");
    assert_eq!(motion_back.frame_rate(), fr);
    let bytes_a = std::fs::read(&m_path).unwrap();
    xmot::formats::write_motion(&m_path, &motion_back).unwrap();
    assert_eq!(bytes_a, std::fs::read(&m_path).unwrap(), "rewrite must be byte-identical");

    let cond_data = Array2::from_shape_fn((96, 8), |_| {
        {
        let x: f64 = StandardNormal.sample(&mut rng);
        f64::from(x as f32)
    }
    });
    let cond = ConditioningSequence::new(cond_data, fr).unwrap();
    let c_path = dir.join("round.xcnd");
    xmot::formats::write_cond(&c_path, &cond).unwrap();
    assert_eq!(xmot::formats::read_cond(&c_path).unwrap().data(), cond.data());

    // a fixed seed reproduces generation bitwise across two separate runs
    let model = Denoiser::new(
        DenoiserConfig {
            d_latent: 6,
            d_cond: 4,
            d_model: 16,
            num_layers: 1,
            num_heads: 2,
            chunk_size: 8,
            max_context: 24,
            ..DenoiserConfig::default()
        },
        &mut ChaCha20Rng::seed_from_u64(910),
    )
    .unwrap();
    let schedule = make_schedule(ScheduleFamily::Cosine, 40).unwrap();
    let gen_cond = ConditioningSequence::new(randn(40, 4, &mut rng), fr).unwrap();
    let inf = InferenceConfig {
        ddim_steps: 5,
        cfg_scale: 2.0,
        scheduler: HistoryScheduler::linear_ramp(40),
        seed: 31,
        chunk_size: None,
        max_context: None,
    };
    let once = generate_sequence(&model, &schedule, &gen_cond, &inf).unwrap();
    let twice = generate_sequence(&model, &schedule, &gen_cond, &inf).unwrap();
    assert_eq!(once.data(), twice.data(), "same seed must reproduce samples bitwise");
    let sampler_grid = ddim_grid(schedule.num_steps(), inf.ddim_steps);
    assert_eq!(sampler_grid.first(), Some(&schedule.num_steps()));
    assert_eq!(sampler_grid.last(), Some(&0));

    println!(
        "criterion 9 (format and determinism): PASS — matrix files round-trip \
         bitwise, repeated fixed-seed generation identical over {} frames",
        once.len()
    );
}
