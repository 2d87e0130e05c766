//! Subcommand implementations behind the CLI: corpus emission, training
//! runs, generation, evaluation, and the ablation matrix. Everything here
//! is a plain library function so the integration tests drive the exact
//! code the binary runs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::write_kv_file;
use crate::error::{Error, Result};
use crate::formats::{read_cond, read_motion, read_truth_jsonl, write_cond, write_motion, write_truth_jsonl};
use crate::inference::{generate_sequence, HistoryKind, HistoryScheduler, InferenceConfig};
use crate::metrics::{drift_auc, drift_curve, glo_exp, regime_acc, regimes_from_cond, sync_proxy};
use crate::model::{load_checkpoint, DenoiserConfig, MaskKind};
use crate::schedule::make_schedule;
use crate::synthdata::{generate_corpus, Corpus, CorpusMeta, FrameTruth, SynthConfig};
use crate::training::{train, CorpusPair, IntraChunk, TrainConfig, TrainMode, TrainOutcome};
use crate::types::{build_chunk_layout, ConditioningSequence, MotionSequence};

/// Canonical ablation rows, in output order: the full pipeline plus its six
/// single-change variants (three retrained, three inference-only).
pub const ABLATION_VARIANTS: [&str; 7] = [
    "full",
    "fully_causal_attention",
    "teacher_forcing",
    "synchronous_interchunk",
    "no_cfg",
    "vanilla_history",
    "fractional_history",
];

pub const EVAL_CSV_HEADER: &str = "sequence,sync_c,sync_d,glo,exp,dglo,dexp,regime_acc,drift_auc";

fn mkdirs(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

/// Key=value view of the corpus generator options (the `gen-data` echo).
pub fn synth_kv(cfg: &SynthConfig) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    m.insert("num_sequences".into(), cfg.num_sequences.to_string());
    m.insert("len_min".into(), cfg.len_min.to_string());
    m.insert("len_max".into(), cfg.len_max.to_string());
    m.insert("d".into(), cfg.d.to_string());
    m.insert("d_a".into(), cfg.d_a.to_string());
    m.insert("frame_rate".into(), format!("{}/{}", cfg.frame_rate.num, cfg.frame_rate.den));
    m.insert("regime_count".into(), cfg.regime_count.to_string());
    m.insert("regime_switch_prob".into(), cfg.regime_switch_prob.to_string());
    m.insert("lag".into(), cfg.lag.to_string());
    m.insert("seed".into(), cfg.seed.to_string());
    m.insert("val_fraction".into(), cfg.val_fraction.to_string());
    m.insert("eval_sequences".into(), cfg.eval_sequences.to_string());
    m.insert("eval_len".into(), cfg.eval_len.to_string());
    m
}

/// Generate a corpus and write it under `out`: one `<id>.xmot`,
/// `<id>.xcnd`, and `<id>.truth.jsonl` triple per sequence in `train/`,
/// `val/`, and (when configured) `eval/`, plus `corpus_meta.json` and the
/// effective configuration. Returns the in-memory corpus.
pub fn run_gen_data(cfg: &SynthConfig, out: &Path) -> Result<Corpus> {
    let corpus = generate_corpus(cfg)?;
    for (split, seqs) in [
        ("train", &corpus.train),
        ("val", &corpus.val),
        ("eval", &corpus.eval),
    ] {
        if seqs.is_empty() {
            continue;
        }
        let dir = out.join(split);
        mkdirs(&dir)?;
        for s in seqs {
            write_motion(&dir.join(format!("{}.xmot", s.id)), &s.motion)?;
            write_cond(&dir.join(format!("{}.xcnd", s.id)), &s.cond)?;
            write_truth_jsonl(&dir.join(format!("{}.truth.jsonl", s.id)), &s.truth)?;
        }
    }
    let meta_json = serde_json::to_string_pretty(&corpus.meta).map_err(|e| Error::Json {
        context: "serializing corpus metadata".into(),
        source: e,
    })?;
    mkdirs(out)?;
    fs::write(out.join("corpus_meta.json"), meta_json)
        .map_err(|e| Error::io("writing corpus_meta.json", e))?;
    write_kv_file(&out.join("effective.cfg"), &synth_kv(cfg))?;
    Ok(corpus)
}

// ---------------------------------------------------------------------------
// corpus loading
// ---------------------------------------------------------------------------

pub fn load_meta(data: &Path) -> Result<CorpusMeta> {
    let path = data.join("corpus_meta.json");
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        context: format!("parsing {}", path.display()),
        source: e,
    })
}

/// One on-disk sequence of a split, with its optional truth sidecar.
#[derive(Debug, Clone)]
pub struct SplitSequence {
    pub id: String,
    pub motion: MotionSequence,
    pub cond: ConditioningSequence,
    pub truth: Option<Vec<FrameTruth>>,
}

/// Load a split directory (`<data>/<split>`) in deterministic id order.
pub fn load_split(data: &Path, split: &str) -> Result<Vec<SplitSequence>> {
    let dir = data.join(split);
    let entries = fs::read_dir(&dir)
        .map_err(|e| Error::io(format!("reading split directory {}", dir.display()), e))?;
    let mut ids = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io("listing split directory", e))?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) == Some("xmot") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    let mut seqs = Vec::with_capacity(ids.len());
    for id in ids {
        let motion = read_motion(&dir.join(format!("{id}.xmot")))?;
        let cond = read_cond(&dir.join(format!("{id}.xcnd")))?;
        let truth_path = dir.join(format!("{id}.truth.jsonl"));
        let truth = if truth_path.exists() {
            Some(read_truth_jsonl(&truth_path)?)
        } else {
            None
        };
        seqs.push(SplitSequence {
            id,
            motion,
            cond,
            truth,
        });
    }
    if seqs.is_empty() {
        return Err(Error::invalid(format!(
            "split directory {} contains no .xmot files",
            dir.display()
        )));
    }
    Ok(seqs)
}

pub fn to_pairs(seqs: &[SplitSequence]) -> Vec<CorpusPair> {
    seqs.iter()
        .map(|s| CorpusPair {
            id: s.id.clone(),
            motion: s.motion.data().clone(),
            cond: s.cond.data().clone(),
        })
        .collect()
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

/// Key=value view of a full training setup (the `train` echo). Model
/// dimensions are included so a run directory is self-describing.
pub fn train_kv(model: &DenoiserConfig, cfg: &TrainConfig) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    m.insert("mode".into(), cfg.mode.to_string());
    m.insert("intra_chunk".into(), cfg.intra_chunk.to_string());
    m.insert("cond_dropout".into(), cfg.cond_dropout.to_string());
    m.insert("learning_rate".into(), cfg.learning_rate.to_string());
    m.insert("lr_final_fraction".into(), cfg.lr_final_fraction.to_string());
    m.insert("batch_tokens".into(), cfg.batch_tokens.to_string());
    m.insert("total_steps".into(), cfg.total_steps.to_string());
    m.insert("seed".into(), cfg.seed.to_string());
    m.insert("schedule_family".into(), cfg.schedule_family.to_string());
    m.insert("num_diffusion_steps".into(), cfg.num_diffusion_steps.to_string());
    m.insert("log_every".into(), cfg.log_every.to_string());
    m.insert("checkpoint_every".into(), cfg.checkpoint_every.to_string());
    m.insert("val_every".into(), cfg.val_every.to_string());
    m.insert("d_latent".into(), model.d_latent.to_string());
    m.insert("d_cond".into(), model.d_cond.to_string());
    m.insert("d_model".into(), model.d_model.to_string());
    m.insert("num_layers".into(), model.num_layers.to_string());
    m.insert("num_heads".into(), model.num_heads.to_string());
    m.insert("chunk_size".into(), model.chunk_size.to_string());
    m.insert("max_context".into(), model.max_context.to_string());
    m.insert("audio_window".into(), model.audio_window.to_string());
    m.insert("dropout_rate".into(), model.dropout_rate.to_string());
    m.insert("mask".into(), model.mask.to_string());
    m
}

/// Train on a corpus directory: loads `train/` and `val/`, adopts the
/// corpus' latent/conditioning widths, writes checkpoint + logs + the
/// effective config into `out`.
pub fn run_train(
    data: &Path,
    out: &Path,
    model_cfg: &DenoiserConfig,
    train_cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let train_seqs = load_split(data, "train")?;
    let val_seqs = load_split(data, "val").unwrap_or_default();
    let mut model_cfg = model_cfg.clone();
    model_cfg.d_latent = train_seqs[0].motion.dim();
    model_cfg.d_cond = train_seqs[0].cond.dim();
    mkdirs(out)?;
    write_kv_file(&out.join("effective.cfg"), &train_kv(&model_cfg, train_cfg))?;
    train(
        &to_pairs(&train_seqs),
        &to_pairs(&val_seqs),
        &model_cfg,
        train_cfg,
        out,
    )
}

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

/// Key=value view of an inference setup (the `generate` echo).
pub fn inference_kv(cfg: &InferenceConfig) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    m.insert("ddim_steps".into(), cfg.ddim_steps.to_string());
    m.insert("cfg_scale".into(), cfg.cfg_scale.to_string());
    m.insert("seed".into(), cfg.seed.to_string());
    m.insert("k_max".into(), cfg.scheduler.k_max.to_string());
    let (kind, extra) = match cfg.scheduler.kind {
        HistoryKind::LinearRamp => ("linear_ramp".to_string(), None),
        HistoryKind::Vanilla { level } => ("vanilla".to_string(), Some(("vanilla_level", level))),
        HistoryKind::Fractional { groups } => {
            ("fractional".to_string(), Some(("fractional_groups", groups)))
        }
    };
    m.insert("scheduler".into(), kind);
    if let Some((k, v)) = extra {
        m.insert(k.into(), v.to_string());
    }
    if let Some(cs) = cfg.chunk_size {
        m.insert("chunk_size".into(), cs.to_string());
    }
    if let Some(mc) = cfg.max_context {
        m.insert("max_context".into(), mc.to_string());
    }
    m
}

/// Generate motion for one conditioning file using a trained checkpoint,
/// writing `<out>.xmot` and an effective-config echo beside it.
pub fn run_generate(
    checkpoint: &Path,
    cond_path: &Path,
    out_path: &Path,
    inference: &InferenceConfig,
) -> Result<MotionSequence> {
    let (model, meta) = load_checkpoint(checkpoint)?;
    let schedule = make_schedule(meta.schedule_family, meta.num_diffusion_steps)?;
    let cond = read_cond(cond_path)?;
    let motion = generate_sequence(&model, &schedule, &cond, inference)?;
    if let Some(dir) = out_path.parent() {
        if !dir.as_os_str().is_empty() {
            mkdirs(dir)?;
        }
    }
    write_motion(out_path, &motion)?;
    let mut echo = inference_kv(inference);
    echo.insert("checkpoint".into(), checkpoint.display().to_string());
    echo.insert("cond".into(), cond_path.display().to_string());
    write_kv_file(&out_path.with_extension("cfg"), &echo)?;
    Ok(motion)
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

/// One row of the evaluation CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub sequence: String,
    pub sync_c: f64,
    pub sync_d: f64,
    pub glo: f64,
    pub exp: f64,
    pub dglo: f64,
    pub dexp: f64,
    pub regime_acc: f64,
    pub drift_auc: f64,
}

/// Score one generated sequence against its conditioning, optional truth
/// sidecar, and optional ground-truth reference motion.
pub fn eval_sequence(
    meta: &CorpusMeta,
    chunk_size: usize,
    max_lag: usize,
    id: &str,
    generated: &MotionSequence,
    cond: &ConditioningSequence,
    truth: Option<&[FrameTruth]>,
    reference: Option<&MotionSequence>,
) -> Result<EvalRow> {
    let sync = sync_proxy(cond, generated, max_lag, Some(meta.config.lag as isize))?;
    let (glo, exp) = glo_exp(generated)?;
    let (dglo, dexp) = match reference {
        Some(r) => {
            let (rg, re) = glo_exp(r)?;
            ((glo - rg).abs(), (exp - re).abs())
        }
        None => (f64::NAN, f64::NAN),
    };
    let labels: Vec<usize> = match truth {
        Some(t) => {
            if t.len() != generated.len() {
                return Err(Error::invalid(format!(
                    "truth sidecar for {id} covers {} frames, motion has {}",
                    t.len(),
                    generated.len()
                )));
            }
            t.iter().map(|f| f.regime).collect()
        }
        None => regimes_from_cond(cond, meta.config.regime_count)?,
    };
    let layout = build_chunk_layout(generated.len(), chunk_size)?;
    let acc = regime_acc(generated, &labels, &meta.regime_freqs, &layout)?;
    let curve = drift_curve(generated, &meta.ref_stats, &layout)?;
    Ok(EvalRow {
        sequence: id.to_string(),
        sync_c: sync.sync_c,
        sync_d: sync.sync_d,
        glo,
        exp,
        dglo,
        dexp,
        regime_acc: acc,
        drift_auc: drift_auc(&curve),
    })
}

pub fn write_eval_csv(path: &Path, rows: &[EvalRow]) -> Result<()> {
    let mut out = String::from(EVAL_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            r.sequence, r.sync_c, r.sync_d, r.glo, r.exp, r.dglo, r.dexp, r.regime_acc, r.drift_auc
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Evaluate generated motion against a corpus split. `generated` is either
/// a single `.xmot` file or a directory of them; each file's stem is
/// matched to `<data>/<split>/<stem>.xcnd` (plus truth sidecar and
/// reference motion when present). Writes the CSV and returns the rows.
pub fn run_eval(
    generated: &Path,
    data: &Path,
    split: &str,
    out_csv: &Path,
    chunk_size: usize,
    max_lag: usize,
) -> Result<Vec<EvalRow>> {
    let meta = load_meta(data)?;
    let mut files: Vec<PathBuf> = Vec::new();
    let meta_fs = fs::metadata(generated)
        .map_err(|e| Error::io(format!("inspecting {}", generated.display()), e))?;
    if meta_fs.is_dir() {
        for entry in
            fs::read_dir(generated).map_err(|e| Error::io("listing generated directory", e))?
        {
            let path = entry.map_err(|e| Error::io("listing generated directory", e))?.path();
            if path.extension().and_then(|e| e.to_str()) == Some("xmot") {
                files.push(path);
            }
        }
        files.sort();
        if files.is_empty() {
            return Err(Error::invalid(format!(
                "{} contains no .xmot files",
                generated.display()
            )));
        }
    } else {
        files.push(generated.to_path_buf());
    }

    let split_dir = data.join(split);
    let mut rows = Vec::with_capacity(files.len());
    for file in &files {
        let id = file
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::invalid(format!("bad file name {}", file.display())))?;
        let motion = read_motion(file)?;
        let cond = read_cond(&split_dir.join(format!("{id}.xcnd")))?;
        if cond.len() != motion.len() {
            return Err(Error::invalid(format!(
                "{id}: generated motion has {} frames, conditioning {}",
                motion.len(),
                cond.len()
            )));
        }
        let truth_path = split_dir.join(format!("{id}.truth.jsonl"));
        let truth = if truth_path.exists() {
            Some(read_truth_jsonl(&truth_path)?)
        } else {
            None
        };
        let ref_path = split_dir.join(format!("{id}.xmot"));
        let reference = if ref_path.exists() {
            Some(read_motion(&ref_path)?)
        } else {
            None
        };
        rows.push(eval_sequence(
            &meta,
            chunk_size,
            max_lag,
            id,
            &motion,
            &cond,
            truth.as_deref(),
            reference.as_ref(),
        )?);
    }
    if let Some(dir) = out_csv.parent() {
        if !dir.as_os_str().is_empty() {
            mkdirs(dir)?;
        }
    }
    write_eval_csv(out_csv, &rows)?;
    Ok(rows)
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct AblateOptions {
    /// Which variants to run, in output order; must be a subset of
    /// [`ABLATION_VARIANTS`].
    pub variants: Vec<String>,
    /// Training seeds; scores are averaged across them.
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
    pub model: DenoiserConfig,
    pub ddim_steps: usize,
    pub cfg_scale: f64,
    pub fractional_groups: usize,
    /// Cap on held-out sequences to generate per variant/seed.
    pub eval_limit: Option<usize>,
    pub max_lag: usize,
    /// Reuse an existing checkpoint whose manifest matches instead of
    /// retraining (resumability for the expensive matrix).
    pub reuse_checkpoints: bool,
}

impl AblateOptions {
    pub fn new(train: TrainConfig, model: DenoiserConfig) -> Self {
        AblateOptions {
            variants: ABLATION_VARIANTS.iter().map(|s| s.to_string()).collect(),
            seeds: vec![0],
            train,
            model,
            ddim_steps: 12,
            cfg_scale: 3.0,
            fractional_groups: 4,
            eval_limit: None,
            max_lag: 8,
            reuse_checkpoints: true,
        }
    }
}

/// Mean metrics of one variant across held-out sequences and seeds.
#[derive(Debug, Clone)]
pub struct VariantScore {
    pub variant: String,
    pub sync_c: f64,
    pub sync_d: f64,
    pub glo: f64,
    pub exp: f64,
    pub dglo: f64,
    pub dexp: f64,
    pub regime_acc: f64,
    pub drift_auc: f64,
}

#[derive(Debug)]
pub struct AblateOutcome {
    pub scores: Vec<VariantScore>,
    /// Every individual row, keyed by (variant, seed).
    pub per_seed: BTreeMap<(String, u64), Vec<EvalRow>>,
    pub csv_path: PathBuf,
}

/// Training deltas for a variant, or `None` when it reuses the full
/// pipeline's checkpoint and only changes inference.
fn variant_training(variant: &str) -> Result<Option<(TrainMode, IntraChunk, MaskKind)>> {
    Ok(match variant {
        "full" => Some((
            TrainMode::DiffusionForcing,
            IntraChunk::Asynchronous,
            MaskKind::Chunked,
        )),
        "fully_causal_attention" => Some((
            TrainMode::DiffusionForcing,
            IntraChunk::Asynchronous,
            MaskKind::Causal,
        )),
        "teacher_forcing" => Some((
            TrainMode::TeacherForcing,
            IntraChunk::Asynchronous,
            MaskKind::Chunked,
        )),
        "synchronous_interchunk" => Some((
            TrainMode::DiffusionForcing,
            IntraChunk::Synchronous,
            MaskKind::Chunked,
        )),
        "no_cfg" | "vanilla_history" | "fractional_history" => None,
        other => {
            return Err(Error::invalid(format!(
                "unknown ablation variant {other:?}; known: {}",
                ABLATION_VARIANTS.join(", ")
            )))
        }
    })
}

fn variant_inference(variant: &str, opts: &AblateOptions, k_max: usize, seed: u64) -> InferenceConfig {
    let mut cfg = InferenceConfig {
        ddim_steps: opts.ddim_steps,
        cfg_scale: opts.cfg_scale,
        scheduler: HistoryScheduler::linear_ramp(k_max),
        seed,
        chunk_size: None,
        max_context: None,
    };
    match variant {
        "no_cfg" => cfg.cfg_scale = 1.0,
        "vanilla_history" => cfg.scheduler = HistoryScheduler::vanilla(k_max),
        "fractional_history" => {
            cfg.scheduler = HistoryScheduler::fractional(k_max, opts.fractional_groups)
        }
        // A model trained on clean history is rolled out the classic way:
        // no history corruption, so any degradation comes purely from its
        // own compounding prediction errors.
        "teacher_forcing" => cfg.scheduler = HistoryScheduler::vanilla_at(k_max, 0),
        _ => {}
    }
    cfg
}

/// The variant whose checkpoint a given variant generates from.
fn checkpoint_variant(variant: &str) -> &str {
    match variant {
        "no_cfg" | "vanilla_history" | "fractional_history" => "full",
        v => v,
    }
}

/// A checkpoint trained earlier can stand in for a retrain only when its
/// manifest records the same variant setup.
fn checkpoint_matches(path: &Path, cfg: &TrainConfig) -> bool {
    match load_checkpoint(path) {
        Ok((_, meta)) => {
            let want = |k: &str, v: &str| meta.extra.get(k).map(String::as_str) == Some(v);
            want("train_mode", &cfg.mode.to_string())
                && want("intra_chunk", &cfg.intra_chunk.to_string())
                && want("seed", &cfg.seed.to_string())
                && want("step", &cfg.total_steps.to_string())
        }
        Err(_) => false,
    }
}

/// Run the ablation matrix: train each retrained variant per seed, generate
/// the held-out split under every variant's inference setup, score it, and
/// emit `ablation.csv` (one row per variant, mean over sequences and
/// seeds).
pub fn run_ablate(data: &Path, out: &Path, opts: &AblateOptions) -> Result<AblateOutcome> {
    if opts.variants.is_empty() || opts.seeds.is_empty() {
        return Err(Error::invalid("ablation needs at least one variant and one seed"));
    }
    for v in &opts.variants {
        variant_training(v)?; // validates the name
    }
    let eval_seqs = load_split(data, "eval").map_err(|e| {
        Error::invalid(format!(
            "ablation needs a held-out eval split under {}: {e}",
            data.display()
        ))
    })?;
    let eval_seqs = match opts.eval_limit {
        Some(n) => &eval_seqs[..n.min(eval_seqs.len())],
        None => &eval_seqs[..],
    };
    let meta = load_meta(data)?;
    mkdirs(out)?;

    // every checkpoint the requested variants depend on
    let mut to_train: Vec<String> = opts
        .variants
        .iter()
        .map(|v| checkpoint_variant(v).to_string())
        .collect();
    to_train.sort();
    to_train.dedup();

    for variant in &to_train {
        let (mode, intra, mask) = variant_training(variant)?.expect("trained variant");
        for &seed in &opts.seeds {
            let dir = out.join(variant).join(format!("seed{seed}"));
            let ckpt = dir.join("checkpoint.xckp");
            let mut tcfg = opts.train.clone();
            tcfg.mode = mode;
            tcfg.intra_chunk = intra;
            tcfg.seed = seed;
            if opts.reuse_checkpoints && checkpoint_matches(&ckpt, &tcfg) {
                continue;
            }
            let mut mcfg = opts.model.clone();
            mcfg.mask = mask;
            mkdirs(&dir)?;
            run_train(data, &dir, &mcfg, &tcfg)?;
        }
    }

    let mut per_seed: BTreeMap<(String, u64), Vec<EvalRow>> = BTreeMap::new();
    let mut scores = Vec::with_capacity(opts.variants.len());
    for variant in &opts.variants {
        let mut sums = [0.0f64; 8];
        let mut count = 0usize;
        for &seed in &opts.seeds {
            let ckpt = out
                .join(checkpoint_variant(variant))
                .join(format!("seed{seed}"))
                .join("checkpoint.xckp");
            let (model, ckpt_meta) = load_checkpoint(&ckpt)?;
            let schedule = make_schedule(ckpt_meta.schedule_family, ckpt_meta.num_diffusion_steps)?;
            let inf = variant_inference(variant, opts, schedule.num_steps(), seed);
            let gen_dir = out.join(variant).join(format!("seed{seed}")).join("gen");
            mkdirs(&gen_dir)?;

            let mut rows = Vec::with_capacity(eval_seqs.len());
            for s in eval_seqs {
                let motion = generate_sequence(&model, &schedule, &s.cond, &inf)?;
                write_motion(&gen_dir.join(format!("{}.xmot", s.id)), &motion)?;
                let row = eval_sequence(
                    &meta,
                    model.config().chunk_size,
                    opts.max_lag,
                    &s.id,
                    &motion,
                    &s.cond,
                    s.truth.as_deref(),
                    Some(&s.motion),
                )?;
                for (acc, v) in sums.iter_mut().zip([
                    row.sync_c,
                    row.sync_d,
                    row.glo,
                    row.exp,
                    row.dglo,
                    row.dexp,
                    row.regime_acc,
                    row.drift_auc,
                ]) {
                    *acc += v;
                }
                count += 1;
                rows.push(row);
            }
            write_eval_csv(
                &out.join(variant).join(format!("seed{seed}")).join("eval.csv"),
                &rows,
            )?;
            per_seed.insert((variant.clone(), seed), rows);
        }
        let n = count as f64;
        scores.push(VariantScore {
            variant: variant.clone(),
            sync_c: sums[0] / n,
            sync_d: sums[1] / n,
            glo: sums[2] / n,
            exp: sums[3] / n,
            dglo: sums[4] / n,
            dexp: sums[5] / n,
            regime_acc: sums[6] / n,
            drift_auc: sums[7] / n,
        });
    }

    let csv_path = out.join("ablation.csv");
    let mut csv = String::from("variant,sync_c,sync_d,glo,exp,dglo,dexp,regime_acc,drift_auc\n");
    for s in &scores {
        csv.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            s.variant, s.sync_c, s.sync_d, s.glo, s.exp, s.dglo, s.dexp, s.regime_acc, s.drift_auc
        ));
    }
    fs::write(&csv_path, csv).map_err(|e| Error::io("writing ablation.csv", e))?;

    let mut echo = train_kv(&opts.model, &opts.train);
    echo.insert("variants".into(), opts.variants.join(" "));
    echo.insert(
        "seeds".into(),
        opts.seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(" "),
    );
    echo.insert("ddim_steps".into(), opts.ddim_steps.to_string());
    echo.insert("cfg_scale".into(), opts.cfg_scale.to_string());
    echo.insert("fractional_groups".into(), opts.fractional_groups.to_string());
    write_kv_file(&out.join("effective.cfg"), &echo)?;

    Ok(AblateOutcome {
        scores,
        per_seed,
        csv_path,
    })
}
