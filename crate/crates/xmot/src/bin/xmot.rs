//! Command-line front end: corpus generation, training, generation,
//! evaluation, and the ablation matrix.
//!
//! Every option resolves as CLI flag > `--config` file entry > built-in
//! default, and each run echoes its effective configuration into the
//! output location. Exit codes: 0 success, 2 usage error, 65 malformed
//! input file, 66 missing input, 1 anything else.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use xmot::config::Layers;
use xmot::harness::{
    run_ablate, run_eval, run_gen_data, run_generate, run_train, AblateOptions, ABLATION_VARIANTS,
};
use xmot::inference::{HistoryScheduler, InferenceConfig};
use xmot::model::{load_checkpoint, DenoiserConfig, MaskKind};
use xmot::schedule::ScheduleFamily;
use xmot::synthdata::SynthConfig;
use xmot::training::{IntraChunk, TrainConfig, TrainMode};
use xmot::types::FrameRate;
use xmot::{Error, Result};

#[derive(Parser)]
#[command(
    name = "xmot",
    version,
    about = "Chunk-autoregressive diffusion of motion-latent sequences from frame-aligned conditioning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired corpus (train/val/eval splits).
    GenData(GenDataArgs),
    /// Train a denoiser on a corpus directory.
    Train(TrainArgs),
    /// Generate motion for one conditioning file from a checkpoint.
    Generate(GenerateArgs),
    /// Score generated motion against a corpus split.
    Eval(EvalArgs),
    /// Train and score the ablation variant matrix.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output corpus directory.
    #[arg(long)]
    out: PathBuf,
    /// key=value config file (flags override it).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    num_sequences: Option<usize>,
    #[arg(long)]
    len_min: Option<usize>,
    #[arg(long)]
    len_max: Option<usize>,
    /// Motion channels.
    #[arg(long)]
    d: Option<usize>,
    /// Conditioning channels.
    #[arg(long)]
    d_a: Option<usize>,
    #[arg(long)]
    regime_count: Option<usize>,
    #[arg(long)]
    regime_switch_prob: Option<f64>,
    #[arg(long)]
    lag: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    val_fraction: Option<f64>,
    #[arg(long)]
    eval_sequences: Option<usize>,
    #[arg(long)]
    eval_len: Option<usize>,
}

#[derive(Args, Clone)]
struct TrainFlags {
    #[arg(long)]
    mode: Option<TrainMode>,
    #[arg(long)]
    intra_chunk: Option<IntraChunk>,
    #[arg(long)]
    cond_dropout: Option<f64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    lr_final_fraction: Option<f64>,
    #[arg(long)]
    batch_tokens: Option<usize>,
    #[arg(long)]
    total_steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    schedule_family: Option<ScheduleFamily>,
    #[arg(long)]
    num_diffusion_steps: Option<usize>,
    #[arg(long)]
    log_every: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    val_every: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    num_layers: Option<usize>,
    #[arg(long)]
    num_heads: Option<usize>,
    #[arg(long)]
    chunk_size: Option<usize>,
    #[arg(long)]
    max_context: Option<usize>,
    #[arg(long)]
    audio_window: Option<usize>,
    #[arg(long)]
    dropout_rate: Option<f64>,
    #[arg(long)]
    mask: Option<MaskKind>,
}

#[derive(Args)]
struct TrainArgs {
    /// Corpus directory (from gen-data).
    #[arg(long)]
    data: PathBuf,
    /// Output run directory.
    #[arg(long)]
    out: PathBuf,
    /// key=value config file (flags override it).
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args)]
struct GenerateArgs {
    /// Trained checkpoint (.xckp).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Conditioning file (.xcnd).
    #[arg(long)]
    cond: PathBuf,
    /// Output motion file (.xmot).
    #[arg(long)]
    out: PathBuf,
    /// key=value config file (flags override it).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    cfg_scale: Option<f64>,
    #[arg(long)]
    ddim_steps: Option<usize>,
    /// History-noise scheduler: linear_ramp, vanilla, or fractional.
    #[arg(long)]
    scheduler: Option<String>,
    /// Highest history noise level (default: the schedule's step count).
    #[arg(long)]
    k_max: Option<usize>,
    /// Constant level for the vanilla scheduler (default k_max/2).
    #[arg(long)]
    vanilla_level: Option<usize>,
    /// Group count for the fractional scheduler.
    #[arg(long)]
    fractional_groups: Option<usize>,
    #[arg(long)]
    chunk_size: Option<usize>,
    #[arg(long)]
    max_context: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Generated .xmot file or a directory of them.
    #[arg(long)]
    generated: PathBuf,
    /// Corpus directory the sequences belong to.
    #[arg(long)]
    data: PathBuf,
    /// Which split the conditioning/truth lives in.
    #[arg(long, default_value = "eval")]
    split: String,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
    /// Chunk size for chunk-level metrics.
    #[arg(long, default_value_t = 64)]
    chunk_size: usize,
    /// Largest |lag| scanned by the synchrony metric.
    #[arg(long, default_value_t = 8)]
    max_lag: usize,
}

#[derive(Args)]
struct AblateArgs {
    /// Corpus directory (needs an eval split).
    #[arg(long)]
    data: PathBuf,
    /// Output directory for the matrix.
    #[arg(long)]
    out: PathBuf,
    /// key=value config file (flags override it).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated variant subset (default: all seven).
    #[arg(long, value_delimiter = ',')]
    variants: Option<Vec<String>>,
    /// Comma-separated training seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    ddim_steps: Option<usize>,
    #[arg(long)]
    cfg_scale: Option<f64>,
    #[arg(long)]
    fractional_groups: Option<usize>,
    /// Cap held-out sequences per variant/seed.
    #[arg(long)]
    eval_limit: Option<usize>,
    #[arg(long)]
    max_lag: Option<usize>,
    /// Retrain even when a matching checkpoint exists.
    #[arg(long)]
    no_reuse: bool,
    #[command(flatten)]
    flags: TrainFlags,
}

fn exit_for(err: &Error) -> u8 {
    if err.is_format_violation() {
        65
    } else if err.is_not_found() {
        66
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_for(&e))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Generate(a) => generate_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
    }
}

const SYNTH_KEYS: &[&str] = &[
    "num_sequences",
    "len_min",
    "len_max",
    "d",
    "d_a",
    "frame_rate",
    "regime_count",
    "regime_switch_prob",
    "lag",
    "seed",
    "val_fraction",
    "eval_sequences",
    "eval_len",
];

fn apply_synth(layers: &Layers, cfg: &mut SynthConfig) -> Result<()> {
    layers.reject_unknown(SYNTH_KEYS)?;
    layers.apply("num_sequences", &mut cfg.num_sequences)?;
    layers.apply("len_min", &mut cfg.len_min)?;
    layers.apply("len_max", &mut cfg.len_max)?;
    layers.apply("d", &mut cfg.d)?;
    layers.apply("d_a", &mut cfg.d_a)?;
    layers.apply("regime_count", &mut cfg.regime_count)?;
    layers.apply("regime_switch_prob", &mut cfg.regime_switch_prob)?;
    layers.apply("lag", &mut cfg.lag)?;
    layers.apply("seed", &mut cfg.seed)?;
    layers.apply("val_fraction", &mut cfg.val_fraction)?;
    layers.apply("eval_sequences", &mut cfg.eval_sequences)?;
    layers.apply("eval_len", &mut cfg.eval_len)?;
    if let Some(fr) = layers.get("frame_rate") {
        let (num, den) = fr
            .split_once('/')
            .ok_or_else(|| Error::Config(format!("frame_rate must look like 25/1, got {fr:?}")))?;
        let parse = |s: &str| {
            s.trim()
                .parse::<u32>()
                .map_err(|e| Error::Config(format!("frame_rate component {s:?}: {e}")))
        };
        cfg.frame_rate = FrameRate::new(parse(num)?, parse(den)?)?;
    }
    Ok(())
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut layers = Layers::from_file(a.config.as_deref())?;
    macro_rules! flag {
        ($key:literal, $val:expr) => {
            if let Some(v) = $val {
                layers.set_flag($key, v);
            }
        };
    }
    flag!("num_sequences", a.num_sequences);
    flag!("len_min", a.len_min);
    flag!("len_max", a.len_max);
    flag!("d", a.d);
    flag!("d_a", a.d_a);
    flag!("regime_count", a.regime_count);
    flag!("regime_switch_prob", a.regime_switch_prob);
    flag!("lag", a.lag);
    flag!("seed", a.seed);
    flag!("val_fraction", a.val_fraction);
    flag!("eval_sequences", a.eval_sequences);
    flag!("eval_len", a.eval_len);

    let mut cfg = SynthConfig::default();
    apply_synth(&layers, &mut cfg)?;
    let corpus = run_gen_data(&cfg, &a.out)?;
    println!(
        "wrote {} train / {} val / {} eval sequences to {}",
        corpus.train.len(),
        corpus.val.len(),
        corpus.eval.len(),
        a.out.display()
    );
    Ok(())
}

const TRAIN_KEYS: &[&str] = &[
    "mode",
    "intra_chunk",
    "cond_dropout",
    "learning_rate",
    "lr_final_fraction",
    "batch_tokens",
    "total_steps",
    "seed",
    "schedule_family",
    "num_diffusion_steps",
    "log_every",
    "checkpoint_every",
    "val_every",
    "d_model",
    "num_layers",
    "num_heads",
    "chunk_size",
    "max_context",
    "audio_window",
    "dropout_rate",
    "mask",
];

fn train_layers(config: Option<&std::path::Path>, f: &TrainFlags) -> Result<Layers> {
    let mut layers = Layers::from_file(config)?;
    macro_rules! flag {
        ($key:literal, $val:expr) => {
            if let Some(v) = &$val {
                layers.set_flag($key, v);
            }
        };
    }
    flag!("mode", f.mode);
    flag!("intra_chunk", f.intra_chunk);
    flag!("cond_dropout", f.cond_dropout);
    flag!("learning_rate", f.learning_rate);
    flag!("lr_final_fraction", f.lr_final_fraction);
    flag!("batch_tokens", f.batch_tokens);
    flag!("total_steps", f.total_steps);
    flag!("seed", f.seed);
    flag!("schedule_family", f.schedule_family);
    flag!("num_diffusion_steps", f.num_diffusion_steps);
    flag!("log_every", f.log_every);
    flag!("checkpoint_every", f.checkpoint_every);
    flag!("val_every", f.val_every);
    flag!("d_model", f.d_model);
    flag!("num_layers", f.num_layers);
    flag!("num_heads", f.num_heads);
    flag!("chunk_size", f.chunk_size);
    flag!("max_context", f.max_context);
    flag!("audio_window", f.audio_window);
    flag!("dropout_rate", f.dropout_rate);
    flag!("mask", f.mask);
    Ok(layers)
}

fn apply_train(
    layers: &Layers,
    extra_keys: &[&str],
    train: &mut TrainConfig,
    model: &mut DenoiserConfig,
) -> Result<()> {
    let mut known: Vec<&str> = TRAIN_KEYS.to_vec();
    known.extend_from_slice(extra_keys);
    layers.reject_unknown(&known)?;
    layers.apply("mode", &mut train.mode)?;
    layers.apply("intra_chunk", &mut train.intra_chunk)?;
    layers.apply("cond_dropout", &mut train.cond_dropout)?;
    layers.apply("learning_rate", &mut train.learning_rate)?;
    layers.apply("lr_final_fraction", &mut train.lr_final_fraction)?;
    layers.apply("batch_tokens", &mut train.batch_tokens)?;
    layers.apply("total_steps", &mut train.total_steps)?;
    layers.apply("seed", &mut train.seed)?;
    layers.apply("schedule_family", &mut train.schedule_family)?;
    layers.apply("num_diffusion_steps", &mut train.num_diffusion_steps)?;
    layers.apply("log_every", &mut train.log_every)?;
    layers.apply("checkpoint_every", &mut train.checkpoint_every)?;
    layers.apply("val_every", &mut train.val_every)?;
    layers.apply("d_model", &mut model.d_model)?;
    layers.apply("num_layers", &mut model.num_layers)?;
    layers.apply("num_heads", &mut model.num_heads)?;
    layers.apply("chunk_size", &mut model.chunk_size)?;
    layers.apply("max_context", &mut model.max_context)?;
    layers.apply("audio_window", &mut model.audio_window)?;
    layers.apply("dropout_rate", &mut model.dropout_rate)?;
    layers.apply("mask", &mut model.mask)?;
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let layers = train_layers(a.config.as_deref(), &a.flags)?;
    let mut train = TrainConfig::default();
    let mut model = DenoiserConfig::default();
    apply_train(&layers, &[], &mut train, &mut model)?;
    let outcome = run_train(&a.data, &a.out, &model, &train)?;
    println!(
        "trained {} steps; final train loss {:.6}{}; checkpoint {}",
        outcome.steps,
        outcome.final_train_loss,
        match outcome.final_val_loss {
            Some(v) => format!(", val loss {v:.6}"),
            None => String::new(),
        },
        outcome.checkpoint.display()
    );
    Ok(())
}

const GENERATE_KEYS: &[&str] = &[
    "seed",
    "cfg_scale",
    "ddim_steps",
    "scheduler",
    "k_max",
    "vanilla_level",
    "fractional_groups",
    "chunk_size",
    "max_context",
];

fn generate_cmd(a: GenerateArgs) -> Result<()> {
    let mut layers = Layers::from_file(a.config.as_deref())?;
    macro_rules! flag {
        ($key:literal, $val:expr) => {
            if let Some(v) = &$val {
                layers.set_flag($key, v);
            }
        };
    }
    flag!("seed", a.seed);
    flag!("cfg_scale", a.cfg_scale);
    flag!("ddim_steps", a.ddim_steps);
    flag!("scheduler", a.scheduler);
    flag!("k_max", a.k_max);
    flag!("vanilla_level", a.vanilla_level);
    flag!("fractional_groups", a.fractional_groups);
    flag!("chunk_size", a.chunk_size);
    flag!("max_context", a.max_context);
    layers.reject_unknown(GENERATE_KEYS)?;

    // the checkpoint's schedule provides the k_max default
    let (_, ckpt_meta) = load_checkpoint(&a.checkpoint)?;
    let mut inf = InferenceConfig::for_steps(ckpt_meta.num_diffusion_steps);
    layers.apply("seed", &mut inf.seed)?;
    layers.apply("cfg_scale", &mut inf.cfg_scale)?;
    layers.apply("ddim_steps", &mut inf.ddim_steps)?;
    let k_max = layers
        .get_parsed::<usize>("k_max")?
        .unwrap_or(ckpt_meta.num_diffusion_steps);
    let kind = layers.get("scheduler").unwrap_or("linear_ramp");
    inf.scheduler = match kind {
        "linear_ramp" => HistoryScheduler::linear_ramp(k_max),
        "vanilla" => match layers.get_parsed::<usize>("vanilla_level")? {
            Some(level) => HistoryScheduler::vanilla_at(k_max, level),
            None => HistoryScheduler::vanilla(k_max),
        },
        "fractional" => HistoryScheduler::fractional(
            k_max,
            layers.get_parsed::<usize>("fractional_groups")?.unwrap_or(4),
        ),
        other => {
            return Err(Error::Config(format!(
                "unknown scheduler {other:?}; expected linear_ramp, vanilla, or fractional"
            )))
        }
    };
    inf.chunk_size = layers.get_parsed::<usize>("chunk_size")?;
    inf.max_context = layers.get_parsed::<usize>("max_context")?;

    let motion = run_generate(&a.checkpoint, &a.cond, &a.out, &inf)?;
    println!(
        "generated {} frames x {} channels to {}",
        motion.len(),
        motion.dim(),
        a.out.display()
    );
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let rows = run_eval(
        &a.generated,
        &a.data,
        &a.split,
        &a.out,
        a.chunk_size,
        a.max_lag,
    )?;
    println!("scored {} sequences; wrote {}", rows.len(), a.out.display());
    Ok(())
}

const ABLATE_KEYS: &[&str] = &[
    "variants",
    "seeds",
    "ddim_steps",
    "cfg_scale",
    "fractional_groups",
    "eval_limit",
    "max_lag",
];

fn ablate_cmd(a: AblateArgs) -> Result<()> {
    let mut layers = train_layers(a.config.as_deref(), &a.flags)?;
    macro_rules! flag {
        ($key:literal, $val:expr) => {
            if let Some(v) = &$val {
                layers.set_flag($key, v);
            }
        };
    }
    flag!("ddim_steps", a.ddim_steps);
    flag!("cfg_scale", a.cfg_scale);
    flag!("fractional_groups", a.fractional_groups);
    flag!("eval_limit", a.eval_limit);
    flag!("max_lag", a.max_lag);
    if let Some(v) = &a.variants {
        layers.set_flag("variants", v.join(","));
    }
    if let Some(s) = &a.seeds {
        layers.set_flag(
            "seeds",
            s.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(","),
        );
    }

    let mut train = TrainConfig::default();
    let mut model = DenoiserConfig::default();
    apply_train(&layers, ABLATE_KEYS, &mut train, &mut model)?;

    let mut opts = AblateOptions::new(train, model);
    opts.reuse_checkpoints = !a.no_reuse;
    layers.apply("ddim_steps", &mut opts.ddim_steps)?;
    layers.apply("cfg_scale", &mut opts.cfg_scale)?;
    layers.apply("fractional_groups", &mut opts.fractional_groups)?;
    layers.apply("max_lag", &mut opts.max_lag)?;
    opts.eval_limit = layers.get_parsed::<usize>("eval_limit")?;
    if let Some(raw) = layers.get("variants") {
        opts.variants = raw
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect();
    }
    if let Some(raw) = layers.get("seeds") {
        let mut seeds = Vec::new();
        for tok in raw.split(',') {
            let tok = tok.trim();
            if tok.is_empty() {
                continue;
            }
            seeds.push(
                tok.parse::<u64>()
                    .map_err(|e| Error::Config(format!("seed {tok:?}: {e}")))?,
            );
        }
        opts.seeds = seeds;
    }

    let outcome = run_ablate(&a.data, &a.out, &opts)?;
    let mut summary = BTreeMap::new();
    for s in &outcome.scores {
        summary.insert(s.variant.clone(), format!("sync_c={:.4}", s.sync_c));
    }
    println!(
        "scored {} variants ({}); wrote {}",
        outcome.scores.len(),
        ABLATION_VARIANTS
            .iter()
            .filter(|v| summary.contains_key(**v))
            .map(|v| format!("{v} {}", summary[*v]))
            .collect::<Vec<_>>()
            .join("; "),
        outcome.csv_path.display()
    );
    Ok(())
}
