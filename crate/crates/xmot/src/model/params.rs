//! Parameter storage, initialization, and checkpoint I/O.
//!
//! Parameters live in a flat `Vec<Array2<f64>>` addressed through a schema
//! built from the config (vectors are stored as `1 x n`). Gradients and
//! optimizer state reuse the same indexing, and checkpoints persist tensors
//! by schema name so files stay readable across reorderings.
//!
//! A checkpoint is two files: `<stem>.xckp`, a binary tensor container, and
//! `<stem>.manifest`, a plain-text `key=value` description of the
//! architecture, schedule, and training provenance, terminated by a content
//! hash so silent edits are caught at load time.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::schedule::ScheduleFamily;

use super::{DenoiserConfig, MaskKind};

const CKPT_MAGIC: [u8; 4] = *b"XCKP";
const CKPT_VERSION: u32 = 1;
const INIT_STD: f64 = 0.02;

/// Per-layer tensor indices into the flat parameter vector.
#[derive(Debug, Clone)]
pub(crate) struct LayerIdx {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub cq: usize,
    pub ck: usize,
    pub cv: usize,
    pub co: usize,
    pub rel: usize,
    pub ln3_g: usize,
    pub ln3_b: usize,
    pub ffn_w1: usize,
    pub ffn_b1: usize,
    pub ffn_w2: usize,
    pub ffn_b2: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct Idx {
    pub w_in: usize,
    pub b_in: usize,
    pub time_w1: usize,
    pub time_b1: usize,
    pub time_w2: usize,
    pub time_b2: usize,
    pub cond_w: usize,
    pub cond_b: usize,
    pub cond_null: usize,
    pub layers: Vec<LayerIdx>,
    pub final_g: usize,
    pub final_b: usize,
    pub w_out: usize,
    pub b_out: usize,
}

/// Names, shapes, and named indices of every tensor for a given config.
#[derive(Debug, Clone)]
pub struct ParamSchema {
    entries: Vec<(String, (usize, usize))>,
    pub(crate) idx: Idx,
}

impl ParamSchema {
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn shape(&self, i: usize) -> (usize, usize) {
        self.entries[i].1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.entries[i].0
    }
}

fn build_schema(cfg: &DenoiserConfig) -> ParamSchema {
    let dm = cfg.d_model;
    let dl = cfg.d_latent;
    let dc = cfg.d_cond;
    let ff = cfg.ffn_dim();
    let span = 2 * cfg.audio_window + 1;

    let mut entries = Vec::new();
    let mut push = |name: String, shape: (usize, usize)| -> usize {
        entries.push((name, shape));
        entries.len() - 1
    };

    let w_in = push("w_in".into(), (dl, dm));
    let b_in = push("b_in".into(), (1, dm));
    let time_w1 = push("time.w1".into(), (dm, dm));
    let time_b1 = push("time.b1".into(), (1, dm));
    let time_w2 = push("time.w2".into(), (dm, dm));
    let time_b2 = push("time.b2".into(), (1, dm));
    let cond_w = push("cond.w".into(), (dc, dm));
    let cond_b = push("cond.b".into(), (1, dm));
    let cond_null = push("cond.null".into(), (1, dc));

    let mut layers = Vec::with_capacity(cfg.num_layers);
    for l in 0..cfg.num_layers {
        let p = |s: &str| format!("layer{l}.{s}");
        layers.push(LayerIdx {
            ln1_g: push(p("ln1.g"), (1, dm)),
            ln1_b: push(p("ln1.b"), (1, dm)),
            wq: push(p("self.wq"), (dm, dm)),
            wk: push(p("self.wk"), (dm, dm)),
            wv: push(p("self.wv"), (dm, dm)),
            wo: push(p("self.wo"), (dm, dm)),
            ln2_g: push(p("ln2.g"), (1, dm)),
            ln2_b: push(p("ln2.b"), (1, dm)),
            cq: push(p("cross.wq"), (dm, dm)),
            ck: push(p("cross.wk"), (dm, dm)),
            cv: push(p("cross.wv"), (dm, dm)),
            co: push(p("cross.wo"), (dm, dm)),
            rel: push(p("cross.rel"), (span, dm)),
            ln3_g: push(p("ln3.g"), (1, dm)),
            ln3_b: push(p("ln3.b"), (1, dm)),
            ffn_w1: push(p("ffn.w1"), (dm, ff)),
            ffn_b1: push(p("ffn.b1"), (1, ff)),
            ffn_w2: push(p("ffn.w2"), (ff, dm)),
            ffn_b2: push(p("ffn.b2"), (1, dm)),
        });
    }

    let final_g = push("final.g".into(), (1, dm));
    let final_b = push("final.b".into(), (1, dm));
    let w_out = push("w_out".into(), (dm, dl));
    let b_out = push("b_out".into(), (1, dl));

    ParamSchema {
        entries,
        idx: Idx {
            w_in,
            b_in,
            time_w1,
            time_b1,
            time_w2,
            time_b2,
            cond_w,
            cond_b,
            cond_null,
            layers,
            final_g,
            final_b,
            w_out,
            b_out,
        },
    }
}

/// The denoiser: config, schema, and the flat parameter vector.
#[derive(Debug, Clone)]
pub struct Denoiser {
    pub(crate) cfg: DenoiserConfig,
    pub(crate) schema: ParamSchema,
    pub(crate) params: Vec<Array2<f64>>,
}

impl Denoiser {
    /// Fresh model with N(0, 0.02) weights, unit layer-norm gains, zero
    /// biases.
    pub fn new(cfg: DenoiserConfig, rng: &mut ChaCha20Rng) -> Result<Self> {
        cfg.validate()?;
        let schema = build_schema(&cfg);
        let mut params = Vec::with_capacity(schema.len());
        for i in 0..schema.len() {
            let name = schema.name(i);
            let (r, c) = schema.shape(i);
            let tensor = if name.ends_with(".g") || name == "final.g" {
                Array2::ones((r, c))
            } else if name.ends_with(".b")
                || name.ends_with(".b1")
                || name.ends_with(".b2")
                || name == "b_in"
                || name == "b_out"
            {
                Array2::zeros((r, c))
            } else {
                Array2::from_shape_fn((r, c), |_| {
                    let x: f64 = rng.sample(StandardNormal);
                    x * INIT_STD
                })
            };
            params.push(tensor);
        }
        Ok(Denoiser {
            cfg,
            schema,
            params,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn schema(&self) -> &ParamSchema {
        &self.schema
    }

    pub fn params(&self) -> &[Array2<f64>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.params
    }

    /// Zeroed gradient (or optimizer moment) storage matching the schema.
    pub fn zero_grads(&self) -> Vec<Array2<f64>> {
        self.params
            .iter()
            .map(|p| Array2::zeros(p.raw_dim()))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }
}

/// Everything a checkpoint records besides the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub config: DenoiserConfig,
    pub schedule_family: ScheduleFamily,
    pub num_diffusion_steps: usize,
    /// Free-form provenance (training mode, seed, step count, ...), persisted
    /// under `extra.` keys in sorted order.
    pub extra: BTreeMap<String, String>,
}

pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn manifest_body(meta: &CheckpointMeta) -> String {
    let c = &meta.config;
    let mut s = String::new();
    s.push_str("format=xmot-checkpoint\n");
    s.push_str("manifest_version=1\n");
    s.push_str(&format!("d_latent={}\n", c.d_latent));
    s.push_str(&format!("d_cond={}\n", c.d_cond));
    s.push_str(&format!("d_model={}\n", c.d_model));
    s.push_str(&format!("num_layers={}\n", c.num_layers));
    s.push_str(&format!("num_heads={}\n", c.num_heads));
    s.push_str(&format!("chunk_size={}\n", c.chunk_size));
    s.push_str(&format!("max_context={}\n", c.max_context));
    s.push_str(&format!("audio_window={}\n", c.audio_window));
    s.push_str(&format!("dropout_rate={}\n", c.dropout_rate));
    s.push_str(&format!("mask={}\n", c.mask));
    s.push_str(&format!("schedule_family={}\n", meta.schedule_family));
    s.push_str(&format!("num_diffusion_steps={}\n", meta.num_diffusion_steps));
    for (k, v) in &meta.extra {
        s.push_str(&format!("extra.{k}={v}\n"));
    }
    s
}

/// Write `<stem>.xckp` + `<stem>.manifest`. `path` is the `.xckp` path; the
/// manifest lands next to it.
pub fn save_checkpoint(path: &Path, model: &Denoiser, meta: &CheckpointMeta) -> Result<()> {
    if meta.config != model.cfg {
        return Err(Error::CheckpointMismatch(
            "meta config differs from model config".into(),
        ));
    }
    let ctx = || format!("writing checkpoint {}", path.display());
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(ctx(), e))?);
    w.write_all(&CKPT_MAGIC).map_err(|e| Error::io(ctx(), e))?;
    w.write_all(&CKPT_VERSION.to_le_bytes())
        .map_err(|e| Error::io(ctx(), e))?;
    w.write_all(&(model.schema.len() as u32).to_le_bytes())
        .map_err(|e| Error::io(ctx(), e))?;
    for (i, tensor) in model.params.iter().enumerate() {
        let name = model.schema.name(i).as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())
            .map_err(|e| Error::io(ctx(), e))?;
        w.write_all(name).map_err(|e| Error::io(ctx(), e))?;
        let (r, c) = tensor.dim();
        w.write_all(&(r as u32).to_le_bytes())
            .map_err(|e| Error::io(ctx(), e))?;
        w.write_all(&(c as u32).to_le_bytes())
            .map_err(|e| Error::io(ctx(), e))?;
        for &v in tensor.iter() {
            w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(ctx(), e))?;
        }
    }
    w.flush().map_err(|e| Error::io(ctx(), e))?;

    let manifest_path = path.with_extension("manifest");
    let body = manifest_body(meta);
    let hash = fnv1a64(body.as_bytes());
    let full = format!("{body}config_hash={hash:016x}\n");
    std::fs::write(&manifest_path, full)
        .map_err(|e| Error::io(format!("writing manifest {}", manifest_path.display()), e))?;
    Ok(())
}

fn parse_manifest(path: &Path) -> Result<CheckpointMeta> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading manifest {}", path.display()), e))?;
    let mut map = BTreeMap::new();
    let mut body = String::new();
    let mut stated_hash = None;
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::CheckpointMismatch(format!("manifest line without '=': {line:?}"))
        })?;
        if k == "config_hash" {
            stated_hash = Some(v.to_string());
        } else {
            body.push_str(line);
            body.push('\n');
            map.insert(k.to_string(), v.to_string());
        }
    }
    let stated_hash = stated_hash
        .ok_or_else(|| Error::CheckpointMismatch("manifest missing config_hash".into()))?;
    let actual = format!("{:016x}", fnv1a64(body.as_bytes()));
    if stated_hash != actual {
        return Err(Error::CheckpointMismatch(format!(
            "manifest hash {stated_hash} does not match content hash {actual}"
        )));
    }
    if map.get("format").map(String::as_str) != Some("xmot-checkpoint") {
        return Err(Error::CheckpointMismatch("not an xmot checkpoint manifest".into()));
    }

    let get = |k: &str| -> Result<&String> {
        map.get(k)
            .ok_or_else(|| Error::CheckpointMismatch(format!("manifest missing key {k}")))
    };
    let get_usize = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| Error::CheckpointMismatch(format!("manifest key {k} is not an integer")))
    };
    let dropout_rate: f64 = get("dropout_rate")?
        .parse()
        .map_err(|_| Error::CheckpointMismatch("dropout_rate is not a number".into()))?;
    let config = DenoiserConfig {
        d_latent: get_usize("d_latent")?,
        d_cond: get_usize("d_cond")?,
        d_model: get_usize("d_model")?,
        num_layers: get_usize("num_layers")?,
        num_heads: get_usize("num_heads")?,
        chunk_size: get_usize("chunk_size")?,
        max_context: get_usize("max_context")?,
        audio_window: get_usize("audio_window")?,
        dropout_rate,
        mask: get("mask")?.parse::<MaskKind>()?,
    };
    let schedule_family = get("schedule_family")?.parse::<ScheduleFamily>()?;
    let num_diffusion_steps = get_usize("num_diffusion_steps")?;
    let extra = map
        .into_iter()
        .filter_map(|(k, v)| k.strip_prefix("extra.").map(|k| (k.to_string(), v)))
        .collect();
    Ok(CheckpointMeta {
        config,
        schedule_family,
        num_diffusion_steps,
        extra,
    })
}

/// Load a checkpoint written by [`save_checkpoint`]. Verifies the manifest
/// hash, rebuilds the schema from the config, and demands exactly the
/// expected tensor set with exact shapes.
pub fn load_checkpoint(path: &Path) -> Result<(Denoiser, CheckpointMeta)> {
    let meta = parse_manifest(&path.with_extension("manifest"))?;
    meta.config.validate()?;
    let schema = build_schema(&meta.config);

    let display = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(format!("opening {display}"), e))?;
    let mut r = BufReader::new(file);

    let read_exact = |r: &mut BufReader<File>, buf: &mut [u8]| -> Result<()> {
        let mut got = 0;
        while got < buf.len() {
            let n = r
                .read(&mut buf[got..])
                .map_err(|e| Error::io(format!("reading {display}"), e))?;
            if n == 0 {
                return Err(Error::Truncated {
                    path: display.clone(),
                    needed: buf.len(),
                    got,
                });
            }
            got += n;
        }
        Ok(())
    };
    let read_u32 = |r: &mut BufReader<File>| -> Result<u32> {
        let mut b = [0u8; 4];
        read_exact(r, &mut b)?;
        Ok(u32::from_le_bytes(b))
    };

    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic)?;
    if magic != CKPT_MAGIC {
        return Err(Error::BadMagic {
            path: display,
            expected: CKPT_MAGIC,
            found: magic,
        });
    }
    let version = read_u32(&mut r)?;
    if version != CKPT_VERSION {
        return Err(Error::VersionMismatch {
            path: display,
            expected: CKPT_VERSION,
            found: version,
        });
    }
    let count = read_u32(&mut r)? as usize;
    if count != schema.len() {
        return Err(Error::CheckpointMismatch(format!(
            "checkpoint holds {count} tensors, config implies {}",
            schema.len()
        )));
    }

    let mut by_name: BTreeMap<String, Array2<f64>> = BTreeMap::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        if name_len > 4096 {
            return Err(Error::InvalidHeader {
                path: display,
                reason: format!("tensor name length {name_len} is implausible"),
            });
        }
        let mut name_buf = vec![0u8; name_len];
        read_exact(&mut r, &mut name_buf)?;
        let name = String::from_utf8(name_buf).map_err(|_| Error::InvalidHeader {
            path: display.clone(),
            reason: "tensor name is not UTF-8".into(),
        })?;
        let rows = read_u32(&mut r)? as usize;
        let cols = read_u32(&mut r)? as usize;
        if rows == 0 || cols == 0 || rows.saturating_mul(cols) > (1 << 30) {
            return Err(Error::InvalidHeader {
                path: display,
                reason: format!("tensor {name} has implausible shape {rows}x{cols}"),
            });
        }
        let mut data = vec![0.0f64; rows * cols];
        for v in data.iter_mut() {
            let mut b = [0u8; 8];
            read_exact(&mut r, &mut b)?;
            *v = f64::from_le_bytes(b);
        }
        let tensor = Array2::from_shape_vec((rows, cols), data)
            .expect("shape matches data length by construction");
        if by_name.insert(name.clone(), tensor).is_some() {
            return Err(Error::CheckpointMismatch(format!(
                "duplicate tensor {name} in checkpoint"
            )));
        }
    }

    let mut params = Vec::with_capacity(schema.len());
    for i in 0..schema.len() {
        let name = schema.name(i);
        let tensor = by_name.remove(name).ok_or_else(|| {
            Error::CheckpointMismatch(format!("checkpoint missing tensor {name}"))
        })?;
        if tensor.dim() != schema.shape(i) {
            return Err(Error::CheckpointMismatch(format!(
                "tensor {name} has shape {:?}, schema expects {:?}",
                tensor.dim(),
                schema.shape(i)
            )));
        }
        params.push(tensor);
    }
    if let Some(name) = by_name.into_keys().next() {
        return Err(Error::CheckpointMismatch(format!(
            "checkpoint holds unexpected tensor {name}"
        )));
    }

    Ok((
        Denoiser {
            cfg: meta.config.clone(),
            schema,
            params,
        },
        meta,
    ))
}
