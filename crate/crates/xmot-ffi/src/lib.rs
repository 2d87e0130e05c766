//! C ABI over the motion-latent generator: load a trained checkpoint,
//! inspect its geometry, and synthesize motion for a conditioning stream.
//!
//! Conventions:
//! - Every fallible call returns an [`XmotStatus`]; `XMOT_STATUS_OK` is 0.
//! - On failure, [`xmot_last_error_message`] returns a human-readable
//!   explanation for the calling thread.
//! - Handles ([`XmotModel`]) are opaque; free them with their `_free`
//!   function exactly once. `_free(NULL)` is a no-op.
//! - Matrix buffers are row-major `frames x channels`, `double`-typed.
//! - All functions are panic-safe: a caught panic reports
//!   `XMOT_STATUS_PANIC` instead of unwinding across the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use xmot::inference::{generate_sequence, HistoryScheduler, InferenceConfig};
use xmot::model::{load_checkpoint, CheckpointMeta, Denoiser};
use xmot::schedule::{make_schedule, DiffusionSchedule};
use xmot::types::{ConditioningSequence, FrameRate};
use xmot::Error;

/// Result of every fallible call in this API.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum XmotStatus {
    /// Success.
    Ok = 0,
    /// A pointer argument that must not be NULL was NULL.
    NullPointer = 1,
    /// An argument failed validation (dimensions, ranges, UTF-8 paths).
    InvalidArgument = 2,
    /// An input file exists but is malformed.
    FormatViolation = 3,
    /// An input file or directory does not exist.
    NotFound = 4,
    /// Any other library failure (I/O, numeric divergence, ...).
    Internal = 5,
    /// A panic was caught at the ABI boundary.
    Panic = 6,
}

/// Which history-noise schedule `xmot_generate` applies to context frames.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum XmotScheduler {
    /// Ramp from `k_max` on the oldest context frame down to 0 on the newest.
    LinearRamp = 0,
    /// One constant level everywhere (see `vanilla_level`).
    Vanilla = 1,
    /// Piecewise-constant staircase over `fractional_groups` groups.
    Fractional = 2,
}

/// Generation parameters. Zero-initialize and call
/// `xmot_generate_options_default`, then override fields as needed.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct XmotGenerateOptions {
    /// RNG seed; equal seeds reproduce output bitwise.
    pub seed: u64,
    /// Guidance strength; 1.0 means a single conditional pass.
    pub cfg_scale: f64,
    /// Number of sampler steps per chunk (>= 1).
    pub ddim_steps: usize,
    pub scheduler: XmotScheduler,
    /// Highest context noise level; 0 means "the checkpoint's step count".
    pub k_max: usize,
    /// Constant level for `Vanilla`; negative means `k_max / 2`.
    pub vanilla_level: i64,
    /// Group count for `Fractional` (>= 1).
    pub fractional_groups: usize,
    /// Frames generated per autoregressive step; 0 means the trained size.
    pub chunk_size: usize,
    /// Rolling context cap in frames; 0 means the trained maximum.
    pub max_context: usize,
}

/// An opaque loaded checkpoint (denoiser weights + diffusion schedule).
pub struct XmotModel {
    denoiser: Denoiser,
    schedule: DiffusionSchedule,
    meta: CheckpointMeta,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let sanitized: Vec<u8> = msg.bytes().map(|b| if b == 0 { b' ' } else { b }).collect();
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn fail(err: &Error) -> XmotStatus {
    set_error(&err.to_string());
    if err.is_format_violation() {
        XmotStatus::FormatViolation
    } else if err.is_not_found() {
        XmotStatus::NotFound
    } else if matches!(err, Error::InvalidArgument(_)) {
        XmotStatus::InvalidArgument
    } else {
        XmotStatus::Internal
    }
}

fn invalid(msg: &str) -> XmotStatus {
    set_error(msg);
    XmotStatus::InvalidArgument
}

fn null_arg(name: &str) -> XmotStatus {
    set_error(&format!("{name} must not be NULL"));
    XmotStatus::NullPointer
}

fn guarded(f: impl FnOnce() -> XmotStatus) -> XmotStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| (*s).to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic with non-string payload".to_string());
            set_error(&format!("panic: {msg}"));
            XmotStatus::Panic
        }
    }
}

unsafe fn path_arg<'a>(ptr: *const c_char, name: &str) -> Result<&'a Path, XmotStatus> {
    if ptr.is_null() {
        return Err(null_arg(name));
    }
    match CStr::from_ptr(ptr).to_str() {
        Ok(s) => Ok(Path::new(s)),
        Err(_) => Err(invalid(&format!("{name} is not valid UTF-8"))),
    }
}

/// Copy the calling thread's most recent error into `buf` (NUL-terminated,
/// truncated to `cap` bytes). Returns the full message length in bytes,
/// excluding the NUL; call with `cap == 0` to size a buffer.
///
/// # Safety
/// `buf` must point to `cap` writable bytes, or `cap` must be 0.
#[no_mangle]
pub unsafe extern "C" fn xmot_last_error_message(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|slot| {
        let msg = slot.borrow();
        let bytes = msg.as_bytes();
        if cap > 0 && !buf.is_null() {
            let n = bytes.len().min(cap - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn xmot_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr().cast()
}

/// Load a trained checkpoint from `path` (the `.xckp` file written by
/// training; its `.manifest` sibling must sit next to it). On success,
/// stores a handle in `*out` that the caller must release with
/// `xmot_model_free`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn xmot_model_load(
    path: *const c_char,
    out: *mut *mut XmotModel,
) -> XmotStatus {
    guarded(|| {
        if out.is_null() {
            return null_arg("out");
        }
        *out = ptr::null_mut();
        let path = match path_arg(path, "path") {
            Ok(p) => p,
            Err(status) => return status,
        };
        let (denoiser, meta) = match load_checkpoint(path) {
            Ok(pair) => pair,
            Err(e) => return fail(&e),
        };
        let schedule = match make_schedule(meta.schedule_family, meta.num_diffusion_steps) {
            Ok(s) => s,
            Err(e) => return fail(&e),
        };
        *out = Box::into_raw(Box::new(XmotModel {
            denoiser,
            schedule,
            meta,
        }));
        XmotStatus::Ok
    })
}

/// Release a model handle. NULL is accepted and ignored.
///
/// # Safety
/// `model` must be a pointer returned by `xmot_model_load` that has not
/// been freed yet, or NULL.
#[no_mangle]
pub unsafe extern "C" fn xmot_model_free(model: *mut XmotModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

macro_rules! model_getter {
    ($(#[$doc:meta])* $name:ident, $get:expr) => {
        $(#[$doc])*
        ///
        /// # Safety
        /// `model` must be a live handle from `xmot_model_load`.
        #[no_mangle]
        pub unsafe extern "C" fn $name(model: *const XmotModel) -> usize {
            match model.as_ref() {
                #[allow(clippy::redundant_closure_call)]
                Some(m) => ($get)(m),
                None => 0,
            }
        }
    };
}

model_getter!(
    /// Motion channels per frame the model generates (0 if `model` is NULL).
    xmot_model_latent_dim,
    |m: &XmotModel| m.denoiser.config().d_latent
);
model_getter!(
    /// Conditioning channels per frame the model expects (0 if NULL).
    xmot_model_cond_dim,
    |m: &XmotModel| m.denoiser.config().d_cond
);
model_getter!(
    /// Frames generated per autoregressive chunk (0 if NULL).
    xmot_model_chunk_size,
    |m: &XmotModel| m.denoiser.config().chunk_size
);
model_getter!(
    /// Longest context window, in frames, the model attends over (0 if NULL).
    xmot_model_max_context,
    |m: &XmotModel| m.denoiser.config().max_context
);
model_getter!(
    /// Diffusion steps in the checkpoint's noise schedule (0 if NULL).
    xmot_model_num_diffusion_steps,
    |m: &XmotModel| m.meta.num_diffusion_steps
);

fn default_options() -> XmotGenerateOptions {
    XmotGenerateOptions {
        seed: 0,
        cfg_scale: 3.0,
        ddim_steps: 50,
        scheduler: XmotScheduler::LinearRamp,
        k_max: 0,
        vanilla_level: -1,
        fractional_groups: 4,
        chunk_size: 0,
        max_context: 0,
    }
}

/// Fill `opts` with defaults: seed 0, guidance 3.0, 50 sampler steps,
/// linear-ramp context noise, and the checkpoint's native geometry.
///
/// # Safety
/// `opts` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn xmot_generate_options_default(
    opts: *mut XmotGenerateOptions,
) -> XmotStatus {
    guarded(|| {
        if opts.is_null() {
            return null_arg("opts");
        }
        *opts = default_options();
        XmotStatus::Ok
    })
}

fn build_config(model: &XmotModel, opts: &XmotGenerateOptions) -> InferenceConfig {
    let k_max = if opts.k_max == 0 {
        model.meta.num_diffusion_steps
    } else {
        opts.k_max
    };
    let scheduler = match opts.scheduler {
        XmotScheduler::LinearRamp => HistoryScheduler::linear_ramp(k_max),
        XmotScheduler::Vanilla => {
            if opts.vanilla_level < 0 {
                HistoryScheduler::vanilla(k_max)
            } else {
                HistoryScheduler::vanilla_at(k_max, opts.vanilla_level as usize)
            }
        }
        XmotScheduler::Fractional => HistoryScheduler::fractional(k_max, opts.fractional_groups),
    };
    InferenceConfig {
        ddim_steps: opts.ddim_steps,
        cfg_scale: opts.cfg_scale,
        scheduler,
        seed: opts.seed,
        chunk_size: (opts.chunk_size > 0).then_some(opts.chunk_size),
        max_context: (opts.max_context > 0).then_some(opts.max_context),
    }
}

/// Generate motion for a conditioning stream held in memory.
///
/// `cond` is row-major `frames x cond_dim` and must match the model's
/// conditioning width. The result is written to `out_motion`, row-major
/// `frames x latent_dim` (`frames * xmot_model_latent_dim(model)` doubles,
/// caller-allocated). Equal inputs and options reproduce output bitwise.
///
/// # Safety
/// `model` must be a live handle; `cond` must point to
/// `frames * cond_dim` doubles; `out_motion` must point to
/// `frames * xmot_model_latent_dim(model)` writable doubles; `opts` may
/// be NULL for defaults.
#[no_mangle]
pub unsafe extern "C" fn xmot_generate(
    model: *const XmotModel,
    cond: *const f64,
    frames: usize,
    cond_dim: usize,
    opts: *const XmotGenerateOptions,
    out_motion: *mut f64,
) -> XmotStatus {
    guarded(|| {
        let Some(model) = model.as_ref() else {
            return null_arg("model");
        };
        if cond.is_null() {
            return null_arg("cond");
        }
        if out_motion.is_null() {
            return null_arg("out_motion");
        }
        if frames == 0 {
            return invalid("frames must be positive");
        }
        if cond_dim != model.denoiser.config().d_cond {
            return invalid(&format!(
                "cond_dim is {cond_dim}, model expects {}",
                model.denoiser.config().d_cond
            ));
        }
        let defaults = default_options();
        let opts = opts.as_ref().unwrap_or(&defaults);

        let values = std::slice::from_raw_parts(cond, frames * cond_dim).to_vec();
        let array = match ndarray_from(values, frames, cond_dim) {
            Ok(a) => a,
            Err(e) => return fail(&e),
        };
        let fr = FrameRate::default();
        let cond_seq = match ConditioningSequence::new(array, fr) {
            Ok(c) => c,
            Err(e) => return fail(&e),
        };
        let cfg = build_config(model, opts);
        let motion = match generate_sequence(&model.denoiser, &model.schedule, &cond_seq, &cfg) {
            Ok(m) => m,
            Err(e) => return fail(&e),
        };
        let flat = motion.data().as_standard_layout();
        let src = flat.as_slice().expect("standard layout is contiguous");
        ptr::copy_nonoverlapping(src.as_ptr(), out_motion, src.len());
        XmotStatus::Ok
    })
}

fn ndarray_from(
    values: Vec<f64>,
    rows: usize,
    cols: usize,
) -> Result<ndarray::Array2<f64>, Error> {
    ndarray::Array2::from_shape_vec((rows, cols), values)
        .map_err(|e| Error::invalid(format!("conditioning buffer shape: {e}")))
}

/// Generate motion for a conditioning file and write the result to disk:
/// reads frame-aligned conditioning from `cond_path`, writes motion to
/// `out_path` in the library's binary matrix format.
///
/// # Safety
/// `model` must be a live handle; both paths must be NUL-terminated
/// strings; `opts` may be NULL for defaults.
#[no_mangle]
pub unsafe extern "C" fn xmot_generate_file(
    model: *const XmotModel,
    cond_path: *const c_char,
    out_path: *const c_char,
    opts: *const XmotGenerateOptions,
) -> XmotStatus {
    guarded(|| {
        let Some(model) = model.as_ref() else {
            return null_arg("model");
        };
        let cond_path = match path_arg(cond_path, "cond_path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        let out_path = match path_arg(out_path, "out_path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        let defaults = default_options();
        let opts = opts.as_ref().unwrap_or(&defaults);

        let cond_seq = match xmot::formats::read_cond(cond_path) {
            Ok(c) => c,
            Err(e) => return fail(&e),
        };
        let cfg = build_config(model, opts);
        let motion = match generate_sequence(&model.denoiser, &model.schedule, &cond_seq, &cfg) {
            Ok(m) => m,
            Err(e) => return fail(&e),
        };
        match xmot::formats::write_motion(out_path, &motion) {
            Ok(()) => XmotStatus::Ok,
            Err(e) => fail(&e),
        }
    })
}
