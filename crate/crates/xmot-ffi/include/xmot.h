#ifndef XMOT_H
#define XMOT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Which history-noise schedule `xmot_generate` applies to context frames.
typedef enum XmotScheduler {
  // Ramp from `k_max` on the oldest context frame down to 0 on the newest.
  XMOT_SCHEDULER_LINEAR_RAMP = 0,
  // One constant level everywhere (see `vanilla_level`).
  XMOT_SCHEDULER_VANILLA = 1,
  // Piecewise-constant staircase over `fractional_groups` groups.
  XMOT_SCHEDULER_FRACTIONAL = 2,
} XmotScheduler;

// Result of every fallible call in this API.
typedef enum XmotStatus {
  // Success.
  XMOT_STATUS_OK = 0,
  // A pointer argument that must not be NULL was NULL.
  XMOT_STATUS_NULL_POINTER = 1,
  // An argument failed validation (dimensions, ranges, UTF-8 paths).
  XMOT_STATUS_INVALID_ARGUMENT = 2,
  // An input file exists but is malformed.
  XMOT_STATUS_FORMAT_VIOLATION = 3,
  // An input file or directory does not exist.
  XMOT_STATUS_NOT_FOUND = 4,
  // Any other library failure (I/O, numeric divergence, ...).
  XMOT_STATUS_INTERNAL = 5,
  // A panic was caught at the ABI boundary.
  XMOT_STATUS_PANIC = 6,
} XmotStatus;

// An opaque loaded checkpoint (denoiser weights + diffusion schedule).
typedef struct XmotModel XmotModel;

// Generation parameters. Zero-initialize and call
// `xmot_generate_options_default`, then override fields as needed.
typedef struct XmotGenerateOptions {
  // RNG seed; equal seeds reproduce output bitwise.
  uint64_t seed;
  // Guidance strength; 1.0 means a single conditional pass.
  double cfg_scale;
  // Number of sampler steps per chunk (>= 1).
  size_t ddim_steps;
  enum XmotScheduler scheduler;
  // Highest context noise level; 0 means "the checkpoint's step count".
  size_t k_max;
  // Constant level for `Vanilla`; negative means `k_max / 2`.
  int64_t vanilla_level;
  // Group count for `Fractional` (>= 1).
  size_t fractional_groups;
  // Frames generated per autoregressive step; 0 means the trained size.
  size_t chunk_size;
  // Rolling context cap in frames; 0 means the trained maximum.
  size_t max_context;
} XmotGenerateOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copy the calling thread's most recent error into `buf` (NUL-terminated,
// truncated to `cap` bytes). Returns the full message length in bytes,
// excluding the NUL; call with `cap == 0` to size a buffer.
//
// # Safety
// `buf` must point to `cap` writable bytes, or `cap` must be 0.
size_t xmot_last_error_message(char *buf, size_t cap);

// Library version as a static NUL-terminated string.
const char *xmot_version(void);

// Load a trained checkpoint from `path` (the `.xckp` file written by
// training; its `.manifest` sibling must sit next to it). On success,
// stores a handle in `*out` that the caller must release with
// `xmot_model_free`.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum XmotStatus xmot_model_load(const char *path, struct XmotModel **out);

// Release a model handle. NULL is accepted and ignored.
//
// # Safety
// `model` must be a pointer returned by `xmot_model_load` that has not
// been freed yet, or NULL.
void xmot_model_free(struct XmotModel *model);

// Fill `opts` with defaults: seed 0, guidance 3.0, 50 sampler steps,
// linear-ramp context noise, and the checkpoint's native geometry.
//
// # Safety
// `opts` must be a valid pointer.
enum XmotStatus xmot_generate_options_default(struct XmotGenerateOptions *opts);

// Generate motion for a conditioning stream held in memory.
//
// `cond` is row-major `frames x cond_dim` and must match the model's
// conditioning width. The result is written to `out_motion`, row-major
// `frames x latent_dim` (`frames * xmot_model_latent_dim(model)` doubles,
// caller-allocated). Equal inputs and options reproduce output bitwise.
//
// # Safety
// `model` must be a live handle; `cond` must point to
// `frames * cond_dim` doubles; `out_motion` must point to
// `frames * xmot_model_latent_dim(model)` writable doubles; `opts` may
// be NULL for defaults.
enum XmotStatus xmot_generate(const struct XmotModel *model,
                              const double *cond,
                              size_t frames,
                              size_t cond_dim,
                              const struct XmotGenerateOptions *opts,
                              double *out_motion);

// Generate motion for a conditioning file and write the result to disk:
// reads frame-aligned conditioning from `cond_path`, writes motion to
// `out_path` in the library's binary matrix format.
//
// # Safety
// `model` must be a live handle; both paths must be NUL-terminated
// strings; `opts` may be NULL for defaults.
enum XmotStatus xmot_generate_file(const struct XmotModel *model,
                                   const char *cond_path,
                                   const char *out_path,
                                   const struct XmotGenerateOptions *opts);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* XMOT_H */
