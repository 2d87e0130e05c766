//! Chunk-wise autoregressive diffusion for conditioned motion-latent sequences.
//!
//! The crate generates long motion-latent streams one fixed-size chunk at a
//! time: within a chunk every token denoises jointly (full bidirectional
//! attention), across chunks attention is strictly causal, and already
//! generated history is re-noised to a scheduler-chosen level so the model
//! never conditions on a sharper history than it saw during training.
//! Conditioning is a frame-aligned feature stream attended through a narrow
//! per-token window.
//!
//! Modules, bottom-up:
//! - [`types`]: sequences, chunk layouts, per-token noise assignments
//! - [`schedule`]: alpha-bar noise schedules and signal/noise coefficients
//! - [`diffusion`]: forward corruption, v-prediction targets, DDIM, CFG
//! - [`model`]: the denoiser network, its masks, parameters and checkpoints
//! - [`training`]: noise-assignment sampling, losses, Adam training loop
//! - [`inference`]: history-noise schedulers and chunk-wise rollout
//! - [`synthdata`]: synthetic paired corpus generator with truth sidecars
//! - [`metrics`]: audio-sync proxy, expressiveness, drift, regime accuracy
//! - [`formats`]: XMOT / XCND binary sequence files
//! - [`config`]: key=value config files and CLI/file/default precedence
//! - [`harness`]: drivers behind the CLI subcommands, including the ablation
//!   sweep

pub mod config;
pub mod diffusion;
pub mod error;
pub mod formats;
pub mod harness;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod schedule;
pub mod synthdata;
pub mod training;
pub mod types;

pub use error::{Error, Result};
