//! The denoiser network and its attention contracts.
//!
//! The network is a pre-norm transformer over noisy latent frames. Each token
//! is conditioned on its own diffusion timestep (added to the input embedding
//! alongside a window-local positional code), self-attends under a
//! chunk-causal mask — full attention inside a chunk, strictly causal across
//! chunks — and cross-attends to a narrow window of frame-aligned
//! conditioning features. A learned null embedding stands in for the
//! conditioning stream when it is absent, which is how both conditioning
//! dropout and the unconditional guidance pass are realized.
//!
//! Submodules: [`params`] owns the parameter store and checkpoint I/O,
//! [`net`] the forward and hand-derived backward passes.

pub mod net;
pub mod params;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::ChunkLayout;

pub use net::{BackwardResult, ForwardCache};
pub use params::{load_checkpoint, save_checkpoint, CheckpointMeta, Denoiser};

/// Which self-attention mask the model is trained and sampled with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    /// Full attention within a chunk, causal across chunks (the default).
    Chunked,
    /// Per-token causal attention, an ablation that removes intra-chunk
    /// bidirectionality.
    Causal,
}

impl std::fmt::Display for MaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MaskKind::Chunked => write!(f, "chunked"),
            MaskKind::Causal => write!(f, "causal"),
        }
    }
}

impl std::str::FromStr for MaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "chunked" => Ok(MaskKind::Chunked),
            "causal" => Ok(MaskKind::Causal),
            other => Err(Error::Config(format!(
                "unknown attention mask {other:?}, expected \"chunked\" or \"causal\""
            ))),
        }
    }
}

/// Architecture hyperparameters. Everything needed to rebuild the parameter
/// schema; stored verbatim in checkpoint manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    /// Motion latent dimensionality `d`.
    pub d_latent: usize,
    /// Conditioning feature dimensionality `d_a`.
    pub d_cond: usize,
    /// Transformer width; must be even and divisible by `num_heads`.
    pub d_model: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    /// Frames per chunk.
    pub chunk_size: usize,
    /// Maximum attended window in frames; positions are encoded relative to
    /// the oldest retained frame, so this bounds the positional table.
    pub max_context: usize,
    /// Half-width of the conditioning cross-attention window: token `t`
    /// attends to conditioning rows `t - w ..= t + w`, clamped at the edges.
    pub audio_window: usize,
    /// Activation dropout on the residual branches during training. Distinct
    /// from conditioning dropout, which is a training-config concern.
    pub dropout_rate: f64,
    /// Self-attention mask contract.
    pub mask: MaskKind,
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d_latent", self.d_latent),
            ("d_cond", self.d_cond),
            ("d_model", self.d_model),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("chunk_size", self.chunk_size),
            ("max_context", self.max_context),
        ] {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.num_heads != 0 {
            return Err(Error::invalid(format!(
                "d_model {} not divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if self.d_model % 2 != 0 {
            return Err(Error::invalid(
                "d_model must be even for sinusoidal embeddings",
            ));
        }
        if self.max_context < self.chunk_size {
            return Err(Error::invalid(format!(
                "max_context {} smaller than chunk_size {}",
                self.max_context, self.chunk_size
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid(format!(
                "dropout_rate must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    /// Attention head width.
    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }

    /// Feed-forward hidden width (the usual 4x expansion).
    pub fn ffn_dim(&self) -> usize {
        4 * self.d_model
    }
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            d_latent: 16,
            d_cond: 8,
            d_model: 64,
            num_layers: 4,
            num_heads: 4,
            chunk_size: 64,
            max_context: 512,
            audio_window: 2,
            dropout_rate: 0.0,
            mask: MaskKind::Chunked,
        }
    }
}

/// Boolean self-attention mask: `allowed[[i, j]]` says whether query token
/// `i` may attend to key token `j` (0-based frame indices within the window).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    allowed: Array2<bool>,
}

impl AttentionMask {
    pub fn allowed(&self) -> &Array2<bool> {
        &self.allowed
    }

    pub fn len(&self) -> usize {
        self.allowed.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.allowed.nrows() == 0
    }

    /// Collapse each row to its allowed-prefix length (exclusive end).
    ///
    /// Both mask kinds produced here are prefix-structured — every row allows
    /// keys `0..end` and nothing after — which is what lets the attention
    /// kernel skip masked keys entirely and produce exactly zero gradients
    /// across the boundary. Errors on masks that are not prefix-structured or
    /// that deny a token attention to itself.
    pub fn row_ends(&self) -> Result<Vec<usize>> {
        let t = self.allowed.nrows();
        let mut ends = Vec::with_capacity(t);
        for i in 0..t {
            let row = self.allowed.row(i);
            let end = row.iter().rposition(|&a| a).map_or(0, |p| p + 1);
            if row.iter().take(end).any(|&a| !a) {
                return Err(Error::invalid(format!(
                    "attention mask row {i} is not prefix-structured"
                )));
            }
            if end <= i {
                return Err(Error::invalid(format!(
                    "attention mask row {i} denies self-attention"
                )));
            }
            ends.push(end);
        }
        Ok(ends)
    }
}

/// Chunk-causal mask for a window tiled by `layout`: token `i` attends to
/// token `j` iff `j`'s chunk does not come after `i`'s.
pub fn build_attention_mask(layout: &ChunkLayout) -> AttentionMask {
    let t = layout.total_frames();
    let chunk_of: Vec<usize> = (0..t).map(|i| layout.chunk_of_frame0(i)).collect();
    let allowed = Array2::from_shape_fn((t, t), |(i, j)| chunk_of[j] <= chunk_of[i]);
    AttentionMask { allowed }
}

/// Per-token causal mask (`j <= i`), used by the fully-causal ablation.
pub fn build_causal_attention_mask(total_frames: usize) -> AttentionMask {
    let allowed = Array2::from_shape_fn((total_frames, total_frames), |(i, j)| j <= i);
    AttentionMask { allowed }
}

/// Build the configured mask kind for a window.
pub fn build_mask(kind: MaskKind, layout: &ChunkLayout) -> AttentionMask {
    match kind {
        MaskKind::Chunked => build_attention_mask(layout),
        MaskKind::Causal => build_causal_attention_mask(layout.total_frames()),
    }
}

/// Inclusive 0-based bounds of the conditioning rows token `t0` attends to:
/// `[t0 - w, t0 + w]` clamped into `[0, total - 1]`. The window is clamped,
/// not padded, so edge tokens see fewer rows.
pub fn audio_window_indices(t0: usize, total: usize, w: usize) -> (usize, usize) {
    debug_assert!(t0 < total);
    (t0.saturating_sub(w), (t0 + w).min(total - 1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::build_chunk_layout;
    use proptest::prelude::*;

    #[test]
    fn chunked_mask_is_full_within_and_causal_across() {
        let layout = build_chunk_layout(8, 4).unwrap();
        let mask = build_attention_mask(&layout);
        let a = mask.allowed();
        // bidirectional inside chunk 0
        assert!(a[[1, 3]]);
        assert!(a[[3, 1]]);
        // chunk 1 sees chunk 0, never the reverse
        assert!(a[[4, 3]]);
        assert!(!a[[3, 4]]);
        // inside chunk 1
        assert!(a[[4, 7]] && a[[7, 4]]);
        assert_eq!(mask.row_ends().unwrap(), vec![4, 4, 4, 4, 8, 8, 8, 8]);
    }

    #[test]
    fn causal_mask_is_lower_triangular() {
        let mask = build_causal_attention_mask(5);
        let ends = mask.row_ends().unwrap();
        assert_eq!(ends, vec![1, 2, 3, 4, 5]);
        assert!(!mask.allowed()[[2, 3]]);
        assert!(mask.allowed()[[3, 2]]);
    }

    #[test]
    fn row_ends_rejects_non_prefix_masks() {
        let mut allowed = Array2::from_elem((3, 3), false);
        for i in 0..3 {
            allowed[[i, i]] = true;
        }
        allowed[[2, 0]] = true; // hole at (2,1)
        let mask = AttentionMask { allowed };
        assert!(mask.row_ends().is_err());
    }

    #[test]
    fn audio_window_clamps_at_boundaries() {
        // interior
        assert_eq!(audio_window_indices(4, 10, 2), (2, 6));
        // left edge
        assert_eq!(audio_window_indices(0, 10, 2), (0, 2));
        assert_eq!(audio_window_indices(1, 10, 2), (0, 3));
        // right edge
        assert_eq!(audio_window_indices(9, 10, 2), (7, 9));
        // sequence shorter than the window span
        assert_eq!(audio_window_indices(1, 3, 2), (0, 2));
        // zero-width window degenerates to the aligned row
        assert_eq!(audio_window_indices(5, 10, 0), (5, 5));
    }

    #[test]
    fn config_validation_catches_bad_dims() {
        let ok = DenoiserConfig::default();
        assert!(ok.validate().is_ok());
        let mut bad = ok.clone();
        bad.d_model = 30;
        bad.num_heads = 4;
        assert!(bad.validate().is_err());
        let mut bad = ok.clone();
        bad.max_context = 32;
        assert!(bad.validate().is_err());
        let mut bad = ok.clone();
        bad.dropout_rate = 1.0;
        assert!(bad.validate().is_err());
        let mut bad = ok;
        bad.d_model = 0;
        assert!(bad.validate().is_err());
    }

    proptest! {
        /// Chunked masks are prefix-structured with ends aligned to chunk
        /// boundaries and monotone in the query index.
        #[test]
        fn chunked_mask_prefix_property(t in 1usize..200, cs in 1usize..64) {
            let layout = build_chunk_layout(t, cs).unwrap();
            let mask = build_attention_mask(&layout);
            let ends = mask.row_ends().unwrap();
            for i in 0..t {
                let c = layout.chunk_of_frame0(i);
                prop_assert_eq!(ends[i], layout.range0(c).end);
            }
            for w in ends.windows(2) {
                prop_assert!(w[0] <= w[1]);
            }
        }

        #[test]
        fn audio_window_contains_self_and_respects_width(
            t in 1usize..300, w in 0usize..8, frac in 0.0f64..1.0
        ) {
            let t0 = ((t - 1) as f64 * frac).round() as usize;
            let (lo, hi) = audio_window_indices(t0, t, w);
            prop_assert!(lo <= t0 && t0 <= hi);
            prop_assert!(hi < t);
            prop_assert!(t0 - lo <= w);
            prop_assert!(hi - t0 <= w);
            // clamping never shrinks the window below what fits
            if t0 >= w { prop_assert_eq!(lo, t0 - w); }
            if t0 + w < t { prop_assert_eq!(hi, t0 + w); }
        }
    }
}
