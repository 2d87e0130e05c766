//! Denoiser forward and backward passes.
//!
//! Hand-derived backpropagation over an explicit cache. The two properties
//! the implementation is built around:
//!
//! - masked attention computes softmax only over each row's allowed prefix
//!   and leaves the rest of the probability row at exactly 0.0, so gradients
//!   across chunk boundaries are *exactly* zero, not merely small;
//! - everything is f64 and single-threaded, so forward and backward are
//!   bitwise deterministic functions of their inputs.

use ndarray::{s, Array2};
use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};

use super::params::Denoiser;
use super::{audio_window_indices, AttentionMask};

const LN_EPS: f64 = 1e-5;

// ---------------------------------------------------------------------------
// small numeric helpers

/// Sinusoidal features of a scalar index, standard transformer recipe:
/// even columns sin, odd columns cos, geometric frequency ladder.
fn sinusoid_into(pos: f64, row: &mut [f64]) {
    let d = row.len();
    let half = d / 2;
    for i in 0..half {
        let freq = (-(2.0 * i as f64 / d as f64) * 10000f64.ln()).exp();
        row[2 * i] = (pos * freq).sin();
        row[2 * i + 1] = (pos * freq).cos();
    }
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    const A: f64 = 0.044715;
    0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh())
}

fn gelu_prime(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    const A: f64 = 0.044715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x)
}

fn gelu_mat(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(gelu)
}

/// y = x @ w + b  (b is 1 x n, broadcast over rows)
fn affine(x: &Array2<f64>, w: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let mut y = x.dot(w);
    let bv = b.row(0);
    for mut row in y.rows_mut() {
        for (v, &bb) in row.iter_mut().zip(bv.iter()) {
            *v += bb;
        }
    }
    y
}

fn bias_grad(d: &Array2<f64>) -> Array2<f64> {
    let mut g = Array2::zeros((1, d.ncols()));
    for row in d.rows() {
        for (gv, &dv) in g.row_mut(0).iter_mut().zip(row.iter()) {
            *gv += dv;
        }
    }
    g
}

struct LnCache {
    xhat: Array2<f64>,
    invstd: Vec<f64>,
}

fn ln_forward(x: &Array2<f64>, g: &Array2<f64>, b: &Array2<f64>) -> (Array2<f64>, LnCache) {
    let (t, d) = x.dim();
    let mut xhat = Array2::zeros((t, d));
    let mut invstd = Vec::with_capacity(t);
    let mut y = Array2::zeros((t, d));
    let gv = g.row(0);
    let bv = b.row(0);
    for i in 0..t {
        let row = x.row(i);
        let mean = row.sum() / d as f64;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        invstd.push(is);
        for j in 0..d {
            let xh = (row[j] - mean) * is;
            xhat[[i, j]] = xh;
            y[[i, j]] = xh * gv[j] + bv[j];
        }
    }
    (y, LnCache { xhat, invstd })
}

/// Returns (d_x, d_g, d_b).
fn ln_backward(
    d_y: &Array2<f64>,
    cache: &LnCache,
    g: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let (t, d) = d_y.dim();
    let mut d_x = Array2::zeros((t, d));
    let mut d_g = Array2::zeros((1, d));
    let mut d_b = Array2::zeros((1, d));
    let gv = g.row(0);
    for i in 0..t {
        let dy = d_y.row(i);
        let xh = cache.xhat.row(i);
        let is = cache.invstd[i];
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..d {
            let dxh = dy[j] * gv[j];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xh[j];
            d_g[[0, j]] += dy[j] * xh[j];
            d_b[[0, j]] += dy[j];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        for j in 0..d {
            let dxh = dy[j] * gv[j];
            d_x[[i, j]] = is * (dxh - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
    (d_x, d_g, d_b)
}

/// In-place softmax over `row[0..end]`; the rest of the row is set to exactly
/// zero, which is what guarantees exact-zero attention (and gradients) to
/// masked-out keys.
fn prefix_softmax(row: &mut [f64], end: usize) {
    debug_assert!(end >= 1 && end <= row.len());
    let mut max = f64::NEG_INFINITY;
    for &v in &row[..end] {
        if v > max {
            max = v;
        }
    }
    let mut sum = 0.0;
    for v in &mut row[..end] {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in &mut row[..end] {
        *v /= sum;
    }
    for v in &mut row[end..] {
        *v = 0.0;
    }
}

// ---------------------------------------------------------------------------
// caches

struct LayerCache {
    ln1: LnCache,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// per head: T x T attention probabilities, zero outside the prefix
    probs: Vec<Array2<f64>>,
    attn_concat: Array2<f64>,
    drop1: Option<Array2<f64>>,
    ln2: LnCache,
    cq: Array2<f64>,
    ck_t: Array2<f64>,
    cv_t: Array2<f64>,
    rk: Array2<f64>,
    rv: Array2<f64>,
    /// per head: T x (2w+1) window probabilities, zero at clamped offsets
    cprobs: Vec<Array2<f64>>,
    cattn_concat: Array2<f64>,
    drop2: Option<Array2<f64>>,
    ln3: LnCache,
    ffn_pre: Array2<f64>,
    drop3: Option<Array2<f64>>,
}

/// Everything backward needs; produced by [`Denoiser::forward_cached`].
pub struct ForwardCache {
    z: Array2<f64>,
    tfeat: Array2<f64>,
    time_pre: Array2<f64>,
    time_hidden: Array2<f64>,
    cond_present: bool,
    cond_in: Array2<f64>,
    d_ce_zero: Array2<f64>,
    ends: Vec<usize>,
    layers: Vec<LayerCache>,
    ln_f: LnCache,
    y: Array2<f64>,
}

/// Gradients from one backward pass.
pub struct BackwardResult {
    /// Parameter gradients, schema-indexed like `Denoiser::params`.
    pub grads: Vec<Array2<f64>>,
    /// Gradient with respect to the noisy input latents (T x d_latent).
    pub d_input: Array2<f64>,
    /// Gradient with respect to the conditioning rows (T x d_cond) when a
    /// conditioning stream was supplied; with the null embedding the
    /// equivalent gradient is folded into the `cond.null` parameter.
    pub d_cond: Option<Array2<f64>>,
}

impl Denoiser {
    /// Predict v for every frame of a noisy window.
    ///
    /// `timesteps` supplies each token's diffusion step for the embedding;
    /// `cond` is the frame-aligned conditioning window or `None` for the
    /// learned null embedding; `mask` is the self-attention contract.
    /// Deterministic: no dropout is applied on this path.
    pub fn forward(
        &self,
        z: &Array2<f64>,
        timesteps: &[usize],
        cond: Option<&Array2<f64>>,
        mask: &AttentionMask,
    ) -> Result<Array2<f64>> {
        let (out, _) = self.forward_cached(z, timesteps, cond, mask, None)?;
        Ok(out)
    }

    /// Forward pass that also returns the cache for [`Self::backward`].
    /// `dropout_rng` enables activation dropout at the configured rate.
    pub fn forward_cached(
        &self,
        z: &Array2<f64>,
        timesteps: &[usize],
        cond: Option<&Array2<f64>>,
        mask: &AttentionMask,
        mut dropout_rng: Option<&mut ChaCha20Rng>,
    ) -> Result<(Array2<f64>, ForwardCache)> {
        let (t, dl) = z.dim();
        let cfg = &self.cfg;
        if dl != cfg.d_latent {
            return Err(Error::invalid(format!(
                "input latent dim {dl}, model expects {}",
                cfg.d_latent
            )));
        }
        if t == 0 {
            return Err(Error::invalid("empty input window"));
        }
        if t > cfg.max_context {
            return Err(Error::invalid(format!(
                "window of {t} frames exceeds max_context {}",
                cfg.max_context
            )));
        }
        if timesteps.len() != t {
            return Err(Error::invalid(format!(
                "{} timesteps for {t} frames",
                timesteps.len()
            )));
        }
        if mask.len() != t {
            return Err(Error::invalid(format!(
                "mask covers {} frames, window has {t}",
                mask.len()
            )));
        }
        let ends = mask.row_ends()?;
        if let Some(c) = cond {
            if c.dim() != (t, cfg.d_cond) {
                return Err(Error::invalid(format!(
                    "conditioning shape {:?}, expected ({t}, {})",
                    c.dim(),
                    cfg.d_cond
                )));
            }
        }

        let dm = cfg.d_model;
        let heads = cfg.num_heads;
        let dh = cfg.head_dim();
        let w = cfg.audio_window;
        let span = 2 * w + 1;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let idx = &self.schema.idx;
        let p = &self.params;

        // --- embeddings ---------------------------------------------------
        let mut pos = Array2::zeros((t, dm));
        for i in 0..t {
            sinusoid_into(i as f64, pos.row_mut(i).as_slice_mut().unwrap());
        }
        let mut tfeat = Array2::zeros((t, dm));
        for i in 0..t {
            sinusoid_into(
                timesteps[i] as f64,
                tfeat.row_mut(i).as_slice_mut().unwrap(),
            );
        }
        let time_pre = affine(&tfeat, &p[idx.time_w1], &p[idx.time_b1]);
        let time_hidden = gelu_mat(&time_pre);
        let temb = affine(&time_hidden, &p[idx.time_w2], &p[idx.time_b2]);

        let mut x = affine(z, &p[idx.w_in], &p[idx.b_in]);
        x += &pos;
        x += &temb;

        // --- conditioning embedding (shared by all layers) -----------------
        let cond_present = cond.is_some();
        let cond_in: Array2<f64> = match cond {
            Some(c) => c.clone(),
            None => {
                let null = p[idx.cond_null].row(0);
                Array2::from_shape_fn((t, cfg.d_cond), |(_, j)| null[j])
            }
        };
        let ce = affine(&cond_in, &p[idx.cond_w], &p[idx.cond_b]);

        let dropout_mask = |rng: &mut Option<&mut ChaCha20Rng>,
                                rows: usize,
                                cols: usize|
         -> Option<Array2<f64>> {
            let rate = cfg.dropout_rate;
            match rng {
                Some(r) if rate > 0.0 => {
                    let keep = 1.0 - rate;
                    Some(Array2::from_shape_fn((rows, cols), |_| {
                        if r.random::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    }))
                }
                _ => None,
            }
        };

        // --- transformer blocks --------------------------------------------
        let mut layers = Vec::with_capacity(cfg.num_layers);
        for li in idx.layers.iter() {
            let x_in = x.clone();

            // self-attention, chunk-causal
            let (h1, ln1) = ln_forward(&x_in, &p[li.ln1_g], &p[li.ln1_b]);
            let q = h1.dot(&p[li.wq]);
            let k = h1.dot(&p[li.wk]);
            let v = h1.dot(&p[li.wv]);
            let mut probs = Vec::with_capacity(heads);
            let mut attn_concat = Array2::zeros((t, dm));
            for h in 0..heads {
                let cols = s![.., h * dh..(h + 1) * dh];
                let qh = q.slice(cols);
                let kh = k.slice(cols);
                let vh = v.slice(cols);
                let mut scores = qh.dot(&kh.t());
                scores.mapv_inplace(|s| s * inv_sqrt);
                for i in 0..t {
                    prefix_softmax(scores.row_mut(i).as_slice_mut().unwrap(), ends[i]);
                }
                let oh = scores.dot(&vh);
                attn_concat.slice_mut(cols).assign(&oh);
                probs.push(scores);
            }
            let mut sa = attn_concat.dot(&p[li.wo]);
            let drop1 = dropout_mask(&mut dropout_rng, t, dm);
            if let Some(m) = &drop1 {
                sa *= m;
            }
            let x_mid = &x_in + &sa;

            // windowed cross-attention to the conditioning embedding
            let (h2, ln2) = ln_forward(&x_mid, &p[li.ln2_g], &p[li.ln2_b]);
            let cq = h2.dot(&p[li.cq]);
            let ck_t = ce.dot(&p[li.ck]);
            let cv_t = ce.dot(&p[li.cv]);
            let rk = p[li.rel].dot(&p[li.ck]);
            let rv = p[li.rel].dot(&p[li.cv]);
            let mut cprobs = Vec::with_capacity(heads);
            let mut cattn_concat = Array2::zeros((t, dm));
            for h in 0..heads {
                let hc = h * dh;
                let mut pmat = Array2::zeros((t, span));
                for i in 0..t {
                    let (lo, hi) = audio_window_indices(i, t, w);
                    let d0 = lo + w - i; // delta index of lo
                    let width = hi - lo + 1;
                    let mut row = [0.0f64; 64];
                    debug_assert!(span <= 64);
                    for o in 0..width {
                        let r = lo + o;
                        let delta = d0 + o;
                        let mut s_val = 0.0;
                        for j in 0..dh {
                            s_val += cq[[i, hc + j]] * (ck_t[[r, hc + j]] + rk[[delta, hc + j]]);
                        }
                        row[o] = s_val * inv_sqrt;
                    }
                    prefix_softmax(&mut row[..width], width);
                    for o in 0..width {
                        pmat[[i, d0 + o]] = row[o];
                    }
                    for j in 0..dh {
                        let mut acc = 0.0;
                        for o in 0..width {
                            let r = lo + o;
                            let delta = d0 + o;
                            acc += row[o] * (cv_t[[r, hc + j]] + rv[[delta, hc + j]]);
                        }
                        cattn_concat[[i, hc + j]] = acc;
                    }
                }
                cprobs.push(pmat);
            }
            let mut ca = cattn_concat.dot(&p[li.co]);
            let drop2 = dropout_mask(&mut dropout_rng, t, dm);
            if let Some(m) = &drop2 {
                ca *= m;
            }
            let x_mid2 = &x_mid + &ca;

            // feed-forward
            let (h3, ln3) = ln_forward(&x_mid2, &p[li.ln3_g], &p[li.ln3_b]);
            let ffn_pre = affine(&h3, &p[li.ffn_w1], &p[li.ffn_b1]);
            let act = gelu_mat(&ffn_pre);
            let mut ff = affine(&act, &p[li.ffn_w2], &p[li.ffn_b2]);
            let drop3 = dropout_mask(&mut dropout_rng, t, dm);
            if let Some(m) = &drop3 {
                ff *= m;
            }
            x = &x_mid2 + &ff;

            layers.push(LayerCache {
                ln1,
                q,
                k,
                v,
                probs,
                attn_concat,
                drop1,
                ln2,
                cq,
                ck_t,
                cv_t,
                rk,
                rv,
                cprobs,
                cattn_concat,
                drop2,
                ln3,
                ffn_pre,
                drop3,
            });
        }

        let (y, ln_f) = ln_forward(&x, &p[idx.final_g], &p[idx.final_b]);
        let out = affine(&y, &p[idx.w_out], &p[idx.b_out]);

        let cache = ForwardCache {
            z: z.clone(),
            tfeat,
            time_pre,
            time_hidden,
            cond_present,
            cond_in,
            d_ce_zero: Array2::zeros((t, dm)),
            ends,
            layers,
            ln_f,
            y,
        };
        Ok((out, cache))
    }

    /// Backpropagate `d_out` (gradient of a scalar loss with respect to the
    /// forward output) through the cached pass.
    pub fn backward(&self, cache: &ForwardCache, d_out: &Array2<f64>) -> BackwardResult {
        let cfg = &self.cfg;
        let t = cache.z.nrows();
        let dm = cfg.d_model;
        let heads = cfg.num_heads;
        let dh = cfg.head_dim();
        let w = cfg.audio_window;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let idx = &self.schema.idx;
        let p = &self.params;
        assert_eq!(d_out.dim(), (t, cfg.d_latent), "d_out shape");

        let mut grads = self.zero_grads();

        // output head
        grads[idx.w_out] = cache.y.t().dot(d_out);
        grads[idx.b_out] = bias_grad(d_out);
        let d_y = d_out.dot(&p[idx.w_out].t());
        let (mut d_x, d_g, d_b) = ln_backward(&d_y, &cache.ln_f, &p[idx.final_g]);
        grads[idx.final_g] = d_g;
        grads[idx.final_b] = d_b;

        // conditioning-embedding gradient accumulates across layers
        let mut d_ce = cache.d_ce_zero.clone();

        for (li, lc) in idx.layers.iter().zip(cache.layers.iter()).rev() {
            // ---- feed-forward ----
            let mut d_ff = d_x.clone();
            if let Some(m) = &lc.drop3 {
                d_ff *= m;
            }
            let act = gelu_mat(&lc.ffn_pre);
            grads[li.ffn_w2] = act.t().dot(&d_ff);
            grads[li.ffn_b2] = bias_grad(&d_ff);
            let mut d_pre = d_ff.dot(&p[li.ffn_w2].t());
            ndarray::Zip::from(&mut d_pre)
                .and(&lc.ffn_pre)
                .for_each(|dv, &pre| *dv *= gelu_prime(pre));
            let h3 = {
                // recompute ln3 output from its cache
                let gv = p[li.ln3_g].row(0);
                let bv = p[li.ln3_b].row(0);
                let mut h = lc.ln3.xhat.clone();
                for mut row in h.rows_mut() {
                    for (j, v) in row.iter_mut().enumerate() {
                        *v = *v * gv[j] + bv[j];
                    }
                }
                h
            };
            grads[li.ffn_w1] = h3.t().dot(&d_pre);
            grads[li.ffn_b1] = bias_grad(&d_pre);
            let d_h3 = d_pre.dot(&p[li.ffn_w1].t());
            let (d_from_ln3, d_g3, d_b3) = ln_backward(&d_h3, &lc.ln3, &p[li.ln3_g]);
            grads[li.ln3_g] = d_g3;
            grads[li.ln3_b] = d_b3;
            // residual: d_x_mid2 = d_x (skip) + d_from_ln3
            let d_x_mid2 = &d_x + &d_from_ln3;

            // ---- cross-attention ----
            let mut d_ca = d_x_mid2.clone();
            if let Some(m) = &lc.drop2 {
                d_ca *= m;
            }
            grads[li.co] = lc.cattn_concat.t().dot(&d_ca);
            let d_concat = d_ca.dot(&p[li.co].t());
            let span = 2 * w + 1;
            let mut d_cq = Array2::zeros((t, dm));
            let mut d_ck_t = Array2::zeros((t, dm));
            let mut d_cv_t = Array2::zeros((t, dm));
            let mut d_rk = Array2::zeros((span, dm));
            let mut d_rv = Array2::zeros((span, dm));
            for h in 0..heads {
                let hc = h * dh;
                let pmat = &lc.cprobs[h];
                for i in 0..t {
                    let (lo, hi) = audio_window_indices(i, t, w);
                    let d0 = lo + w - i;
                    let width = hi - lo + 1;
                    // dp and the softmax pullback
                    let mut dp = [0.0f64; 64];
                    let mut dot = 0.0;
                    for o in 0..width {
                        let r = lo + o;
                        let delta = d0 + o;
                        let mut acc = 0.0;
                        for j in 0..dh {
                            acc += d_concat[[i, hc + j]]
                                * (lc.cv_t[[r, hc + j]] + lc.rv[[delta, hc + j]]);
                        }
                        dp[o] = acc;
                        dot += acc * pmat[[i, d0 + o]];
                    }
                    for o in 0..width {
                        let r = lo + o;
                        let delta = d0 + o;
                        let prob = pmat[[i, d0 + o]];
                        // value-path gradients
                        for j in 0..dh {
                            let dv = prob * d_concat[[i, hc + j]];
                            d_cv_t[[r, hc + j]] += dv;
                            d_rv[[delta, hc + j]] += dv;
                        }
                        // score gradient through softmax
                        let ds = prob * (dp[o] - dot) * inv_sqrt;
                        for j in 0..dh {
                            d_cq[[i, hc + j]] +=
                                ds * (lc.ck_t[[r, hc + j]] + lc.rk[[delta, hc + j]]);
                            let dk = ds * lc.cq[[i, hc + j]];
                            d_ck_t[[r, hc + j]] += dk;
                            d_rk[[delta, hc + j]] += dk;
                        }
                    }
                }
            }
            let h2 = {
                let gv = p[li.ln2_g].row(0);
                let bv = p[li.ln2_b].row(0);
                let mut h = lc.ln2.xhat.clone();
                for mut row in h.rows_mut() {
                    for (j, v) in row.iter_mut().enumerate() {
                        *v = *v * gv[j] + bv[j];
                    }
                }
                h
            };
            grads[li.cq] = h2.t().dot(&d_cq);
            grads[li.ck] = cache_ce(self, cache).t().dot(&d_ck_t) + p[li.rel].t().dot(&d_rk);
            grads[li.cv] = cache_ce(self, cache).t().dot(&d_cv_t) + p[li.rel].t().dot(&d_rv);
            grads[li.rel] = d_rk.dot(&p[li.ck].t()) + d_rv.dot(&p[li.cv].t());
            d_ce += &d_ck_t.dot(&p[li.ck].t());
            d_ce += &d_cv_t.dot(&p[li.cv].t());
            let d_h2 = d_cq.dot(&p[li.cq].t());
            let (d_from_ln2, d_g2, d_b2) = ln_backward(&d_h2, &lc.ln2, &p[li.ln2_g]);
            grads[li.ln2_g] = d_g2;
            grads[li.ln2_b] = d_b2;
            let d_x_mid = &d_x_mid2 + &d_from_ln2;

            // ---- self-attention ----
            let mut d_sa = d_x_mid.clone();
            if let Some(m) = &lc.drop1 {
                d_sa *= m;
            }
            grads[li.wo] = lc.attn_concat.t().dot(&d_sa);
            let d_concat = d_sa.dot(&p[li.wo].t());
            let mut d_q = Array2::zeros((t, dm));
            let mut d_k = Array2::zeros((t, dm));
            let mut d_v = Array2::zeros((t, dm));
            for h in 0..heads {
                let cols = s![.., h * dh..(h + 1) * dh];
                let pmat = &lc.probs[h];
                let d_oh = d_concat.slice(cols);
                let vh = lc.v.slice(cols);
                let qh = lc.q.slice(cols);
                let kh = lc.k.slice(cols);
                // dV = P^T dO ; dP = dO V^T
                let d_vh = pmat.t().dot(&d_oh);
                let d_p = d_oh.dot(&vh.t());
                // softmax pullback: dS = P .* (dP - rowdot(dP, P)), rows
                // beyond the prefix stay exactly zero because P is zero there
                let mut d_s = Array2::zeros((t, t));
                for i in 0..t {
                    let end = cache.ends[i];
                    let prow = pmat.row(i);
                    let dprow = d_p.row(i);
                    let mut dot = 0.0;
                    for j in 0..end {
                        dot += dprow[j] * prow[j];
                    }
                    for j in 0..end {
                        d_s[[i, j]] = prow[j] * (dprow[j] - dot) * inv_sqrt;
                    }
                }
                let d_qh = d_s.dot(&kh);
                let d_kh = d_s.t().dot(&qh);
                d_q.slice_mut(cols).assign(&d_qh);
                d_k.slice_mut(cols).assign(&d_kh);
                d_v.slice_mut(cols).assign(&d_vh);
            }
            let h1 = {
                let gv = p[li.ln1_g].row(0);
                let bv = p[li.ln1_b].row(0);
                let mut h = lc.ln1.xhat.clone();
                for mut row in h.rows_mut() {
                    for (j, v) in row.iter_mut().enumerate() {
                        *v = *v * gv[j] + bv[j];
                    }
                }
                h
            };
            grads[li.wq] = h1.t().dot(&d_q);
            grads[li.wk] = h1.t().dot(&d_k);
            grads[li.wv] = h1.t().dot(&d_v);
            let d_h1 = d_q.dot(&p[li.wq].t()) + d_k.dot(&p[li.wk].t()) + d_v.dot(&p[li.wv].t());
            let (d_from_ln1, d_g1, d_b1) = ln_backward(&d_h1, &lc.ln1, &p[li.ln1_g]);
            grads[li.ln1_g] = d_g1;
            grads[li.ln1_b] = d_b1;
            d_x = &d_x_mid + &d_from_ln1;
        }

        // ---- conditioning projection ----
        grads[idx.cond_w] = cache.cond_in.t().dot(&d_ce);
        grads[idx.cond_b] = bias_grad(&d_ce);
        let d_cond_in = d_ce.dot(&p[idx.cond_w].t());
        let d_cond = if cache.cond_present {
            Some(d_cond_in)
        } else {
            grads[idx.cond_null] = bias_grad(&d_cond_in);
            None
        };

        // ---- input embedding ----
        // d_x is now the gradient at x0 = z W_in + b_in + pos + temb
        grads[idx.w_in] = cache.z.t().dot(&d_x);
        grads[idx.b_in] = bias_grad(&d_x);
        let d_input = d_x.dot(&p[idx.w_in].t());
        // time MLP
        grads[idx.time_w2] = cache.time_hidden.t().dot(&d_x);
        grads[idx.time_b2] = bias_grad(&d_x);
        let mut d_time_pre = d_x.dot(&p[idx.time_w2].t());
        ndarray::Zip::from(&mut d_time_pre)
            .and(&cache.time_pre)
            .for_each(|dv, &pre| *dv *= gelu_prime(pre));
        grads[idx.time_w1] = cache.tfeat.t().dot(&d_time_pre);
        grads[idx.time_b1] = bias_grad(&d_time_pre);

        BackwardResult {
            grads,
            d_input,
            d_cond,
        }
    }
}

/// The conditioning embedding `ce` is cheap to recompute and needed by every
/// layer's backward; recomputing beats caching T x d_model per layer.
fn cache_ce(model: &Denoiser, cache: &ForwardCache) -> Array2<f64> {
    let idx = &model.schema.idx;
    affine(
        &cache.cond_in,
        &model.params[idx.cond_w],
        &model.params[idx.cond_b],
    )
}
