//! A small pre-norm transformer language model with masked-LM and
//! autoregressive objectives, exact analytic gradients, and exposed
//! per-layer, per-head attention matrices.
//!
//! Architecture: token embedding + learned positional embedding, then
//! `L × (LayerNorm → multi-head self-attention → residual → LayerNorm →
//! GELU feed-forward → residual)`, a final LayerNorm, and an output
//! projection with bias (no weight tying). Attention projections carry no
//! biases. The loss is the mean natural-log cross-entropy over target
//! positions; AR uses a causal attention mask, MLM full attention; PAD keys
//! are masked additively everywhere.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Sample, MASK, PAD};
use crate::util::substream;

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("sample contains no non-PAD tokens")]
    AllPad,
    #[error("objective has no target positions (AR needs >= 2 real tokens)")]
    NoTargets,
    #[error("non-finite value in {0} (divergence)")]
    NonFinite(&'static str),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint manifest: {0}")]
    Manifest(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Mlm,
    Ar,
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::Mlm => "mlm",
            Objective::Ar => "ar",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub objective: Objective,
    /// MLM masking probability per non-pad position (ignored for AR).
    pub mask_rate: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.n_layers == 0 || self.n_heads == 0 || self.model_dim == 0 || self.ff_dim == 0 {
            return bad("layer, head and width counts must be >= 1");
        }
        if self.model_dim % self.n_heads != 0 {
            return bad("model_dim must be divisible by n_heads");
        }
        if self.vocab_size <= 3 {
            return bad("vocab_size must exceed the reserved tokens");
        }
        if self.seq_len < 2 {
            return bad("seq_len must be >= 2");
        }
        if self.objective == Objective::Mlm && !(self.mask_rate > 0.0 && self.mask_rate <= 1.0) {
            return bad("mask_rate must be in (0, 1]");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.n_heads
    }
}

/// One named tensor; vectors are stored with `rows = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    fn zeros(name: String, rows: usize, cols: usize) -> Self {
        Tensor {
            name,
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }
}

// Tensor inventory offsets; the inventory order is stable and defines the
// gradient-feature ordering used by attacks.
const T_EMBED_TOK: usize = 0;
const T_EMBED_POS: usize = 1;
const PER_LAYER: usize = 12;
const L_LN1_G: usize = 0;
const L_LN1_B: usize = 1;
const L_WQ: usize = 2;
const L_WK: usize = 3;
const L_WV: usize = 4;
const L_WO: usize = 5;
const L_LN2_G: usize = 6;
const L_LN2_B: usize = 7;
const L_FF_W1: usize = 8;
const L_FF_B1: usize = 9;
const L_FF_W2: usize = 10;
const L_FF_B2: usize = 11;

fn layer_base(l: usize) -> usize {
    2 + PER_LAYER * l
}

/// (name, rows, cols) for every tensor, in the stable inventory order.
pub fn tensor_inventory(cfg: &ModelConfig) -> Vec<(String, usize, usize)> {
    let d = cfg.model_dim;
    let mut inv = vec![
        ("embed_tok".to_string(), cfg.vocab_size, d),
        ("embed_pos".to_string(), cfg.seq_len, d),
    ];
    for l in 0..cfg.n_layers {
        inv.push((format!("layer{l}_ln1_g"), 1, d));
        inv.push((format!("layer{l}_ln1_b"), 1, d));
        inv.push((format!("layer{l}_attn_wq"), d, d));
        inv.push((format!("layer{l}_attn_wk"), d, d));
        inv.push((format!("layer{l}_attn_wv"), d, d));
        inv.push((format!("layer{l}_attn_wo"), d, d));
        inv.push((format!("layer{l}_ln2_g"), 1, d));
        inv.push((format!("layer{l}_ln2_b"), 1, d));
        inv.push((format!("layer{l}_ffw_w1"), d, cfg.ff_dim));
        inv.push((format!("layer{l}_ffw_b1"), 1, cfg.ff_dim));
        inv.push((format!("layer{l}_ffw_w2"), cfg.ff_dim, d));
        inv.push((format!("layer{l}_ffw_b2"), 1, d));
    }
    inv.push(("final_ln_g".to_string(), 1, d));
    inv.push(("final_ln_b".to_string(), 1, d));
    inv.push(("head_w".to_string(), d, cfg.vocab_size));
    inv.push(("head_b".to_string(), 1, cfg.vocab_size));
    inv
}

/// The model's parameters as a stable, named tensor inventory.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    pub config: ModelConfig,
    pub tensors: Vec<Tensor>,
}

/// Gradients mirror the parameter inventory exactly.
pub type GradientSet = ParameterSet;

impl ParameterSet {
    /// All-zero tensors with the inventory shapes (gradient scratch).
    pub fn zeros(config: &ModelConfig) -> Self {
        let tensors = tensor_inventory(config)
            .into_iter()
            .map(|(name, r, c)| Tensor::zeros(name, r, c))
            .collect();
        ParameterSet {
            config: *config,
            tensors,
        }
    }

    pub fn n_params(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    fn t(&self, i: usize) -> &[f64] {
        &self.tensors[i].data
    }

    fn tm(&mut self, i: usize) -> &mut [f64] {
        &mut self.tensors[i].data
    }

    /// Squared L2 norm across all tensors (the "global" norm of DP-SGD).
    pub fn global_sq_norm(&self) -> f64 {
        self.tensors
            .iter()
            .map(|t| t.data.iter().map(|x| x * x).sum::<f64>())
            .sum()
    }

    /// `self += c * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &ParameterSet, c: f64) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            debug_assert_eq!(a.data.len(), b.data.len());
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += c * y;
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for t in self.tensors.iter_mut() {
            for x in t.data.iter_mut() {
                *x *= c;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.data.iter().all(|x| x.is_finite()))
    }
}

/// Initialization: embeddings ~ N(0, 0.02²); projection matrices use
/// fan-in-scaled normals N(0, 1/d_in) so attention logits start at unit
/// scale and the heads differentiate during training; biases zero,
/// layer-norm gains one. Deterministic given `seed`.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ParameterSet, ModelError> {
    config.validate()?;
    let mut params = ParameterSet::zeros(config);
    let mut rng = substream(seed, "init", 0, 0);
    let embed_normal = Normal::new(0.0, INIT_STD).expect("valid init std");
    for t in params.tensors.iter_mut() {
        let is_gain =
            t.name.ends_with("ln1_g") || t.name.ends_with("ln2_g") || t.name == "final_ln_g";
        let is_bias = t.name.ends_with("_b") || t.name.ends_with("_b1") || t.name.ends_with("_b2");
        if is_gain {
            t.data.fill(1.0);
        } else if is_bias {
            // already zero
        } else if t.name.starts_with("embed_") {
            for x in t.data.iter_mut() {
                *x = embed_normal.sample(&mut rng);
            }
        } else {
            let fan_in = t.rows as f64;
            let normal = Normal::new(0.0, fan_in.sqrt().recip()).expect("valid fan-in std");
            for x in t.data.iter_mut() {
                *x = normal.sample(&mut rng);
            }
        }
    }
    Ok(params)
}

/// A single training/evaluation instance: the (possibly masked) input and
/// the positions whose tokens the loss is taken over.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveInstance {
    pub input_tokens: Vec<u32>,
    pub target_positions: Vec<usize>,
    pub target_tokens: Vec<u32>,
    /// Leading non-PAD length of the underlying sample.
    pub real_len: usize,
}

/// Builds the objective for one sample. MLM masks each non-pad position
/// independently with probability `mask_rate` (replacing inputs by MASK,
/// forcing one uniform mask if none drew) — deterministic given `mask_seed`.
/// AR shifts targets by one over non-pad positions.
pub fn make_objective(
    sample: &Sample,
    config: &ModelConfig,
    mask_seed: u64,
) -> Result<ObjectiveInstance, ModelError> {
    let real_len = sample.real_len();
    if real_len == 0 {
        return Err(ModelError::AllPad);
    }
    match config.objective {
        Objective::Ar => {
            if real_len < 2 {
                return Err(ModelError::NoTargets);
            }
            let target_positions: Vec<usize> = (0..real_len - 1).collect();
            let target_tokens = target_positions
                .iter()
                .map(|&i| sample.tokens[i + 1])
                .collect();
            Ok(ObjectiveInstance {
                input_tokens: sample.tokens.clone(),
                target_positions,
                target_tokens,
                real_len,
            })
        }
        Objective::Mlm => {
            let mut rng = substream(mask_seed, "mlm-mask", 0, 0);
            let mut masked: Vec<usize> = (0..real_len)
                .filter(|_| rng.gen::<f64>() < config.mask_rate)
                .collect();
            if masked.is_empty() {
                masked.push(rng.gen_range(0..real_len));
            }
            let mut input_tokens = sample.tokens.clone();
            let target_tokens: Vec<u32> = masked.iter().map(|&i| sample.tokens[i]).collect();
            for &i in &masked {
                input_tokens[i] = MASK;
            }
            Ok(ObjectiveInstance {
                input_tokens,
                target_positions: masked,
                target_tokens,
                real_len,
            })
        }
    }
}

/// Forward outputs: logits, per-(layer, head) row-stochastic attention
/// matrices, and the cross-entropy loss over target positions.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `seq_len × vocab_size`, row-major.
    pub logits: Vec<f64>,
    /// Indexed `[layer * n_heads + head]`, each `seq_len × seq_len` row-major.
    pub attention: Vec<Vec<f64>>,
    /// Loss per target position, aligned with the instance's `target_positions`.
    pub per_position_loss: Vec<f64>,
    pub mean_loss: f64,
    pub real_len: usize,
}

// Per-layer activation cache for backprop.
struct LayerCache {
    ln1_xhat: Vec<f64>,
    ln1_rstd: Vec<f64>,
    ln1_out: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    att: Vec<Vec<f64>>, // per head, n×n
    concat: Vec<f64>,
    ln2_xhat: Vec<f64>,
    ln2_rstd: Vec<f64>,
    ln2_out: Vec<f64>,
    h_pre: Vec<f64>,
    h_act: Vec<f64>,
}

struct Cache {
    layers: Vec<LayerCache>,
    fin_xhat: Vec<f64>,
    fin_rstd: Vec<f64>,
    fin_out: Vec<f64>,
}

#[inline]
fn gelu(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    const A: f64 = 0.044715;
    0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh())
}

#[inline]
fn gelu_prime(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    const A: f64 = 0.044715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x)
}

/// out[i,j] = Σ_k a[i,k] b[k,j]; a is m×kk, b is kk×n.
fn mm(a: &[f64], m: usize, kk: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let ar = &a[i * kk..(i + 1) * kk];
        let or = &mut out[i * n..(i + 1) * n];
        for (k, &aik) in ar.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let br = &b[k * n..(k + 1) * n];
            for (o, &bkj) in or.iter_mut().zip(br) {
                *o += aik * bkj;
            }
        }
    }
    out
}

/// dX = dY · Wᵀ; dY is m×n, W is kk×n → result m×kk.
fn mm_bt(dy: &[f64], m: usize, n: usize, w: &[f64], kk: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * kk];
    for i in 0..m {
        let dyr = &dy[i * n..(i + 1) * n];
        let or = &mut out[i * kk..(i + 1) * kk];
        for (k, o) in or.iter_mut().enumerate() {
            let wr = &w[k * n..(k + 1) * n];
            *o = dyr.iter().zip(wr).map(|(a, b)| a * b).sum();
        }
    }
    out
}

/// gW += Xᵀ · dY; X is m×kk, dY is m×n, gW is kk×n.
fn acc_xt_y(gw: &mut [f64], x: &[f64], m: usize, kk: usize, dy: &[f64], n: usize) {
    for i in 0..m {
        let xr = &x[i * kk..(i + 1) * kk];
        let dyr = &dy[i * n..(i + 1) * n];
        for (k, &xik) in xr.iter().enumerate() {
            if xik == 0.0 {
                continue;
            }
            let gr = &mut gw[k * n..(k + 1) * n];
            for (g, &d) in gr.iter_mut().zip(dyr) {
                *g += xik * d;
            }
        }
    }
}

/// LayerNorm over the last axis for each of the m rows.
fn layer_norm(
    x: &[f64],
    m: usize,
    d: usize,
    g: &[f64],
    b: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; m * d];
    let mut xhat = vec![0.0; m * d];
    let mut rstd = vec![0.0; m];
    for i in 0..m {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[i] = rs;
        for j in 0..d {
            let xh = (row[j] - mean) * rs;
            xhat[i * d + j] = xh;
            out[i * d + j] = g[j] * xh + b[j];
        }
    }
    (out, xhat, rstd)
}

/// Backward of [`layer_norm`]; returns dx and accumulates dg/db.
#[allow(clippy::too_many_arguments)]
fn layer_norm_backward(
    dout: &[f64],
    xhat: &[f64],
    rstd: &[f64],
    m: usize,
    d: usize,
    g: &[f64],
    dg: &mut [f64],
    db: &mut [f64],
) -> Vec<f64> {
    let mut dx = vec![0.0; m * d];
    for i in 0..m {
        let dor = &dout[i * d..(i + 1) * d];
        let xhr = &xhat[i * d..(i + 1) * d];
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..d {
            dg[j] += dor[j] * xhr[j];
            db[j] += dor[j];
            let dxh = dor[j] * g[j];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xhr[j];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        for j in 0..d {
            let dxh = dor[j] * g[j];
            dx[i * d + j] = rstd[i] * (dxh - mean_dxhat - xhr[j] * mean_dxhat_xhat);
        }
    }
    dx
}

fn forward_internal(
    params: &ParameterSet,
    inst: &ObjectiveInstance,
    want_cache: bool,
) -> Result<(ForwardTrace, Option<Cache>), ModelError> {
    let cfg = &params.config;
    let n = cfg.seq_len;
    let d = cfg.model_dim;
    let h = cfg.n_heads;
    let dh = cfg.head_dim();
    let v = cfg.vocab_size;
    let scale = 1.0 / (dh as f64).sqrt();
    debug_assert_eq!(inst.input_tokens.len(), n);

    // Embedding + positional embedding.
    let emb = params.t(T_EMBED_TOK);
    let pos = params.t(T_EMBED_POS);
    let mut x = vec![0.0; n * d];
    for i in 0..n {
        let tok = inst.input_tokens[i] as usize;
        for j in 0..d {
            x[i * d + j] = emb[tok * d + j] + pos[i * d + j];
        }
    }
    let causal = cfg.objective == Objective::Ar;
    let key_is_pad: Vec<bool> = inst.input_tokens.iter().map(|&t| t == PAD).collect();

    let mut attention: Vec<Vec<f64>> = Vec::with_capacity(cfg.n_layers * h);
    let mut layer_caches: Vec<LayerCache> = Vec::new();

    for l in 0..cfg.n_layers {
        let base = layer_base(l);
        let (ln1_out, ln1_xhat, ln1_rstd) =
            layer_norm(&x, n, d, params.t(base + L_LN1_G), params.t(base + L_LN1_B));
        let q = mm(&ln1_out, n, d, params.t(base + L_WQ), d);
        let k = mm(&ln1_out, n, d, params.t(base + L_WK), d);
        let vv = mm(&ln1_out, n, d, params.t(base + L_WV), d);

        let mut concat = vec![0.0; n * d];
        let mut att_heads: Vec<Vec<f64>> = Vec::with_capacity(h);
        for hh in 0..h {
            let off = hh * dh;
            let mut att = vec![0.0; n * n];
            for i in 0..n {
                // scores with additive masks
                let mut row = vec![f64::NEG_INFINITY; n];
                let qi = &q[i * d + off..i * d + off + dh];
                for j in 0..n {
                    if key_is_pad[j] || (causal && j > i) {
                        continue;
                    }
                    let kj = &k[j * d + off..j * d + off + dh];
                    row[j] = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                }
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    return Err(ModelError::NonFinite("attention row fully masked"));
                }
                let mut sum = 0.0;
                for j in 0..n {
                    let e = (row[j] - max).exp();
                    att[i * n + j] = e;
                    sum += e;
                }
                for j in 0..n {
                    att[i * n + j] /= sum;
                }
                // headout row
                let mut acc = vec![0.0; dh];
                for j in 0..n {
                    let a = att[i * n + j];
                    if a == 0.0 {
                        continue;
                    }
                    let vj = &vv[j * d + off..j * d + off + dh];
                    for (t, &vjt) in acc.iter_mut().zip(vj) {
                        *t += a * vjt;
                    }
                }
                concat[i * d + off..i * d + off + dh].copy_from_slice(&acc);
            }
            att_heads.push(att);
        }
        let attn_out = mm(&concat, n, d, params.t(base + L_WO), d);
        let mut x_mid = x.clone();
        for (a, b) in x_mid.iter_mut().zip(&attn_out) {
            *a += b;
        }

        let (ln2_out, ln2_xhat, ln2_rstd) = layer_norm(
            &x_mid,
            n,
            d,
            params.t(base + L_LN2_G),
            params.t(base + L_LN2_B),
        );
        let mut h_pre = mm(&ln2_out, n, d, params.t(base + L_FF_W1), cfg.ff_dim);
        let b1 = params.t(base + L_FF_B1);
        for i in 0..n {
            for j in 0..cfg.ff_dim {
                h_pre[i * cfg.ff_dim + j] += b1[j];
            }
        }
        let h_act: Vec<f64> = h_pre.iter().map(|&z| gelu(z)).collect();
        let mut ff_out = mm(&h_act, n, cfg.ff_dim, params.t(base + L_FF_W2), d);
        let b2 = params.t(base + L_FF_B2);
        for i in 0..n {
            for j in 0..d {
                ff_out[i * d + j] += b2[j];
            }
        }
        let mut x_out = x_mid.clone();
        for (a, b) in x_out.iter_mut().zip(&ff_out) {
            *a += b;
        }

        for att in &att_heads {
            attention.push(att.clone());
        }
        if want_cache {
            layer_caches.push(LayerCache {
                ln1_xhat,
                ln1_rstd,
                ln1_out,
                q,
                k,
                v: vv,
                att: att_heads,
                concat,
                ln2_xhat,
                ln2_rstd,
                ln2_out,
                h_pre,
                h_act,
            });
        }
        x = x_out;
    }

    let tail = layer_base(cfg.n_layers);
    let (fin_out, fin_xhat, fin_rstd) = layer_norm(&x, n, d, params.t(tail), params.t(tail + 1));
    let mut logits = mm(&fin_out, n, d, params.t(tail + 2), v);
    let hb = params.t(tail + 3);
    for i in 0..n {
        for j in 0..v {
            logits[i * v + j] += hb[j];
        }
    }

    // Mean natural-log cross-entropy over target positions.
    let mut per_position_loss = Vec::with_capacity(inst.target_positions.len());
    if inst.target_positions.is_empty() {
        return Err(ModelError::NoTargets);
    }
    for (&pos_i, &tok) in inst.target_positions.iter().zip(&inst.target_tokens) {
        let row = &logits[pos_i * v..(pos_i + 1) * v];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
        per_position_loss.push(lse - row[tok as usize]);
    }
    let mean_loss = per_position_loss.iter().sum::<f64>() / per_position_loss.len() as f64;
    if !mean_loss.is_finite() {
        return Err(ModelError::NonFinite("loss"));
    }

    let trace = ForwardTrace {
        logits,
        attention,
        per_position_loss,
        mean_loss,
        real_len: inst.real_len,
    };
    let cache = if want_cache {
        Some(Cache {
            layers: layer_caches,
            fin_xhat,
            fin_rstd,
            fin_out,
        })
    } else {
        None
    };
    Ok((trace, cache))
}

/// Forward pass; exposes logits, attention matrices and the loss.
pub fn forward(
    params: &ParameterSet,
    inst: &ObjectiveInstance,
) -> Result<ForwardTrace, ModelError> {
    forward_internal(params, inst, false).map(|(t, _)| t)
}

/// Exact gradients of the mean loss with respect to every parameter tensor.
pub fn backward(
    params: &ParameterSet,
    inst: &ObjectiveInstance,
) -> Result<(f64, GradientSet), ModelError> {
    let (trace, grads) = backward_traced(params, inst)?;
    Ok((trace.mean_loss, grads))
}

/// Like [`backward`], but also returns the full forward trace, so callers
/// needing loss, attention, and gradients pay for a single pass.
pub fn backward_traced(
    params: &ParameterSet,
    inst: &ObjectiveInstance,
) -> Result<(ForwardTrace, GradientSet), ModelError> {
    let cfg = &params.config;
    let n = cfg.seq_len;
    let d = cfg.model_dim;
    let h = cfg.n_heads;
    let dh = cfg.head_dim();
    let v = cfg.vocab_size;
    let scale = 1.0 / (dh as f64).sqrt();

    let (trace, cache) = forward_internal(params, inst, true)?;
    let cache = cache.expect("cache requested");
    let mut grads = ParameterSet::zeros(cfg);

    // dL/dlogits: nonzero only at target rows.
    let n_targets = inst.target_positions.len() as f64;
    let mut dlogits = vec![0.0; n * v];
    for (&pos_i, &tok) in inst.target_positions.iter().zip(&inst.target_tokens) {
        let row = &trace.logits[pos_i * v..(pos_i + 1) * v];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&z| (z - max).exp()).sum();
        let drow = &mut dlogits[pos_i * v..(pos_i + 1) * v];
        for j in 0..v {
            drow[j] = ((row[j] - max).exp() / sum) / n_targets;
        }
        drow[tok as usize] -= 1.0 / n_targets;
    }

    let tail = layer_base(cfg.n_layers);
    // Head projection.
    acc_xt_y(grads.tm(tail + 2), &cache.fin_out, n, d, &dlogits, v);
    {
        let gb = grads.tm(tail + 3);
        for i in 0..n {
            for j in 0..v {
                gb[j] += dlogits[i * v + j];
            }
        }
    }
    let dfin_out = mm_bt(&dlogits, n, v, params.t(tail + 2), d);

    // Final LayerNorm.
    let g_fin = params.t(tail).to_vec();
    let mut dg_fin = vec![0.0; d];
    let mut db_fin = vec![0.0; d];
    let mut dx = layer_norm_backward(
        &dfin_out,
        &cache.fin_xhat,
        &cache.fin_rstd,
        n,
        d,
        &g_fin,
        &mut dg_fin,
        &mut db_fin,
    );
    grads.tm(tail).copy_from_slice(&dg_fin);
    grads.tm(tail + 1).copy_from_slice(&db_fin);

    for l in (0..cfg.n_layers).rev() {
        let base = layer_base(l);
        let lc = &cache.layers[l];

        // x_out = x_mid + ff_out; dx carries dL/dx_out.
        // Feed-forward branch.
        let dff_out = dx.clone();
        {
            let gb2 = grads.tm(base + L_FF_B2);
            for i in 0..n {
                for j in 0..d {
                    gb2[j] += dff_out[i * d + j];
                }
            }
        }
        acc_xt_y(
            grads.tm(base + L_FF_W2),
            &lc.h_act,
            n,
            cfg.ff_dim,
            &dff_out,
            d,
        );
        let dh_act = mm_bt(&dff_out, n, d, params.t(base + L_FF_W2), cfg.ff_dim);
        let mut dh_pre = dh_act;
        for (z, &pre) in dh_pre.iter_mut().zip(&lc.h_pre) {
            *z *= gelu_prime(pre);
        }
        {
            let gb1 = grads.tm(base + L_FF_B1);
            for i in 0..n {
                for j in 0..cfg.ff_dim {
                    gb1[j] += dh_pre[i * cfg.ff_dim + j];
                }
            }
        }
        acc_xt_y(
            grads.tm(base + L_FF_W1),
            &lc.ln2_out,
            n,
            d,
            &dh_pre,
            cfg.ff_dim,
        );
        let dln2_out = mm_bt(&dh_pre, n, cfg.ff_dim, params.t(base + L_FF_W1), d);

        let g_ln2 = params.t(base + L_LN2_G).to_vec();
        let mut dg2 = vec![0.0; d];
        let mut db2v = vec![0.0; d];
        let dx_mid_ff = layer_norm_backward(
            &dln2_out,
            &lc.ln2_xhat,
            &lc.ln2_rstd,
            n,
            d,
            &g_ln2,
            &mut dg2,
            &mut db2v,
        );
        grads.tm(base + L_LN2_G).copy_from_slice(&dg2);
        grads.tm(base + L_LN2_B).copy_from_slice(&db2v);

        // dL/dx_mid = residual + FF path.
        let mut dx_mid = dx;
        for (a, b) in dx_mid.iter_mut().zip(&dx_mid_ff) {
            *a += b;
        }

        // Attention branch: x_mid = x_in + concat·Wo.
        let dattn_out = dx_mid.clone();
        acc_xt_y(grads.tm(base + L_WO), &lc.concat, n, d, &dattn_out, d);
        let dconcat = mm_bt(&dattn_out, n, d, params.t(base + L_WO), d);

        let mut dq = vec![0.0; n * d];
        let mut dk = vec![0.0; n * d];
        let mut dv = vec![0.0; n * d];
        for hh in 0..h {
            let off = hh * dh;
            let att = &lc.att[hh];
            for i in 0..n {
                let dho = &dconcat[i * d + off..i * d + off + dh];
                // datt over keys, then softmax backward within the row.
                let mut datt = vec![0.0; n];
                for j in 0..n {
                    let a = att[i * n + j];
                    if a == 0.0 {
                        continue;
                    }
                    let vj = &lc.v[j * d + off..j * d + off + dh];
                    datt[j] = dho.iter().zip(vj).map(|(x, y)| x * y).sum();
                    // dv accumulation
                    let dvj = &mut dv[j * d + off..j * d + off + dh];
                    for (t, &x) in dvj.iter_mut().zip(dho) {
                        *t += a * x;
                    }
                }
                let inner: f64 = (0..n).map(|j| datt[j] * att[i * n + j]).sum();
                let qi: Vec<f64> = lc.q[i * d + off..i * d + off + dh].to_vec();
                for j in 0..n {
                    let a = att[i * n + j];
                    if a == 0.0 {
                        continue;
                    }
                    let ds = a * (datt[j] - inner) * scale;
                    let kj = &lc.k[j * d + off..j * d + off + dh];
                    let dqi = &mut dq[i * d + off..i * d + off + dh];
                    for (t, &kjt) in dqi.iter_mut().zip(kj) {
                        *t += ds * kjt;
                    }
                    let dkj = &mut dk[j * d + off..j * d + off + dh];
                    for (t, &qit) in dkj.iter_mut().zip(&qi) {
                        *t += ds * qit;
                    }
                }
            }
        }

        acc_xt_y(grads.tm(base + L_WQ), &lc.ln1_out, n, d, &dq, d);
        acc_xt_y(grads.tm(base + L_WK), &lc.ln1_out, n, d, &dk, d);
        acc_xt_y(grads.tm(base + L_WV), &lc.ln1_out, n, d, &dv, d);
        let mut dln1_out = mm_bt(&dq, n, d, params.t(base + L_WQ), d);
        let dk_in = mm_bt(&dk, n, d, params.t(base + L_WK), d);
        let dv_in = mm_bt(&dv, n, d, params.t(base + L_WV), d);
        for ((a, b), c) in dln1_out.iter_mut().zip(&dk_in).zip(&dv_in) {
            *a += b + c;
        }

        let g_ln1 = params.t(base + L_LN1_G).to_vec();
        let mut dg1 = vec![0.0; d];
        let mut db1v = vec![0.0; d];
        let dx_in_attn = layer_norm_backward(
            &dln1_out,
            &lc.ln1_xhat,
            &lc.ln1_rstd,
            n,
            d,
            &g_ln1,
            &mut dg1,
            &mut db1v,
        );
        grads.tm(base + L_LN1_G).copy_from_slice(&dg1);
        grads.tm(base + L_LN1_B).copy_from_slice(&db1v);

        // dL/dx_in = residual + attention path.
        dx = dx_mid;
        for (a, b) in dx.iter_mut().zip(&dx_in_attn) {
            *a += b;
        }
    }

    // Embeddings.
    {
        let g_emb = grads.tm(T_EMBED_TOK);
        for i in 0..n {
            let tok = inst.input_tokens[i] as usize;
            for j in 0..d {
                g_emb[tok * d + j] += dx[i * d + j];
            }
        }
    }
    {
        let g_pos = grads.tm(T_EMBED_POS);
        for i in 0..n {
            for j in 0..d {
                g_pos[i * d + j] += dx[i * d + j];
            }
        }
    }

    Ok((trace, grads))
}

/// Forward-only per-sample loss e(x) under a fresh objective draw.
pub fn sample_error(
    params: &ParameterSet,
    sample: &Sample,
    objective_seed: u64,
) -> Result<f64, ModelError> {
    let inst = make_objective(sample, &params.config, objective_seed)?;
    Ok(forward(params, &inst)?.mean_loss)
}

// ---------------------------------------------------------------------------
// Checkpoint format: JSON manifest + little-endian f32 blob.

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: [usize; 2],
    pub offset_bytes: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub config: ModelConfig,
    pub dtype: String,
    pub tensors: Vec<TensorRecord>,
    /// Human-readable provenance of the seeds that produced these weights.
    pub seed_lineage: String,
}

/// Writes `checkpoint.json` and `checkpoint.bin` into `dir`. Values are
/// stored as little-endian f32; save → load → save is byte-identical.
pub fn save_checkpoint(
    params: &ParameterSet,
    dir: &Path,
    seed_lineage: &str,
) -> Result<(), ModelError> {
    fs::create_dir_all(dir)?;
    let mut records = Vec::with_capacity(params.tensors.len());
    let mut blob: Vec<u8> = Vec::new();
    for t in &params.tensors {
        records.push(TensorRecord {
            name: t.name.clone(),
            shape: [t.rows, t.cols],
            offset_bytes: blob.len(),
            len: t.data.len(),
        });
        for &x in &t.data {
            blob.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        config: params.config,
        dtype: "f32".to_string(),
        tensors: records,
        seed_lineage: seed_lineage.to_string(),
    };
    let json =
        serde_json::to_string_pretty(&manifest).map_err(|e| ModelError::Manifest(e.to_string()))?;
    fs::write(dir.join("checkpoint.json"), json)?;
    fs::write(dir.join("checkpoint.bin"), blob)?;
    Ok(())
}

/// Loads a checkpoint directory written by [`save_checkpoint`].
pub fn load_checkpoint(dir: &Path) -> Result<(ParameterSet, CheckpointManifest), ModelError> {
    let manifest: CheckpointManifest =
        serde_json::from_str(&fs::read_to_string(dir.join("checkpoint.json"))?)
            .map_err(|e| ModelError::Manifest(e.to_string()))?;
    if manifest.dtype != "f32" {
        return Err(ModelError::Manifest(format!(
            "unsupported dtype {:?}",
            manifest.dtype
        )));
    }
    let blob = fs::read(dir.join("checkpoint.bin"))?;
    let mut params = ParameterSet::zeros(&manifest.config);
    if manifest.tensors.len() != params.tensors.len() {
        return Err(ModelError::Manifest(
            "tensor inventory mismatch with config".to_string(),
        ));
    }
    for (rec, t) in manifest.tensors.iter().zip(params.tensors.iter_mut()) {
        if rec.name != t.name || rec.shape != [t.rows, t.cols] || rec.len != t.data.len() {
            return Err(ModelError::Manifest(format!(
                "tensor {} shape/order mismatch",
                rec.name
            )));
        }
        let start = rec.offset_bytes;
        let end = start + rec.len * 4;
        if end > blob.len() {
            return Err(ModelError::Manifest(format!(
                "blob too short for tensor {}",
                rec.name
            )));
        }
        for (i, chunk) in blob[start..end].chunks_exact(4).enumerate() {
            t.data[i] = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
        }
    }
    Ok((params, manifest))
}
