//! The forecaster's attention stacks. Three variants share one token layout
//! (`batch × tokens × width`, channels folded into the batch):
//!
//! * `samovar_forward` — linear attention whose queries and values are
//!   RMS-normalized projections of the *first-layer* input, whose keys are the
//!   raw layer input (identity key projection), and whose per-head outputs
//!   are mixed by a shared learned inverse matrix `D⁻¹` before joining the
//!   residual accumulator. Layer ℓ+1 consumes layer ℓ's pre-mix output, so
//!   the whole stack stays an explicit dynamic VAR over the first-layer
//!   signal — the reconstruction in the interpretability module recovers its
//!   weights exactly.
//! * `lintrans_forward` — a classic pre-norm linear Transformer block stack.
//! * `fixedvar_forward` — one attention-shaped layer whose queries and keys
//!   come from trainable per-position tables (data-independent weights).
//!
//! `mlp_front` is the shared position-wise front block producing the VAR
//! observation signal, and `build_d_inverse` derives `D` and `D⁻¹` from a
//! packed LU parameterization with gradients flowing through the solves.

use rand::Rng;
use serde::{Deserialize, Serialize};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{Scalar, Tensor, TensorError};
#[cfg(test)]
use crate::autodiff::Graph;
use crate::params::{normal_init, ones, zeros, Bound, ParamError, ParamVault};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("{0}")]
    Invalid(String),
    #[error("mixing matrix ill-conditioned: softplus diagonal entry {value:.3e} below 1e-8")]
    Conditioning { value: f64 },
    #[error("sequence of {got} tokens exceeds the {table} position slots of the fixed tables")]
    PositionOverflow { got: usize, table: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Param(#[from] ParamError),
}

type Result<T> = std::result::Result<T, ModelError>;

/// Epsilon for every RMS normalization site in the stack.
pub const NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Samovar,
    LinTrans,
    FixedVar,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Samovar => "samovar",
            Variant::LinTrans => "lintrans",
            Variant::FixedVar => "fixedvar",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct StackConfig {
    pub variant: Variant,
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub dropout: f64,
    /// Ablation: learned key projection per layer instead of identity keys.
    pub use_wk: bool,
    /// Ablation: per-head output mixing by `D⁻¹` (off = identity mixing).
    pub use_dinv: bool,
    /// Ablation: RMS normalization of queries and values.
    pub qv_norm: bool,
    /// Capacity of the fixed-variant position tables.
    pub max_positions: usize,
}

/// Hidden width rule: `32·⌊√C⌋`.
pub fn model_dim_for(channels: usize) -> usize {
    32 * (channels as f64).sqrt().floor() as usize
}

impl Default for StackConfig {
    fn default() -> Self {
        StackConfig::for_variant(Variant::Samovar, 2)
    }
}

/// Default head count rule: 16-wide heads for the VAR variant, 8 heads
/// otherwise.
pub fn default_heads(variant: Variant, model_dim: usize) -> usize {
    match variant {
        Variant::Samovar => (model_dim / 16).max(1),
        _ => 8,
    }
}

impl StackConfig {
    /// Defaults for a channel count: width `32·⌊√C⌋`; 16-wide heads for the
    /// VAR variant, 8 heads otherwise.
    pub fn for_variant(variant: Variant, channels: usize) -> Self {
        let model_dim = model_dim_for(channels);
        let heads = default_heads(variant, model_dim);
        StackConfig {
            variant,
            layers: 3,
            model_dim,
            heads,
            dropout: 0.1,
            use_wk: false,
            use_dinv: true,
            qv_norm: true,
            max_positions: 512,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.heads == 0 || self.layers == 0 {
            return Err(ModelError::Invalid("layers, width, heads must be positive".into()));
        }
        if self.model_dim % self.heads != 0 {
            return Err(ModelError::Invalid(format!(
                "width {} not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Invalid(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Dropout context threaded through forwards: `Eval` disables all masks.
pub enum Mode<'a> {
    Eval,
    Train { p: f64, rng: &'a mut ChaCha8Rng },
}

fn apply_dropout<S: Scalar>(y: &Tensor<S>, mode: &mut Mode) -> Result<Tensor<S>> {
    match mode {
        Mode::Eval => Ok(y.clone()),
        Mode::Train { p, rng } => Ok(y.dropout(*p, rng)?),
    }
}

// ---------------------------------------------------------------------------
// Parameter registration and binding
// ---------------------------------------------------------------------------

pub struct MlpBlockW<S: Scalar> {
    pub norm: Tensor<S>,
    pub w1: Tensor<S>,
    pub b1: Tensor<S>,
    pub w2: Tensor<S>,
    pub b2: Tensor<S>,
}

pub struct FrontWeights<S: Scalar> {
    pub blocks: Vec<MlpBlockW<S>>,
    pub final_norm: Tensor<S>,
}

pub struct SamovarLayerW<S: Scalar> {
    pub w_q: Tensor<S>,
    pub w_v: Tensor<S>,
    pub w_k: Option<Tensor<S>>,
    pub q_gain: Option<Tensor<S>>,
    pub v_gain: Option<Tensor<S>>,
}

pub struct DFactorsW<S: Scalar> {
    pub l_lower: Tensor<S>,
    pub u_diag: Tensor<S>,
    pub u_upper: Tensor<S>,
}

pub struct SamovarWeights<S: Scalar> {
    pub front: FrontWeights<S>,
    pub layers: Vec<SamovarLayerW<S>>,
    pub d_factors: Option<DFactorsW<S>>,
    pub out_norm: Tensor<S>,
}

pub struct LinTransBlockW<S: Scalar> {
    pub attn_norm: Tensor<S>,
    pub w_q: Tensor<S>,
    pub w_k: Tensor<S>,
    pub w_v: Tensor<S>,
    pub w_o: Tensor<S>,
    pub mlp: MlpBlockW<S>,
}

pub struct LinTransWeights<S: Scalar> {
    pub blocks: Vec<LinTransBlockW<S>>,
    pub out_norm: Tensor<S>,
}

pub struct FixedVarWeights<S: Scalar> {
    pub front: FrontWeights<S>,
    pub q_table: Tensor<S>,
    pub k_table: Tensor<S>,
    pub w_v: Tensor<S>,
    pub v_gain: Option<Tensor<S>>,
    pub w_o: Tensor<S>,
    pub out_norm: Tensor<S>,
}

fn register_mlp_block<S: Scalar>(
    vault: &mut ParamVault<S>,
    rng: &mut impl Rng,
    prefix: &str,
    d: usize,
    depth_scale: f64,
) -> std::result::Result<(), ParamError> {
    let hidden = 4 * d;
    vault.register(&format!("{prefix}.norm"), &[d], ones(d))?;
    vault.register(&format!("{prefix}.w1"), &[d, hidden], normal_init(rng, d * hidden, 0.02))?;
    vault.register(&format!("{prefix}.b1"), &[hidden], zeros(hidden))?;
    vault.register(
        &format!("{prefix}.w2"),
        &[hidden, d],
        normal_init(rng, hidden * d, 0.02 * depth_scale),
    )?;
    vault.register(&format!("{prefix}.b2"), &[d], zeros(d))?;
    Ok(())
}

fn register_front<S: Scalar>(
    vault: &mut ParamVault<S>,
    rng: &mut impl Rng,
    cfg: &StackConfig,
) -> std::result::Result<(), ParamError> {
    let scale = 1.0 / (cfg.layers as f64).sqrt();
    for i in 0..cfg.layers {
        register_mlp_block(vault, rng, &format!("front.{i}"), cfg.model_dim, scale)?;
    }
    vault.register("front.norm", &[cfg.model_dim], ones(cfg.model_dim))
}

/// Register every stack parameter for the configured variant (tokenizer
/// weights are registered separately and checkpointed together).
pub fn register_stack<S: Scalar>(
    vault: &mut ParamVault<S>,
    rng: &mut impl Rng,
    cfg: &StackConfig,
) -> Result<()> {
    cfg.validate()?;
    let d = cfg.model_dim;
    let dh = cfg.head_dim();
    let tri = dh * (dh - 1) / 2;
    match cfg.variant {
        Variant::Samovar => {
            register_front(vault, rng, cfg)?;
            for l in 0..cfg.layers {
                vault.register(&format!("attn.{l}.w_q"), &[d, d], normal_init(rng, d * d, 0.02))?;
                vault.register(&format!("attn.{l}.w_v"), &[d, d], normal_init(rng, d * d, 0.02))?;
                if cfg.use_wk {
                    vault.register(&format!("attn.{l}.w_k"), &[d, d], normal_init(rng, d * d, 0.02))?;
                }
                if cfg.qv_norm {
                    vault.register(&format!("attn.{l}.q_gain"), &[dh], ones(dh))?;
                    vault.register(&format!("attn.{l}.v_gain"), &[dh], ones(dh))?;
                }
            }
            if cfg.use_dinv {
                vault.register("dinv.l_lower", &[cfg.heads, tri], normal_init(rng, cfg.heads * tri, 0.02))?;
                vault.register("dinv.u_diag", &[cfg.heads, dh], normal_init(rng, cfg.heads * dh, 0.02))?;
                vault.register("dinv.u_upper", &[cfg.heads, tri], normal_init(rng, cfg.heads * tri, 0.02))?;
            }
        }
        Variant::LinTrans => {
            let scale = 1.0 / (cfg.layers as f64).sqrt();
            for l in 0..cfg.layers {
                vault.register(&format!("blk.{l}.attn_norm"), &[d], ones(d))?;
                for name in ["w_q", "w_k", "w_v", "w_o"] {
                    vault.register(&format!("blk.{l}.{name}"), &[d, d], normal_init(rng, d * d, 0.02))?;
                }
                register_mlp_block(vault, rng, &format!("blk.{l}.mlp"), d, scale)?;
            }
        }
        Variant::FixedVar => {
            register_front(vault, rng, cfg)?;
            let m = cfg.max_positions;
            vault.register("fixed.q_table", &[m, d], normal_init(rng, m * d, 0.02))?;
            vault.register("fixed.k_table", &[m, d], normal_init(rng, m * d, 0.02))?;
            vault.register("fixed.w_v", &[d, d], normal_init(rng, d * d, 0.02))?;
            if cfg.qv_norm {
                vault.register("fixed.v_gain", &[dh], ones(dh))?;
            }
            vault.register("fixed.w_o", &[d, d], normal_init(rng, d * d, 0.02))?;
        }
    }
    vault.register("out.norm", &[d], ones(d))?;
    Ok(())
}

fn bind_mlp_block<S: Scalar>(bound: &Bound<S>, prefix: &str) -> std::result::Result<MlpBlockW<S>, ParamError> {
    Ok(MlpBlockW {
        norm: bound.get(&format!("{prefix}.norm"))?,
        w1: bound.get(&format!("{prefix}.w1"))?,
        b1: bound.get(&format!("{prefix}.b1"))?,
        w2: bound.get(&format!("{prefix}.w2"))?,
        b2: bound.get(&format!("{prefix}.b2"))?,
    })
}

fn bind_front<S: Scalar>(bound: &Bound<S>, cfg: &StackConfig) -> std::result::Result<FrontWeights<S>, ParamError> {
    let blocks = (0..cfg.layers)
        .map(|i| bind_mlp_block(bound, &format!("front.{i}")))
        .collect::<std::result::Result<_, _>>()?;
    Ok(FrontWeights { blocks, final_norm: bound.get("front.norm")? })
}

pub fn bind_samovar<S: Scalar>(bound: &Bound<S>, cfg: &StackConfig) -> Result<SamovarWeights<S>> {
    let layers = (0..cfg.layers)
        .map(|l| {
            Ok(SamovarLayerW {
                w_q: bound.get(&format!("attn.{l}.w_q"))?,
                w_v: bound.get(&format!("attn.{l}.w_v"))?,
                w_k: cfg.use_wk.then(|| bound.get(&format!("attn.{l}.w_k"))).transpose()?,
                q_gain: cfg.qv_norm.then(|| bound.get(&format!("attn.{l}.q_gain"))).transpose()?,
                v_gain: cfg.qv_norm.then(|| bound.get(&format!("attn.{l}.v_gain"))).transpose()?,
            })
        })
        .collect::<Result<_>>()?;
    let d_factors = if cfg.use_dinv {
        Some(DFactorsW {
            l_lower: bound.get("dinv.l_lower")?,
            u_diag: bound.get("dinv.u_diag")?,
            u_upper: bound.get("dinv.u_upper")?,
        })
    } else {
        None
    };
    Ok(SamovarWeights {
        front: bind_front(bound, cfg)?,
        layers,
        d_factors,
        out_norm: bound.get("out.norm")?,
    })
}

pub fn bind_lintrans<S: Scalar>(bound: &Bound<S>, cfg: &StackConfig) -> Result<LinTransWeights<S>> {
    let blocks = (0..cfg.layers)
        .map(|l| {
            Ok(LinTransBlockW {
                attn_norm: bound.get(&format!("blk.{l}.attn_norm"))?,
                w_q: bound.get(&format!("blk.{l}.w_q"))?,
                w_k: bound.get(&format!("blk.{l}.w_k"))?,
                w_v: bound.get(&format!("blk.{l}.w_v"))?,
                w_o: bound.get(&format!("blk.{l}.w_o"))?,
                mlp: bind_mlp_block(bound, &format!("blk.{l}.mlp"))?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(LinTransWeights { blocks, out_norm: bound.get("out.norm")? })
}

pub fn bind_fixedvar<S: Scalar>(bound: &Bound<S>, cfg: &StackConfig) -> Result<FixedVarWeights<S>> {
    Ok(FixedVarWeights {
        front: bind_front(bound, cfg)?,
        q_table: bound.get("fixed.q_table")?,
        k_table: bound.get("fixed.k_table")?,
        w_v: bound.get("fixed.w_v")?,
        v_gain: cfg.qv_norm.then(|| bound.get("fixed.v_gain")).transpose()?,
        w_o: bound.get("fixed.w_o")?,
        out_norm: bound.get("out.norm")?,
    })
}

// ---------------------------------------------------------------------------
// Shared pieces
// ---------------------------------------------------------------------------

fn mlp_apply<S: Scalar>(x: &Tensor<S>, blk: &MlpBlockW<S>, mode: &mut Mode) -> Result<Tensor<S>> {
    let h = x
        .rms_norm(&blk.norm, S::from_f64(NORM_EPS))?
        .matmul(&blk.w1)?
        .add(&blk.b1)?
        .gelu()?
        .matmul(&blk.w2)?
        .add(&blk.b2)?;
    apply_dropout(&h, mode)
}

/// Position-wise front block: residual MLP blocks then a final normalization.
/// Its output is the first attention layer's key input — the signal the
/// recovered VAR weights act on.
pub fn mlp_front<S: Scalar>(x: &Tensor<S>, w: &FrontWeights<S>, mode: &mut Mode) -> Result<Tensor<S>> {
    let mut cur = x.clone();
    for blk in &w.blocks {
        cur = cur.add(&mlp_apply(&cur, blk, mode)?)?;
    }
    Ok(cur.rms_norm(&w.final_norm, S::from_f64(NORM_EPS))?)
}

/// `[B, T, D] → [B, T, H, dh]` head split (contiguous slices per head).
fn split_heads<S: Scalar>(x: &Tensor<S>, heads: usize) -> Result<Tensor<S>> {
    let s = x.shape();
    Ok(x.reshape(&[s[0], s[1], heads, s[2] / heads])?)
}

/// Causal linear attention: `y_t = q_t · Σ_{i≤t} kᵢᵀ⊗vᵢ` per head, as a
/// cumulative sum of outer products. Shapes `[B, T, H, dh]`.
fn fast_weight_attention<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
) -> Result<Tensor<S>> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    let (t, h, dh) = (qs[1], qs[2], qs[3]);
    let kv = k
        .reshape(&[ks[0], t, h, dh, 1])?
        .matmul(&v.reshape(&[vs[0], t, h, 1, dh])?)?; // outer products, batch broadcasts
    let state = kv.cumsum(1)?;
    let y = q.reshape(&[qs[0], t, h, 1, dh])?.matmul(&state)?;
    let b = y.shape()[0];
    Ok(y.reshape(&[b, t, h, dh])?)
}

/// Mix each head's output stream by its own `[dh, dh]` matrix.
fn mix_heads<S: Scalar>(y: &Tensor<S>, per_head: &Tensor<S>) -> Result<Tensor<S>> {
    // [B,T,H,dh] → [B,H,T,dh] @ [H,dh,dh] → back
    Ok(y.permute(&[0, 2, 1, 3])?.matmul(per_head)?.permute(&[0, 2, 1, 3])?)
}

/// Derived structural matrices: `D = L·U` per head and its inverse.
pub struct DMatrices<S: Scalar> {
    /// `[H, dh, dh]`
    pub d: Tensor<S>,
    /// `[H, dh, dh]`
    pub d_inv: Tensor<S>,
}

/// Assemble `D = L·U` per head from packed factors — `L` unit-lower
/// triangular, `U` upper triangular with softplus-activated diagonal — and
/// invert it by two triangular solves against the identity, keeping the whole
/// construction differentiable.
pub fn build_d_inverse<S: Scalar>(f: &DFactorsW<S>, heads: usize, dh: usize) -> Result<DMatrices<S>> {
    let tri = dh * (dh - 1) / 2;
    if f.l_lower.shape() != [heads, tri] || f.u_diag.shape() != [heads, dh] || f.u_upper.shape() != [heads, tri] {
        return Err(ModelError::Invalid(format!(
            "packed factor shapes {:?}/{:?}/{:?} do not fit {heads} heads of width {dh}",
            f.l_lower.shape(),
            f.u_diag.shape(),
            f.u_upper.shape()
        )));
    }
    let g = f.l_lower.graph();
    let mut lower_pos = Vec::with_capacity(heads * tri);
    let mut upper_pos = Vec::with_capacity(heads * tri);
    let mut diag_pos = Vec::with_capacity(heads * dh);
    for h in 0..heads {
        let base = h * dh * dh;
        for i in 0..dh {
            diag_pos.push(base + i * dh + i);
            for j in 0..i {
                lower_pos.push(base + i * dh + j);
                upper_pos.push(base + j * dh + i);
            }
        }
    }
    let eye = g.eye(dh)?;
    let l = f.l_lower.embed(&[heads, dh, dh], &lower_pos)?.add(&eye)?;
    let diag_act = f.u_diag.softplus()?;
    if let Some(bad) = diag_act.value().iter().copied().find(|v| Scalar::to_f64(*v) < 1e-8) {
        return Err(ModelError::Conditioning { value: Scalar::to_f64(bad) });
    }
    let u = f
        .u_upper
        .embed(&[heads, dh, dh], &upper_pos)?
        .add(&diag_act.embed(&[heads, dh, dh], &diag_pos)?)?;
    let d = l.matmul(&u)?;
    // D⁻¹ = U⁻¹ (L⁻¹ I): forward-substitute through L, back-substitute through U
    let z = l.tri_solve(&eye, true, true)?;
    let d_inv = u.tri_solve(&z, false, false)?;
    Ok(DMatrices { d, d_inv })
}

// ---------------------------------------------------------------------------
// Variant forwards
// ---------------------------------------------------------------------------

/// The VAR-structured stack. `x1` is the front block's output `[B, T, D]`.
/// Queries/values always project `x1`; keys are each layer's input stream,
/// which is the previous layer's pre-mix output. Per-head mixing by `D⁻¹`
/// applies only to what joins the residual accumulator.
pub fn samovar_forward<S: Scalar>(
    x1: &Tensor<S>,
    w: &SamovarWeights<S>,
    cfg: &StackConfig,
    mode: &mut Mode,
) -> Result<Tensor<S>> {
    let s = x1.shape();
    if s.len() != 3 || s[2] != cfg.model_dim {
        return Err(ModelError::Invalid(format!("expected [batch, tokens, {}], got {s:?}", cfg.model_dim)));
    }
    let eps = S::from_f64(NORM_EPS);
    let d_inv = match &w.d_factors {
        Some(f) => Some(build_d_inverse(f, cfg.heads, cfg.head_dim())?.d_inv),
        None => None,
    };
    let mut x_tilde = x1.clone();
    let mut x = x1.clone();
    for layer in &w.layers {
        let mut q = split_heads(&x1.matmul(&layer.w_q)?, cfg.heads)?;
        let mut v = split_heads(&x1.matmul(&layer.w_v)?, cfg.heads)?;
        if let (Some(qg), Some(vg)) = (&layer.q_gain, &layer.v_gain) {
            q = q.rms_norm(qg, eps)?;
            v = v.rms_norm(vg, eps)?;
        }
        let k_src = match &layer.w_k {
            Some(w_k) => x.matmul(w_k)?,
            None => x.clone(),
        };
        let k = split_heads(&k_src, cfg.heads)?;
        let y = fast_weight_attention(&q, &k, &v)?;
        let y = apply_dropout(&y, mode)?;
        let contribution = match &d_inv {
            Some(m) => mix_heads(&y, m)?,
            None => y.clone(),
        };
        x_tilde = x_tilde.add(&contribution.reshape(&s)?)?;
        x = y.reshape(&s)?;
    }
    Ok(x_tilde)
}

/// Classic pre-norm linear Transformer: per block,
/// `X += W_o·Attn(norm(X))` then `X += MLP(norm(X))`.
pub fn lintrans_forward<S: Scalar>(
    tokens: &Tensor<S>,
    w: &LinTransWeights<S>,
    cfg: &StackConfig,
    mode: &mut Mode,
) -> Result<Tensor<S>> {
    lintrans_forward_traced(tokens, w, cfg, mode, None)
}

/// [`lintrans_forward`] that can also hand back each block's `[B, T, H, dh]`
/// query/key pair, feeding the averaged-attention-map export.
pub fn lintrans_forward_traced<S: Scalar>(
    tokens: &Tensor<S>,
    w: &LinTransWeights<S>,
    cfg: &StackConfig,
    mode: &mut Mode,
    mut trace: Option<&mut Vec<(Tensor<S>, Tensor<S>)>>,
) -> Result<Tensor<S>> {
    let s = tokens.shape();
    if s.len() != 3 || s[2] != cfg.model_dim {
        return Err(ModelError::Invalid(format!("expected [batch, tokens, {}], got {s:?}", cfg.model_dim)));
    }
    let eps = S::from_f64(NORM_EPS);
    let mut x = tokens.clone();
    for blk in &w.blocks {
        let h = x.rms_norm(&blk.attn_norm, eps)?;
        let q = split_heads(&h.matmul(&blk.w_q)?, cfg.heads)?;
        let k = split_heads(&h.matmul(&blk.w_k)?, cfg.heads)?;
        let v = split_heads(&h.matmul(&blk.w_v)?, cfg.heads)?;
        if let Some(tr) = trace.as_deref_mut() {
            tr.push((q.clone(), k.clone()));
        }
        let y = fast_weight_attention(&q, &k, &v)?.reshape(&s)?.matmul(&blk.w_o)?;
        x = x.add(&apply_dropout(&y, mode)?)?;
        x = x.add(&mlp_apply(&x, &blk.mlp, mode)?)?;
    }
    Ok(x)
}

/// Attention-shaped layer with data-independent weights: `q_t` and `k_i` are
/// rows of trainable position tables, only the values come from the signal.
pub fn fixedvar_forward<S: Scalar>(
    x1: &Tensor<S>,
    w: &FixedVarWeights<S>,
    cfg: &StackConfig,
    mode: &mut Mode,
) -> Result<Tensor<S>> {
    let s = x1.shape();
    if s.len() != 3 || s[2] != cfg.model_dim {
        return Err(ModelError::Invalid(format!("expected [batch, tokens, {}], got {s:?}", cfg.model_dim)));
    }
    let (t, d) = (s[1], s[2]);
    let table = w.q_table.shape()[0];
    if t > table {
        return Err(ModelError::PositionOverflow { got: t, table });
    }
    let (h, dh) = (cfg.heads, cfg.head_dim());
    let q = w.q_table.slice(0, 0, t)?.reshape(&[1, t, h, dh])?;
    let k = w.k_table.slice(0, 0, t)?.reshape(&[1, t, h, dh])?;
    let mut v = split_heads(&x1.matmul(&w.w_v)?, h)?;
    if let Some(vg) = &w.v_gain {
        v = v.rms_norm(vg, S::from_f64(NORM_EPS))?;
    }
    let y = fast_weight_attention(&q, &k, &v)?
        .reshape(&[s[0], t, d])?
        .matmul(&w.w_o)?;
    Ok(x1.add(&apply_dropout(&y, mode)?)?)
}

// ---------------------------------------------------------------------------
// Footprint
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct Footprint {
    pub params: usize,
    pub flops: u64,
}

/// Exact trainable-scalar count (from the vault) and an analytic FLOP
/// estimate for one `[C, 2N, d]` forward: 2 FLOPs per multiply-add of every
/// matmul/contraction, 1 per cumulative-sum add.
pub fn count_footprint<S: Scalar>(
    cfg: &StackConfig,
    vault: &ParamVault<S>,
    channels: usize,
    n_patches: usize,
    patch_len: usize,
) -> Footprint {
    let b = channels as u64;
    let n = n_patches as u64;
    let t = 2 * n;
    let d = cfg.model_dim as u64;
    let lp = patch_len as u64;
    let h = cfg.heads as u64;
    let dh = (cfg.model_dim / cfg.heads) as u64;
    let c = channels as u64;
    let l = cfg.layers as u64;

    // tokenizer: endo/exo projections, channel mixing, output projection
    let mut macs = b * n * lp * d * 2 + n * lp * c * c + b * n * d * lp;
    let front = l * b * t * 8 * d * d;
    let head_contraction = |with_mix: u64| b * t * h * dh * dh * (2 + with_mix) // kv outer + q·state (+ mix)
        + b * t * h * dh * dh / 2; // cumsum adds ≈ half a MAC each
    match cfg.variant {
        Variant::Samovar => {
            macs += front;
            let mix = u64::from(cfg.use_dinv);
            let proj = 2 + u64::from(cfg.use_wk);
            macs += l * (proj * b * t * d * d + head_contraction(mix));
            if cfg.use_dinv {
                macs += 4 * h * dh * dh * dh; // build D and its inverse
            }
        }
        Variant::LinTrans => {
            macs += l * (4 * b * t * d * d + head_contraction(0) + b * t * 8 * d * d);
        }
        Variant::FixedVar => {
            macs += front;
            macs += 2 * b * t * d * d + head_contraction(0);
        }
    }
    Footprint { params: vault.total_params(), flops: macs * 2 }
}
