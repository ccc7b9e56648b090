//! ARX tokenization: cut each channel into non-overlapping patches (left
//! zero-pad to fit), normalize per token, and emit two interleaved token
//! streams per channel — an exogenous token (all channels of the patch mixed
//! through a learned channel matrix) directly before each endogenous token
//! (the channel's own patch). The inverse path projects endogenous outputs
//! back to patch space and undoes the normalization.

use rand::Rng;
use thiserror::Error;

use crate::autodiff::{Graph, Scalar, Tensor, TensorError};
use crate::params::{normal_init, zeros, Bound, ParamError, ParamVault};

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Param(#[from] ParamError),
}

type Result<T> = std::result::Result<T, TokenizerError>;

/// Lower bound applied to every normalization scale.
pub const STD_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct TokenizerConfig {
    pub channels: usize,
    pub patch_len: usize,
    pub model_dim: usize,
    /// True (default): scale = per-channel std of the whole input window.
    /// False: scale = per-token std.
    pub whole_input_std: bool,
    /// True (default): center = per-channel mean of the whole input window.
    /// False: each token centered on its own mean — note this maps every
    /// length-1 token to exactly zero, blinding the model at patch length 1.
    pub whole_input_mean: bool,
}

/// Padded raw patches, `C×N×L_P` row-major.
#[derive(Debug, Clone)]
pub struct RawPatches<S: Scalar> {
    pub values: Vec<S>,
    pub channels: usize,
    pub n_patches: usize,
    pub patch_len: usize,
    pub pad: usize,
    pub input_len: usize,
}

/// Split a `rows×channels` window into left-padded non-overlapping patches.
pub fn patchify<S: Scalar>(
    input: &[f64],
    rows: usize,
    channels: usize,
    patch_len: usize,
) -> Result<RawPatches<S>> {
    if rows == 0 || channels == 0 || patch_len == 0 {
        return Err(TokenizerError::Invalid("rows, channels, patch_len must be positive".into()));
    }
    if input.len() != rows * channels {
        return Err(TokenizerError::Invalid(format!(
            "{} values do not fill a {rows}x{channels} window",
            input.len()
        )));
    }
    let pad = (patch_len - rows % patch_len) % patch_len;
    let n_patches = (rows + pad) / patch_len;
    let mut values = vec![S::zero(); channels * n_patches * patch_len];
    for ch in 0..channels {
        let base = ch * n_patches * patch_len;
        for t in 0..rows {
            values[base + pad + t] = S::from_f64(input[t * channels + ch]);
        }
    }
    Ok(RawPatches { values, channels, n_patches, patch_len, pad, input_len: rows })
}

/// Normalized patches plus the statistics needed to undo the normalization.
#[derive(Debug, Clone)]
pub struct Patches<S: Scalar> {
    /// `C×N×L_P`, each token centered on its own mean and divided by `std`.
    pub values: Vec<S>,
    /// Per-token means, `C×N`.
    pub mean: Vec<S>,
    /// Per-token scales, `C×N` (the channel's shared scale replicated when
    /// whole-input mode is on), floored at [`STD_FLOOR`].
    pub std: Vec<S>,
    pub channels: usize,
    pub n_patches: usize,
    pub patch_len: usize,
    pub pad: usize,
}

/// Center each token on its channel's whole-window mean (or its own mean when
/// `whole_input_mean` is off); divide by the per-channel standard deviation of
/// the unpadded input window (or the per-token std when `whole_input_std` is
/// off). A zero window hits the scale floor and normalizes to zero. Padded
/// positions are normalized like real values, so the round trip restores their
/// zeros exactly.
pub fn revin_normalize<S: Scalar>(
    raw: &RawPatches<S>,
    whole_input_std: bool,
    whole_input_mean: bool,
) -> Patches<S> {
    let (c, n, lp) = (raw.channels, raw.n_patches, raw.patch_len);
    let mut values = raw.values.clone();
    let mut mean = vec![S::zero(); c * n];
    let mut std = vec![S::zero(); c * n];
    let floor = S::from_f64(STD_FLOOR);
    for ch in 0..c {
        let stream = &raw.values[ch * n * lp..(ch + 1) * n * lp];
        let window = &stream[raw.pad..]; // true input values only
        let win_inv = S::one() / S::from_f64(window.len() as f64);
        let win_mu = window.iter().copied().sum::<S>() * win_inv;
        let chan_std = if whole_input_std {
            let var =
                window.iter().map(|&v| (v - win_mu) * (v - win_mu)).sum::<S>() * win_inv;
            var.sqrt().max(floor)
        } else {
            S::zero() // unused
        };
        for i in 0..n {
            let tok = &stream[i * lp..(i + 1) * lp];
            let inv = S::one() / S::from_f64(lp as f64);
            let mu = if whole_input_mean {
                win_mu
            } else {
                tok.iter().copied().sum::<S>() * inv
            };
            let scale = if whole_input_std {
                chan_std
            } else {
                let tok_mu = tok.iter().copied().sum::<S>() * inv;
                let var =
                    tok.iter().map(|&v| (v - tok_mu) * (v - tok_mu)).sum::<S>() * inv;
                var.sqrt().max(floor)
            };
            mean[ch * n + i] = mu;
            std[ch * n + i] = scale;
            for (v, &t) in values[(ch * n + i) * lp..(ch * n + i + 1) * lp].iter_mut().zip(tok) {
                *v = (t - mu) / scale;
            }
        }
    }
    Patches { values, mean, std, channels: c, n_patches: n, patch_len: lp, pad: raw.pad }
}

/// Invert [`revin_normalize`], reconstructing the padded `C×N×L_P` values.
pub fn revin_denormalize<S: Scalar>(p: &Patches<S>) -> Vec<S> {
    let lp = p.patch_len;
    let mut out = p.values.clone();
    for (tok_idx, chunk) in out.chunks_exact_mut(lp).enumerate() {
        let (m, s) = (p.mean[tok_idx], p.std[tok_idx]);
        for v in chunk {
            *v = *v * s + m;
        }
    }
    out
}

/// Trainable tokenizer weights bound to one graph.
pub struct TokenizerWeights<S: Scalar> {
    /// `d×L_P` patch projection.
    pub w_tok: Tensor<S>,
    /// `C×C` channel mixing for the exogenous stream.
    pub w_ex: Tensor<S>,
    /// `L_P×d` output projection.
    pub w_out: Tensor<S>,
    /// `2N×d` position table over interleaved positions.
    pub pos_emb: Tensor<S>,
    /// `C×d` channel table shared by both streams of a channel.
    pub chan_emb: Tensor<S>,
}

impl<S: Scalar> TokenizerWeights<S> {
    /// Register all tokenizer parameters: projections at `Normal(0, 0.02²)`,
    /// embedding tables at zero.
    pub fn register(
        vault: &mut ParamVault<S>,
        rng: &mut impl Rng,
        cfg: &TokenizerConfig,
        n_patches: usize,
    ) -> std::result::Result<(), ParamError> {
        let (c, lp, d) = (cfg.channels, cfg.patch_len, cfg.model_dim);
        vault.register("tok.w_tok", &[d, lp], normal_init(rng, d * lp, 0.02))?;
        vault.register("tok.w_ex", &[c, c], normal_init(rng, c * c, 0.02))?;
        vault.register("tok.w_out", &[lp, d], normal_init(rng, lp * d, 0.02))?;
        vault.register("tok.pos", &[2 * n_patches, d], zeros(2 * n_patches * d))?;
        vault.register("tok.chan", &[c, d], zeros(c * d))?;
        Ok(())
    }

    pub fn bind(bound: &Bound<S>) -> std::result::Result<Self, ParamError> {
        Ok(TokenizerWeights {
            w_tok: bound.get("tok.w_tok")?,
            w_ex: bound.get("tok.w_ex")?,
            w_out: bound.get("tok.w_out")?,
            pos_emb: bound.get("tok.pos")?,
            chan_emb: bound.get("tok.chan")?,
        })
    }
}

/// Interleaved token tensor plus the normalization statistics carried through
/// to the output projection.
pub struct TokenBatch<S: Scalar> {
    /// `C×2N×d`; position `2i` is exogenous, `2i+1` endogenous.
    pub tokens: Tensor<S>,
    pub mean: Vec<S>,
    pub std: Vec<S>,
    pub channels: usize,
    pub n_patches: usize,
    pub patch_len: usize,
    pub pad: usize,
}

/// 0-based interleaved positions of the endogenous tokens: 1, 3, 5, …
pub fn endo_positions(n_patches: usize) -> Vec<usize> {
    (0..n_patches).map(|i| 2 * i + 1).collect()
}

/// Build the interleaved token tensor: per channel `j`, exogenous token `i`
/// is `W_tok · (Patch_all_i · W_ex[:, j])` and endogenous token `i` is
/// `W_tok · patch_{j,i}`, with position and channel embeddings added.
pub fn build_arx_tokens<S: Scalar>(
    g: &Graph<S>,
    patches: &Patches<S>,
    w: &TokenizerWeights<S>,
) -> Result<TokenBatch<S>> {
    let (c, n, lp) = (patches.channels, patches.n_patches, patches.patch_len);
    let wtok_shape = w.w_tok.shape();
    if wtok_shape.len() != 2 || wtok_shape[1] != lp {
        return Err(TokenizerError::Invalid(format!(
            "patch projection shape {wtok_shape:?} does not accept patches of length {lp}"
        )));
    }
    let d = wtok_shape[0];
    if w.w_ex.shape() != [c, c] {
        return Err(TokenizerError::Invalid(format!(
            "channel mixer shape {:?}, expected [{c}, {c}]",
            w.w_ex.shape()
        )));
    }
    if w.pos_emb.shape() != [2 * n, d] || w.chan_emb.shape() != [c, d] {
        return Err(TokenizerError::Invalid(format!(
            "embedding shapes {:?} / {:?} do not match {n} patches, {c} channels, width {d}",
            w.pos_emb.shape(),
            w.chan_emb.shape()
        )));
    }
    let p = g.constant(patches.values.clone(), &[c, n, lp])?;
    let endo = p.matmul_t(&w.w_tok)?; // [C, N, d]
    let mixed = p
        .permute(&[1, 2, 0])? // [N, L_P, C]
        .matmul(&w.w_ex)? // column j of the mixer weights channel j's exo patch
        .permute(&[2, 0, 1])?; // [C, N, L_P]
    let exo = mixed.matmul_t(&w.w_tok)?;
    let interleaved = Graph::concat(
        &[exo.reshape(&[c, n, 1, d])?, endo.reshape(&[c, n, 1, d])?],
        2,
    )?
    .reshape(&[c, 2 * n, d])?;
    let tokens = interleaved
        .add(&w.pos_emb)?
        .add(&w.chan_emb.reshape(&[c, 1, d])?)?;
    Ok(TokenBatch {
        tokens,
        mean: patches.mean.clone(),
        std: patches.std.clone(),
        channels: c,
        n_patches: n,
        patch_len: lp,
        pad: patches.pad,
    })
}

/// Project endogenous outputs (`C×N×d`) back to patch space and undo the
/// normalization with each token's stored statistics.
pub fn project_out<S: Scalar>(
    endo_outputs: &Tensor<S>,
    w_out: &Tensor<S>,
    mean: &[S],
    std: &[S],
) -> Result<Tensor<S>> {
    let shape = endo_outputs.shape();
    if shape.len() != 3 {
        return Err(TokenizerError::Invalid(format!("expected C×N×d outputs, got {shape:?}")));
    }
    let (c, n) = (shape[0], shape[1]);
    if mean.len() != c * n || std.len() != c * n {
        return Err(TokenizerError::Invalid(format!(
            "normalization stats cover {} tokens, expected {}",
            mean.len(),
            c * n
        )));
    }
    let g = endo_outputs.graph();
    let y = endo_outputs.matmul_t(w_out)?; // [C, N, L_P]
    let s = g.constant(std.to_vec(), &[c, n, 1])?;
    let m = g.constant(mean.to_vec(), &[c, n, 1])?;
    Ok(y.mul(&s)?.add(&m)?)
}
