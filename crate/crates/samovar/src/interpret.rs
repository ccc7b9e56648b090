//! Reconstruction of the VAR-structured stack's explicit dynamic weights.
//!
//! The fast forward pass never materializes them, but each layer's attention
//! is a sum of rank-1 maps `A⁽ˡ⁾_{t,i} = v_i⁽ˡ⁾ ⊗ q_t⁽ˡ⁾` applied to its key
//! stream, and since layer ℓ's keys are layer ℓ−1's outputs, the whole stack
//! collapses to one time-varying VAR over the first-layer signal:
//!
//! * per layer, `B⁽¹⁾ = A⁽¹⁾` and `B⁽ˡ⁾_{t,j} = Σ_{i=j}^t A⁽ˡ⁾_{t,i}·B⁽ˡ⁻¹⁾_{i,j}`
//!   (a key projection, when enabled, is inserted into the product);
//! * the total weight `C_{t,j} = Σ_ℓ B⁽ˡ⁾_{t,j} (+ I at t = j)` satisfies
//!   `X̃_t = X_t⁽¹⁾ + Σ_j D⁻¹ C′_{t,j} X_j⁽¹⁾` exactly.
//!
//! Everything here is computed with plain `f64` loops — independently of the
//! tensor graph — so the identity above is a genuine two-route check against
//! the fast forward pass. On top of the weights sit temporal influence paths
//! (the rank-1 chains whose sums recover each `B⁽ᵐ⁾`), output-contribution
//! heatmaps `W_out·D⁻¹·C_{t,j}·W_outᵀ`, and pruning statistics.

use thiserror::Error;

use crate::attn_stack::{StackConfig, NORM_EPS};
use crate::autodiff::Scalar;
use crate::params::{ParamError, ParamVault};

#[derive(Debug, Error)]
pub enum InterpretError {
    #[error("{0}")]
    Invalid(String),
    #[error("enumerating {count} paths exceeds the budget of {budget}")]
    PathBudget { count: u128, budget: u128 },
    #[error("path count overflows: delta {delta}, depth {depth}")]
    CountOverflow { delta: usize, depth: usize },
    #[error(transparent)]
    Param(#[from] ParamError),
}

type Result<T> = std::result::Result<T, InterpretError>;

/// Refuse to enumerate more paths than this.
pub const PATH_BUDGET: u128 = 100_000;
/// Attention entries below this magnitude count as pruned.
pub const PRUNE_THRESHOLD: f64 = 1e-6;

// ---------------------------------------------------------------------------
// Dense helpers (graph-free, deliberately simple)
// ---------------------------------------------------------------------------

/// `a [m×k] · b [k×n]`, row-major.
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += av * b[p * n + j];
            }
        }
    }
    out
}

fn read_f64<S: Scalar>(vault: &ParamVault<S>, name: &str) -> Result<Vec<f64>> {
    Ok(vault.get(name)?.value.iter().map(|v| Scalar::to_f64(*v)).collect())
}

/// Relative Frobenius mass outside the best rank-1 approximation:
/// `√(Σ_{i≥2} σᵢ² / σ₁²)`. Zero iff the matrix is rank 1 (up to roundoff);
/// `σ₁²` comes from power iteration on `MᵀM` over a few starts.
pub fn rank1_residual(m: &[f64], rows: usize, cols: usize) -> f64 {
    let frob2: f64 = m.iter().map(|v| v * v).sum();
    if frob2 <= 0.0 {
        return 0.0;
    }
    let mut best = 0.0_f64; // σ₁²
    for s in 0..cols.min(3) {
        let mut v: Vec<f64> =
            (0..cols).map(|i| if i == s { 1.0 } else { 1.0 / (i as f64 + 2.0) }).collect();
        for _ in 0..200 {
            let mv = mm(m, &v, rows, cols, 1);
            let mut w = vec![0.0; cols];
            for r in 0..rows {
                for c in 0..cols {
                    w[c] += m[r * cols + c] * mv[r];
                }
            }
            let n = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n < 1e-300 {
                break;
            }
            v = w.iter().map(|x| x / n).collect();
        }
        let mv = mm(m, &v, rows, cols, 1);
        let s1sq: f64 = mv.iter().map(|x| x * x).sum();
        best = best.max(s1sq);
    }
    if best <= 0.0 {
        return 0.0;
    }
    ((frob2 - best).max(0.0) / best).sqrt()
}

// ---------------------------------------------------------------------------
// Block storage
// ---------------------------------------------------------------------------

/// Lower-triangular `T×T` grid of `w×w` blocks, optionally band-limited to
/// `t − j ≤ band` (only those blocks are stored).
#[derive(Debug, Clone)]
pub struct LowerBlocks {
    pub t_len: usize,
    pub width: usize,
    pub band: usize,
    data: Vec<f64>,
}

impl LowerBlocks {
    pub fn new(t_len: usize, width: usize, band: usize) -> Self {
        let band = band.min(t_len.saturating_sub(1));
        LowerBlocks { t_len, width, band, data: vec![0.0; t_len * (band + 1) * width * width] }
    }

    pub fn holds(&self, t: usize, j: usize) -> bool {
        t < self.t_len && j <= t && t - j <= self.band
    }

    fn offset(&self, t: usize, j: usize) -> usize {
        debug_assert!(self.holds(t, j));
        (t * (self.band + 1) + (t - j)) * self.width * self.width
    }

    pub fn block(&self, t: usize, j: usize) -> &[f64] {
        let w = self.width;
        &self.data[self.offset(t, j)..][..w * w]
    }

    pub fn block_mut(&mut self, t: usize, j: usize) -> &mut [f64] {
        let w = self.width;
        let o = self.offset(t, j);
        &mut self.data[o..][..w * w]
    }
}

/// The stack's explicit dynamic VAR weights for one token stream.
///
/// `a[layer][head]` holds the per-head rank-1 attention maps (width `d/H`).
/// `b[layer][g]` and `c[g]` hold the composed weights over `mix_heads` groups
/// of width `mix_width`: per head when keys are the identity, one full-width
/// group when a key projection mixes heads. `c`'s diagonal includes `+I`.
pub struct VarWeightTensor {
    pub t_len: usize,
    pub heads: usize,
    pub head_width: usize,
    pub mix_heads: usize,
    pub mix_width: usize,
    pub a: Vec<Vec<LowerBlocks>>,
    pub b: Vec<Vec<LowerBlocks>>,
    pub c: Vec<LowerBlocks>,
}

impl VarWeightTensor {
    pub fn layers(&self) -> usize {
        self.a.len()
    }

    pub fn model_dim(&self) -> usize {
        self.heads * self.head_width
    }

    /// Assemble the full `d×d` total weight at `(t, j)` (block-diagonal over
    /// mix groups).
    pub fn c_full(&self, t: usize, j: usize) -> Vec<f64> {
        let d = self.model_dim();
        let w = self.mix_width;
        let mut out = vec![0.0; d * d];
        for (h, grp) in self.c.iter().enumerate() {
            if !grp.holds(t, j) {
                continue;
            }
            let blk = grp.block(t, j);
            for r in 0..w {
                for cc in 0..w {
                    out[(h * w + r) * d + h * w + cc] = blk[r * w + cc];
                }
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Query/value extraction
// ---------------------------------------------------------------------------

/// One layer's queries and values for every token, `[T·d]` each, with the
/// model's per-head RMS normalization already applied.
struct LayerQv {
    q: Vec<f64>,
    v: Vec<f64>,
    w_k: Option<Vec<f64>>,
}

fn per_head_rms(x: &mut [f64], t_len: usize, heads: usize, dh: usize, gain: &[f64]) {
    for t in 0..t_len {
        for h in 0..heads {
            let s = &mut x[t * heads * dh + h * dh..][..dh];
            let ms = s.iter().map(|v| v * v).sum::<f64>() / dh as f64;
            let inv = 1.0 / (ms + NORM_EPS).sqrt();
            for (v, g) in s.iter_mut().zip(gain) {
                *v *= inv * g;
            }
        }
    }
}

/// Recompute each layer's normalized q/v streams from the raw weights and the
/// first-layer signal `x1` (`[T·d]` row-major) — plain `f64`, no graph.
fn layer_qv<S: Scalar>(
    cfg: &StackConfig,
    vault: &ParamVault<S>,
    x1: &[f64],
    t_len: usize,
) -> Result<Vec<LayerQv>> {
    let d = cfg.model_dim;
    if x1.len() != t_len * d {
        return Err(InterpretError::Invalid(format!(
            "signal holds {} values, expected {t_len}×{d}",
            x1.len()
        )));
    }
    let dh = cfg.head_dim();
    let mut out = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let w_q = read_f64(vault, &format!("attn.{l}.w_q"))?;
        let w_v = read_f64(vault, &format!("attn.{l}.w_v"))?;
        let mut q = mm(x1, &w_q, t_len, d, d);
        let mut v = mm(x1, &w_v, t_len, d, d);
        if cfg.qv_norm {
            let qg = read_f64(vault, &format!("attn.{l}.q_gain"))?;
            let vg = read_f64(vault, &format!("attn.{l}.v_gain"))?;
            per_head_rms(&mut q, t_len, cfg.heads, dh, &qg);
            per_head_rms(&mut v, t_len, cfg.heads, dh, &vg);
        }
        let w_k = if cfg.use_wk { Some(read_f64(vault, &format!("attn.{l}.w_k"))?) } else { None };
        out.push(LayerQv { q, v, w_k });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Explicit weights
// ---------------------------------------------------------------------------

/// Reconstruct `A`, `B`, and `C_total` for one token stream. `band` limits
/// the computation to `t − j ≤ band` (the recursion is closed under it since
/// every intermediate index lies between `j` and `t`); `None` computes the
/// full lower triangle.
pub fn explicit_var_weights<S: Scalar>(
    cfg: &StackConfig,
    vault: &ParamVault<S>,
    x1: &[f64],
    t_len: usize,
    band: Option<usize>,
) -> Result<VarWeightTensor> {
    let (d, heads, dh) = (cfg.model_dim, cfg.heads, cfg.head_dim());
    let qv = layer_qv(cfg, vault, x1, t_len)?;
    let band = band.unwrap_or(t_len.saturating_sub(1)).min(t_len.saturating_sub(1));

    // A⁽ˡ⁾_{t,i} = v_i ⊗ q_t per head
    let mut a: Vec<Vec<LowerBlocks>> = Vec::with_capacity(cfg.layers);
    for lv in &qv {
        let mut per_head = Vec::with_capacity(heads);
        for h in 0..heads {
            let mut blocks = LowerBlocks::new(t_len, dh, band);
            for t in 0..t_len {
                let qt = &lv.q[t * d + h * dh..][..dh];
                for i in t.saturating_sub(band)..=t {
                    let vi = &lv.v[i * d + h * dh..][..dh];
                    let blk = blocks.block_mut(t, i);
                    for r in 0..dh {
                        for c in 0..dh {
                            blk[r * dh + c] = vi[r] * qt[c];
                        }
                    }
                }
            }
            per_head.push(blocks);
        }
        a.push(per_head);
    }

    let (mix_heads, mix_width) = if cfg.use_wk { (1, d) } else { (heads, dh) };
    let mut b: Vec<Vec<LowerBlocks>> = Vec::with_capacity(cfg.layers);

    // B⁽¹⁾: A⁽¹⁾ (per head), or A⁽¹⁾·W_kᵀ assembled full-width
    let mut first = Vec::with_capacity(mix_heads);
    if cfg.use_wk {
        let w_k = qv[0].w_k.as_ref().unwrap();
        let mut blocks = LowerBlocks::new(t_len, d, band);
        for t in 0..t_len {
            for j in t.saturating_sub(band)..=t {
                let blk = blocks.block_mut(t, j);
                // per head: v_j^h ⊗ (W_k·q_t^h-lifted), written into head rows
                for h in 0..heads {
                    let qt = &qv[0].q[t * d + h * dh..][..dh];
                    let vj = &qv[0].v[j * d + h * dh..][..dh];
                    // row vector (q_t^h)ᵀ·W_kᵀ restricted to head h's columns:
                    // entry c = Σ_r q[r]·W_k[c, h·dh+r]
                    for r in 0..dh {
                        for c in 0..d {
                            let mut s = 0.0;
                            for (ri, qv_r) in qt.iter().enumerate() {
                                s += qv_r * w_k[c * d + h * dh + ri];
                            }
                            blk[(h * dh + r) * d + c] += vj[r] * s;
                        }
                    }
                }
            }
        }
        first.push(blocks);
    } else {
        first = a[0].clone();
    }
    b.push(first);

    // B⁽ˡ⁾_{t,j} = Σ_{i=j}^t A⁽ˡ⁾_{t,i}·(W_kᵀ)·B⁽ˡ⁻¹⁾_{i,j}, rank-1 contraction
    for l in 1..cfg.layers {
        let lv = &qv[l];
        let mut cur = Vec::with_capacity(mix_heads);
        for g in 0..mix_heads {
            let prev = &b[l - 1][g];
            let w = mix_width;
            let mut blocks = LowerBlocks::new(t_len, w, band);
            for t in 0..t_len {
                for j in t.saturating_sub(band)..=t {
                    // accumulate over i: v_i^h ⊗ (q_t^h ᵀ · (W_kᵀ) · B_{i,j})
                    let acc = std::cell::RefCell::new(vec![0.0; w * w]);
                    for i in j..=t {
                        let prev_blk = prev.block(i, j);
                        if cfg.use_wk {
                            let w_k = lv.w_k.as_ref().unwrap();
                            // N = W_kᵀ·B: N[r][c] = Σ_p W_k[p, r]·B[p][c]
                            for h in 0..heads {
                                let qt = &lv.q[t * d + h * dh..][..dh];
                                let vi = &lv.v[i * d + h * dh..][..dh];
                                // row = (q_t^h)ᵀ·N over head-h's rows of N:
                                // row[c] = Σ_r q[r]·N[h·dh+r][c]
                                //        = Σ_r q[r] Σ_p W_k[p, h·dh+r] B[p][c]
                                let mut lift = vec![0.0; d]; // Σ_r q[r]·W_k[:, h·dh+r]
                                for (ri, qv_r) in qt.iter().enumerate() {
                                    for p in 0..d {
                                        lift[p] += qv_r * w_k[p * d + h * dh + ri];
                                    }
                                }
                                let mut row = vec![0.0; d];
                                for p in 0..d {
                                    if lift[p] == 0.0 {
                                        continue;
                                    }
                                    for c in 0..d {
                                        row[c] += lift[p] * prev_blk[p * d + c];
                                    }
                                }
                                let mut acc_m = acc.borrow_mut();
                                for r in 0..dh {
                                    for c in 0..d {
                                        acc_m[(h * dh + r) * d + c] += vi[r] * row[c];
                                    }
                                }
                            }
                        } else {
                            let qt = &lv.q[t * d + g * dh..][..dh];
                            let vi = &lv.v[i * d + g * dh..][..dh];
                            let mut row = vec![0.0; dh];
                            for r in 0..dh {
                                let qr = qt[r];
                                if qr == 0.0 {
                                    continue;
                                }
                                for c in 0..dh {
                                    row[c] += qr * prev_blk[r * dh + c];
                                }
                            }
                            let mut acc_m = acc.borrow_mut();
                            for r in 0..dh {
                                for c in 0..dh {
                                    acc_m[r * dh + c] += vi[r] * row[c];
                                }
                            }
                        }
                    }
                    blocks.block_mut(t, j).copy_from_slice(&acc.into_inner());
                }
            }
            cur.push(blocks);
        }
        b.push(cur);
    }

    // C = Σ_m B⁽ᵐ⁾, +I on the diagonal
    let mut c = Vec::with_capacity(mix_heads);
    for g in 0..mix_heads {
        let w = mix_width;
        let mut total = LowerBlocks::new(t_len, w, band);
        for t in 0..t_len {
            for j in t.saturating_sub(band)..=t {
                let blk = total.block_mut(t, j);
                for layer_b in &b {
                    for (o, x) in blk.iter_mut().zip(layer_b[g].block(t, j)) {
                        *o += x;
                    }
                }
                if t == j {
                    for r in 0..w {
                        blk[r * w + r] += 1.0;
                    }
                }
            }
        }
        c.push(total);
    }

    Ok(VarWeightTensor { t_len, heads, head_width: dh, mix_heads, mix_width, a, b, c })
}

/// The per-head mixing inverse as dense `[H, dh, dh]` values — assembled and
/// inverted with plain triangular substitutions, independently of the graph
/// route. Identity when mixing is disabled.
///
/// The stack applies the stored inverse to token *rows* (`y·M`), so the
/// matrix returned here is its transpose: the operator that left-multiplies
/// column signals, ready for `out += M·acc` style use.
pub fn d_inverse_dense<S: Scalar>(cfg: &StackConfig, vault: &ParamVault<S>) -> Result<Vec<f64>> {
    let (h, dh) = (cfg.heads, cfg.head_dim());
    let mut out = vec![0.0; h * dh * dh];
    if !cfg.use_dinv {
        for g in 0..h {
            for i in 0..dh {
                out[g * dh * dh + i * dh + i] = 1.0;
            }
        }
        return Ok(out);
    }
    let l_lower = read_f64(vault, "dinv.l_lower")?;
    let u_diag = read_f64(vault, "dinv.u_diag")?;
    let u_upper = read_f64(vault, "dinv.u_upper")?;
    let tri = dh * (dh - 1) / 2;
    for g in 0..h {
        let mut l = vec![0.0; dh * dh];
        let mut u = vec![0.0; dh * dh];
        let mut k = 0;
        for i in 0..dh {
            l[i * dh + i] = 1.0;
            let pre = u_diag[g * dh + i];
            u[i * dh + i] = pre.max(0.0) + (-pre.abs()).exp().ln_1p(); // softplus
            for j in 0..i {
                l[i * dh + j] = l_lower[g * tri + k];
                u[j * dh + i] = u_upper[g * tri + k];
                k += 1;
            }
        }
        // solve L·U·z = e_c column by column, storing zᵀ (row-applied inverse
        // transposed into the column-operator layout)
        for c in 0..dh {
            let mut y = vec![0.0; dh];
            for i in 0..dh {
                let mut s = if i == c { 1.0 } else { 0.0 };
                for j in 0..i {
                    s -= l[i * dh + j] * y[j];
                }
                y[i] = s; // unit diagonal
            }
            let mut z = vec![0.0; dh];
            for i in (0..dh).rev() {
                let mut s = y[i];
                for j in i + 1..dh {
                    s -= u[i * dh + j] * z[j];
                }
                z[i] = s / u[i * dh + i];
            }
            for i in 0..dh {
                out[g * dh * dh + c * dh + i] = z[i];
            }
        }
    }
    Ok(out)
}

/// Replay the stack's output from the explicit weights:
/// `X̃_t = X_t + Σ_j D⁻¹·(C_{t,j} − Iδ_{tj})·X_j`. Requires unbanded weights.
pub fn reconstruct_forward(
    vwt: &VarWeightTensor,
    d_inv: &[f64],
    x1: &[f64],
) -> Result<Vec<f64>> {
    let (t_len, d) = (vwt.t_len, vwt.model_dim());
    let (heads, dh) = (vwt.heads, vwt.head_width);
    if vwt.c[0].band + 1 < t_len && t_len > 1 {
        return Err(InterpretError::Invalid("band-limited weights cannot replay the forward".into()));
    }
    if x1.len() != t_len * d || d_inv.len() != heads * dh * dh {
        return Err(InterpretError::Invalid("signal or mixing shape mismatch".into()));
    }
    let w = vwt.mix_width;
    let mut out = x1.to_vec();
    for t in 0..t_len {
        let mut acc = vec![0.0; d];
        for j in 0..=t {
            for (g, grp) in vwt.c.iter().enumerate() {
                let blk = grp.block(t, j);
                let xj = &x1[j * d + g * w..][..w];
                let dst = &mut acc[g * w..][..w];
                for r in 0..w {
                    let mut s = 0.0;
                    for c in 0..w {
                        s += blk[r * w + c] * xj[c];
                    }
                    dst[r] += s;
                }
            }
        }
        // the diagonal block carried +I: remove the shortcut before mixing
        for (av, xv) in acc.iter_mut().zip(&x1[t * d..(t + 1) * d]) {
            *av -= xv;
        }
        for h in 0..heads {
            let m = &d_inv[h * dh * dh..][..dh * dh];
            let src = &acc[h * dh..][..dh];
            let dst = &mut out[t * d + h * dh..][..dh];
            for r in 0..dh {
                let mut s = 0.0;
                for c in 0..dh {
                    s += m[r * dh + c] * src[c];
                }
                dst[r] += s;
            }
        }
    }
    Ok(out)
}

/// Fast-weight forward replay with the q/v streams frozen at `x1` while the
/// key/residual stream runs on `x_keys`. Linear in `x_keys`, so its exact
/// directional derivatives probe the reconstructed weights from a route that
/// never touches the recursion.
pub fn frozen_qv_forward<S: Scalar>(
    cfg: &StackConfig,
    vault: &ParamVault<S>,
    x1: &[f64],
    x_keys: &[f64],
    t_len: usize,
) -> Result<Vec<f64>> {
    let (d, heads, dh) = (cfg.model_dim, cfg.heads, cfg.head_dim());
    if x_keys.len() != t_len * d {
        return Err(InterpretError::Invalid("key signal shape mismatch".into()));
    }
    let qv = layer_qv(cfg, vault, x1, t_len)?;
    let d_inv = d_inverse_dense(cfg, vault)?;
    let mut x_tilde = x_keys.to_vec();
    let mut stream = x_keys.to_vec();
    for lv in &qv {
        let keyed = match &lv.w_k {
            Some(w_k) => mm(&stream, w_k, t_len, d, d),
            None => stream.clone(),
        };
        let mut y = vec![0.0; t_len * d];
        for h in 0..heads {
            let mut state = vec![0.0; dh * dh]; // Σ_{i≤t} k_i ⊗ v_i
            for t in 0..t_len {
                let kt = &keyed[t * d + h * dh..][..dh];
                let vt = &lv.v[t * d + h * dh..][..dh];
                for r in 0..dh {
                    for c in 0..dh {
                        state[r * dh + c] += kt[r] * vt[c];
                    }
                }
                let qt = &lv.q[t * d + h * dh..][..dh];
                let yt = &mut y[t * d + h * dh..][..dh];
                for c in 0..dh {
                    let mut s = 0.0;
                    for r in 0..dh {
                        s += qt[r] * state[r * dh + c];
                    }
                    yt[c] = s;
                }
            }
        }
        for t in 0..t_len {
            for h in 0..heads {
                let m = &d_inv[h * dh * dh..][..dh * dh];
                let src = &y[t * d + h * dh..][..dh];
                let dst = &mut x_tilde[t * d + h * dh..][..dh];
                for r in 0..dh {
                    let mut s = 0.0;
                    for c in 0..dh {
                        s += m[r * dh + c] * src[c];
                    }
                    dst[r] += s;
                }
            }
        }
        stream = y;
    }
    Ok(x_tilde)
}

// ---------------------------------------------------------------------------
// Temporal influence paths
// ---------------------------------------------------------------------------

/// One rank-1 influence chain from `source` to `sink` through `depth` layers
/// of one head: `P = A⁽ᵐ⁾_{t,i₁}·A⁽ᵐ⁻¹⁾_{i₁,i₂}⋯A⁽¹⁾_{i_{m−1},j}`.
#[derive(Debug, Clone)]
pub struct InfluencePath {
    pub source: usize,
    pub sink: usize,
    pub depth: usize,
    pub head: usize,
    /// `i₁ ≥ … ≥ i_{m−1}`, between sink and source.
    pub intermediates: Vec<usize>,
    /// The `m−1` inner dot products along the chain.
    pub scalars: Vec<f64>,
    /// `dh×dh` row-major; rank 1 by construction.
    pub matrix: Vec<f64>,
}

/// Number of depth-`depth` paths across `delta = t − j`:
/// `C(delta + depth − 1, depth − 1)`.
pub fn path_count(delta: usize, depth: usize) -> Result<u128> {
    if depth == 0 {
        return Err(InterpretError::Invalid("depth must be ≥ 1".into()));
    }
    let (n, k) = ((delta + depth - 1) as u128, (depth - 1) as u128);
    let mut acc: u128 = 1;
    for i in 1..=k {
        acc = acc
            .checked_mul(n - k + i)
            .ok_or(InterpretError::CountOverflow { delta, depth })?
            / i;
    }
    Ok(acc)
}

/// Enumerate every influence path from `source` to `sink` of depth
/// `1..=up_to_layer`, per head. Identity keys only — a key projection mixes
/// heads and breaks the per-head path picture.
pub fn enumerate_paths<S: Scalar>(
    cfg: &StackConfig,
    vault: &ParamVault<S>,
    x1: &[f64],
    t_len: usize,
    sink: usize,
    source: usize,
    up_to_layer: usize,
) -> Result<Vec<InfluencePath>> {
    if cfg.use_wk {
        return Err(InterpretError::Invalid(
            "path enumeration requires identity keys (key projection mixes heads)".into(),
        ));
    }
    if source > sink || sink >= t_len || up_to_layer == 0 || up_to_layer > cfg.layers {
        return Err(InterpretError::Invalid(format!(
            "bad path query: {source} → {sink} through {up_to_layer} layers (T = {t_len})"
        )));
    }
    let delta = sink - source;
    let mut total: u128 = 0;
    for m in 1..=up_to_layer {
        total = total
            .checked_add(path_count(delta, m)?)
            .ok_or(InterpretError::CountOverflow { delta, depth: m })?;
    }
    total = total
        .checked_mul(cfg.heads as u128)
        .ok_or(InterpretError::CountOverflow { delta, depth: up_to_layer })?;
    if total > PATH_BUDGET {
        return Err(InterpretError::PathBudget { count: total, budget: PATH_BUDGET });
    }

    let (d, dh) = (cfg.model_dim, cfg.head_dim());
    let qv = layer_qv(cfg, vault, x1, t_len)?;
    let q_at = |layer: usize, t: usize, h: usize| &qv[layer].q[t * d + h * dh..][..dh];
    let v_at = |layer: usize, t: usize, h: usize| &qv[layer].v[t * d + h * dh..][..dh];

    // all non-increasing intermediate sequences in [source, sink]
    fn monotone_seqs(slots: usize, hi: usize, lo: usize) -> Vec<Vec<usize>> {
        if slots == 0 {
            return vec![Vec::new()];
        }
        let mut out = Vec::new();
        for v in (lo..=hi).rev() {
            for mut rest in monotone_seqs(slots - 1, v, lo) {
                rest.insert(0, v);
                out.push(rest);
            }
        }
        out
    }

    let mut out = Vec::new();
    for h in 0..cfg.heads {
        for m in 1..=up_to_layer {
            for mids in monotone_seqs(m - 1, sink, source) {
                // seq = [sink, i₁, …, i_{m−1}, source]
                let mut seq = Vec::with_capacity(m + 1);
                seq.push(sink);
                seq.extend_from_slice(&mids);
                seq.push(source);
                // chain scalars: s_k = q⁽ᵐ⁻ᵏ⁺¹⁾_{i_{k−1}} · v⁽ᵐ⁻ᵏ⁾_{i_{k+1}}
                let mut scalars = Vec::with_capacity(m - 1);
                let mut prod = 1.0;
                for k in 1..m {
                    let q = q_at(m - k, seq[k - 1], h); // layer m−k+1 (0-based m−k)
                    let v = v_at(m - k - 1, seq[k + 1], h);
                    let s: f64 = q.iter().zip(v).map(|(a, b)| a * b).sum();
                    scalars.push(s);
                    prod *= s;
                }
                let left = v_at(m - 1, seq[1], h);
                let right = q_at(0, seq[m - 1], h);
                let mut matrix = vec![0.0; dh * dh];
                for r in 0..dh {
                    for c in 0..dh {
                        matrix[r * dh + c] = prod * left[r] * right[c];
                    }
                }
                out.push(InfluencePath {
                    source,
                    sink,
                    depth: m,
                    head: h,
                    intermediates: mids,
                    scalars,
                    matrix,
                });
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Contribution heatmaps
// ---------------------------------------------------------------------------

/// Channel-attributed token-level map: `[T, T, C_out, C_in]` row-major.
pub struct Heatmap {
    pub t_len: usize,
    pub channels: usize,
    pub weights: Vec<f64>,
}

/// Time-step-level map after folding the interleaved token axis:
/// `[steps, steps, C_out, C_in]`, sinks at endogenous tokens, sources summed
/// over each step's exogenous + endogenous token.
pub struct TimeMap {
    pub steps: usize,
    pub channels: usize,
    pub weights: Vec<f64>,
}

/// Attribute a per-stream token map (`[C, T, T]` magnitudes) to source
/// channels: endogenous source tokens stay on their own channel, exogenous
/// ones spread by the channel mixer's |weights|.
pub fn attribute_channels(
    scalar: &[f64],
    channels: usize,
    t_len: usize,
    w_ex: &[f64],
) -> Heatmap {
    let c = channels;
    let mut weights = vec![0.0; t_len * t_len * c * c];
    for co in 0..c {
        for t in 0..t_len {
            for j in 0..=t {
                let s = scalar[(co * t_len + t) * t_len + j];
                if s == 0.0 {
                    continue;
                }
                if j % 2 == 1 {
                    weights[((t * t_len + j) * c + co) * c + co] = s;
                } else {
                    for ci in 0..c {
                        weights[((t * t_len + j) * c + co) * c + ci] = s * w_ex[ci * c + co].abs();
                    }
                }
            }
        }
    }
    Heatmap { t_len, channels: c, weights }
}

/// Fold a token-level map to time steps: sink step τ reads endo token 2τ+1;
/// source step σ sums its exo token 2σ and endo token 2σ+1.
pub fn fold_to_time(map: &Heatmap) -> TimeMap {
    let steps = map.t_len / 2;
    let c = map.channels;
    let mut weights = vec![0.0; steps * steps * c * c];
    for tau in 0..steps {
        let t = 2 * tau + 1;
        for sigma in 0..=tau {
            for j in [2 * sigma, 2 * sigma + 1] {
                for co in 0..c {
                    for ci in 0..c {
                        weights[((tau * steps + sigma) * c + co) * c + ci] +=
                            map.weights[((t * map.t_len + j) * c + co) * c + ci];
                    }
                }
            }
        }
    }
    TimeMap { steps, channels: c, weights }
}

/// Full heatmap pipeline over one window's per-channel token streams.
pub struct HeatmapAnalysis {
    pub channels: usize,
    pub t_len: usize,
    pub patch_len: usize,
    vwts: Vec<VarWeightTensor>,
    d_inv: Vec<f64>,
    w_out: Vec<f64>,
    w_ex: Vec<f64>,
    heads: usize,
    dh: usize,
}

impl HeatmapAnalysis {
    /// `x1` is the stack-input signal, `[C, T, d]` row-major.
    pub fn new<S: Scalar>(
        cfg: &StackConfig,
        vault: &ParamVault<S>,
        x1: &[f64],
        channels: usize,
        t_len: usize,
        band: Option<usize>,
    ) -> Result<Self> {
        let d = cfg.model_dim;
        if x1.len() != channels * t_len * d {
            return Err(InterpretError::Invalid(format!(
                "signal holds {} values, expected {channels}×{t_len}×{d}",
                x1.len()
            )));
        }
        let w_out = read_f64(vault, "tok.w_out")?;
        let w_ex = read_f64(vault, "tok.w_ex")?;
        let patch_len = w_out.len() / d;
        let mut vwts = Vec::with_capacity(channels);
        for ch in 0..channels {
            vwts.push(explicit_var_weights(
                cfg,
                vault,
                &x1[ch * t_len * d..(ch + 1) * t_len * d],
                t_len,
                band,
            )?);
        }
        Ok(HeatmapAnalysis {
            channels,
            t_len,
            patch_len,
            vwts,
            d_inv: d_inverse_dense(cfg, vault)?,
            w_out,
            w_ex,
            heads: cfg.heads,
            dh: cfg.head_dim(),
        })
    }

    /// The raw `L_P×L_P` contribution block `W_out·D⁻¹·C_{t,j}·W_outᵀ` of
    /// source token `j` on sink token `t` in output stream `co`.
    pub fn block(&self, co: usize, t: usize, j: usize) -> Result<Vec<f64>> {
        let vwt = &self.vwts[co];
        if !vwt.c[0].holds(t, j) {
            return Err(InterpretError::Invalid(format!("block ({t}, {j}) outside the band")));
        }
        let (lp, d) = (self.patch_len, vwt.model_dim());
        // sandwich per mix group; D⁻¹ is per original head
        let c_full = vwt.c_full(t, j);
        let mut mixed = vec![0.0; d * d]; // D⁻¹·C
        let dh = self.dh;
        for h in 0..self.heads {
            let m = &self.d_inv[h * dh * dh..][..dh * dh];
            for r in 0..dh {
                for rc in 0..dh {
                    let coef = m[r * dh + rc];
                    if coef == 0.0 {
                        continue;
                    }
                    for cc in 0..d {
                        mixed[(h * dh + r) * d + cc] += coef * c_full[(h * dh + rc) * d + cc];
                    }
                }
            }
        }
        let left = mm(&self.w_out, &mixed, lp, d, d);
        // right-multiply by W_outᵀ: out[r][c] = Σ_p left[r][p]·W_out[c][p]
        let mut out = vec![0.0; lp * lp];
        for r in 0..lp {
            for c in 0..lp {
                let mut s = 0.0;
                for p in 0..d {
                    s += left[r * d + p] * self.w_out[c * d + p];
                }
                out[r * lp + c] = s;
            }
        }
        Ok(out)
    }

    /// Per-stream display magnitudes: `[C, T, T]`, mean |entry| of each block.
    pub fn scalar_tokens(&self) -> Result<Vec<f64>> {
        let (t_len, c) = (self.t_len, self.channels);
        let mut out = vec![0.0; c * t_len * t_len];
        for co in 0..c {
            let band = self.vwts[co].c[0].band;
            for t in 0..t_len {
                for j in t.saturating_sub(band)..=t {
                    let blk = self.block(co, t, j)?;
                    let mean = blk.iter().map(|v| v.abs()).sum::<f64>() / blk.len() as f64;
                    out[(co * t_len + t) * t_len + j] = mean;
                }
            }
        }
        Ok(out)
    }

    /// Channel-attributed token map.
    pub fn heatmap(&self) -> Result<Heatmap> {
        Ok(attribute_channels(&self.scalar_tokens()?, self.channels, self.t_len, &self.w_ex))
    }

    /// Time-folded map for comparison against generating-process contributions.
    pub fn time_map(&self) -> Result<TimeMap> {
        Ok(fold_to_time(&self.heatmap()?))
    }

    /// The reconstructed per-stream weight tensors backing the maps.
    pub fn var_weights(&self) -> &[VarWeightTensor] {
        &self.vwts
    }
}

/// Averaged |attention| of the pre-norm linear Transformer: `[C, T, T]`,
/// mean over layers and heads of `|q_t·k_i|`, computed from a traced forward
/// over the window's token streams (`tokens`: `[C, T, d]` values).
pub fn lintrans_attention<S: Scalar>(
    cfg: &StackConfig,
    vault: &ParamVault<S>,
    tokens: &[f64],
    channels: usize,
    t_len: usize,
) -> Result<Vec<f64>> {
    use crate::attn_stack::{bind_lintrans, lintrans_forward_traced, Mode};
    let d = cfg.model_dim;
    if tokens.len() != channels * t_len * d {
        return Err(InterpretError::Invalid(format!(
            "token values hold {} numbers, expected {channels}×{t_len}×{d}",
            tokens.len()
        )));
    }
    let g = crate::autodiff::Graph::new();
    let bound = vault.bind_all(&g)?;
    let w = bind_lintrans(&bound, cfg)
        .map_err(|e| InterpretError::Invalid(e.to_string()))?;
    let x = g
        .constant(tokens.iter().map(|v| S::from_f64(*v)).collect(), &[channels, t_len, d])
        .map_err(|e| InterpretError::Invalid(e.to_string()))?;
    let mut trace = Vec::new();
    lintrans_forward_traced(&x, &w, cfg, &mut Mode::Eval, Some(&mut trace))
        .map_err(|e| InterpretError::Invalid(e.to_string()))?;
    let (heads, dh) = (cfg.heads, cfg.head_dim());
    let mut out = vec![0.0; channels * t_len * t_len];
    let denom = (trace.len() * heads) as f64;
    for (q, k) in &trace {
        let qv: Vec<f64> = q.value().iter().map(|v| Scalar::to_f64(*v)).collect();
        let kv: Vec<f64> = k.value().iter().map(|v| Scalar::to_f64(*v)).collect();
        for ch in 0..channels {
            for t in 0..t_len {
                for i in 0..=t {
                    for h in 0..heads {
                        let qb = ((ch * t_len + t) * heads + h) * dh;
                        let kb = ((ch * t_len + i) * heads + h) * dh;
                        let dot: f64 =
                            (0..dh).map(|e| qv[qb + e] * kv[kb + e]).sum();
                        out[(ch * t_len + t) * t_len + i] += dot.abs() / denom;
                    }
                }
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Pruning statistics
// ---------------------------------------------------------------------------

/// Distribution summary of how much of the reconstructed weight mass survives.
#[derive(Debug, Clone, serde::Serialize)]
pub struct PruningStats {
    pub threshold: f64,
    /// Per layer: fraction of |A| entries below the threshold.
    pub layer_sparsity: Vec<f64>,
    /// Per lag Δ = t−j: mean |entry| of the attention-driven total weight
    /// (shortcut excluded).
    pub delta_mass: Vec<f64>,
}

pub fn pruning_stats(vwt: &VarWeightTensor) -> PruningStats {
    let t_len = vwt.t_len;
    let mut layer_sparsity = Vec::with_capacity(vwt.layers());
    for per_head in &vwt.a {
        let (mut small, mut total) = (0usize, 0usize);
        for blocks in per_head {
            for t in 0..t_len {
                for i in t.saturating_sub(blocks.band)..=t {
                    for v in blocks.block(t, i) {
                        total += 1;
                        if v.abs() < PRUNE_THRESHOLD {
                            small += 1;
                        }
                    }
                }
            }
        }
        layer_sparsity.push(small as f64 / total.max(1) as f64);
    }
    let band = vwt.c[0].band;
    let mut delta_mass = vec![0.0; band + 1];
    let mut delta_count = vec![0usize; band + 1];
    let w = vwt.mix_width;
    for grp in &vwt.c {
        for t in 0..t_len {
            for j in t.saturating_sub(band)..=t {
                let delta = t - j;
                let blk = grp.block(t, j);
                let mut sum = 0.0;
                for r in 0..w {
                    for c in 0..w {
                        let mut v = blk[r * w + c];
                        if delta == 0 && r == c {
                            v -= 1.0; // strip the shortcut
                        }
                        sum += v.abs();
                    }
                }
                delta_mass[delta] += sum / (w * w) as f64;
                delta_count[delta] += 1;
            }
        }
    }
    for (m, n) in delta_mass.iter_mut().zip(&delta_count) {
        *m /= (*n).max(1) as f64;
    }
    PruningStats { threshold: PRUNE_THRESHOLD, layer_sparsity, delta_mass }
}
