//! Vector-autoregressive ground truth: sampling random stable VAR(p)
//! processes, simulating them, and computing the exact linear map that carries
//! each past observation into each later one. The forecaster's recovered
//! weights are compared against these maps, so everything here runs at `f64`
//! and is kept independent of the model code.

use rand::Rng;
use serde::{Deserialize, Serialize};
use rand_distr::StandardNormal;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VarError {
    #[error(
        "no stable process found in {attempts} draws (lags {lags:?}, coeffs in [{lo}, {hi}], {channels} channels)"
    )]
    SamplingFailure { attempts: usize, lags: Vec<usize>, lo: f64, hi: f64, channels: usize },
    #[error("simulation diverged at step {step}: |y| = {magnitude:.3e} exceeds 1e6")]
    Diverged { step: usize, magnitude: f64 },
    #[error("{0}")]
    Invalid(String),
}

type Result<T> = std::result::Result<T, VarError>;

/// Magnitude at which a simulated trajectory is declared divergent.
const DIVERGENCE_LIMIT: f64 = 1e6;
/// Rejection-sampling budget for [`sample_var_process`].
const MAX_SAMPLE_ATTEMPTS: usize = 1000;

/// A VAR(p) process `y_t = Σ_m A_m y_{t-m} + u_t` with Gaussian innovations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VarProcess {
    /// Lag order `p`.
    pub p: usize,
    /// `p` coefficient matrices, each `C×C` row-major; `coeffs[m-1]` is `A_m`.
    pub coeffs: Vec<Vec<f64>>,
    /// Per-channel innovation standard deviation.
    pub noise_std: Vec<f64>,
    /// Channel count `C`.
    pub channels: usize,
    /// True when the companion spectral radius was verified `< 1`.
    pub stable: bool,
    /// Optional exogenous-input matrices for VARX-style processes; unused by
    /// the endogenous simulator.
    pub exo_coeffs: Option<Vec<Vec<f64>>>,
}

impl VarProcess {
    /// Build a process from explicit coefficients, validating shapes and
    /// probing stability (an unstable process is allowed but flagged).
    pub fn new(coeffs: Vec<Vec<f64>>, noise_std: Vec<f64>) -> Result<Self> {
        let channels = noise_std.len();
        if channels == 0 {
            return Err(VarError::Invalid("channel count must be positive".into()));
        }
        if coeffs.is_empty() {
            return Err(VarError::Invalid("need at least one coefficient matrix".into()));
        }
        if let Some(bad) = coeffs.iter().position(|a| a.len() != channels * channels) {
            return Err(VarError::Invalid(format!(
                "coefficient matrix {bad} has {} entries, expected {channels}x{channels}",
                coeffs[bad].len()
            )));
        }
        if noise_std.iter().any(|&s| s < 0.0 || !s.is_finite()) {
            return Err(VarError::Invalid("noise_std must be finite and non-negative".into()));
        }
        let mut proc = VarProcess {
            p: coeffs.len(),
            coeffs,
            noise_std,
            channels,
            stable: false,
            exo_coeffs: None,
        };
        proc.stable = companion_spectral_radius(&proc).value < 1.0;
        Ok(proc)
    }
}

/// Draw a random VAR process: lag order uniform over `p_choices`, every
/// coefficient i.i.d. uniform in `[lo, hi]`, innovations standard normal.
/// Unstable draws are rejected and redrawn; running out of attempts is an
/// error describing the configuration.
pub fn sample_var_process(
    rng: &mut impl Rng,
    p_choices: &[usize],
    coeff_range: (f64, f64),
    channels: usize,
) -> Result<VarProcess> {
    let (lo, hi) = coeff_range;
    if p_choices.is_empty() || p_choices.contains(&0) {
        return Err(VarError::Invalid(format!("lag choices must be non-empty and positive: {p_choices:?}")));
    }
    if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(VarError::Invalid(format!("coefficient range [{lo}, {hi}] is not ordered and finite")));
    }
    if channels == 0 {
        return Err(VarError::Invalid("channel count must be positive".into()));
    }
    for _ in 0..MAX_SAMPLE_ATTEMPTS {
        let p = p_choices[rng.gen_range(0..p_choices.len())];
        let coeffs: Vec<Vec<f64>> = (0..p)
            .map(|_| (0..channels * channels).map(|_| rng.gen_range(lo..=hi)).collect())
            .collect();
        let mut proc = VarProcess {
            p,
            coeffs,
            noise_std: vec![1.0; channels],
            channels,
            stable: false,
            exo_coeffs: None,
        };
        if companion_spectral_radius(&proc).value < 1.0 {
            proc.stable = true;
            return Ok(proc);
        }
    }
    Err(VarError::SamplingFailure {
        attempts: MAX_SAMPLE_ATTEMPTS,
        lags: p_choices.to_vec(),
        lo,
        hi,
        channels,
    })
}

/// Simulate `length` steps from a zero initial state, discarding `burn_in`
/// leading steps. Returns `length×C` row-major values.
pub fn simulate(
    proc: &VarProcess,
    length: usize,
    rng: &mut impl Rng,
    burn_in: usize,
) -> Result<Vec<f64>> {
    simulate_inner(proc, None, length, Some(rng), burn_in)
}

/// Noiseless continuation from an explicit recent history (`p×C`, oldest row
/// first). Step 0 of the output is the first value after the history.
pub fn simulate_from(proc: &VarProcess, history: &[f64], length: usize) -> Result<Vec<f64>> {
    if history.len() != proc.p * proc.channels {
        return Err(VarError::Invalid(format!(
            "history has {} values, expected p*C = {}",
            history.len(),
            proc.p * proc.channels
        )));
    }
    simulate_inner(proc, Some(history), length, None::<&mut rand::rngs::ThreadRng>, 0)
}

fn simulate_inner(
    proc: &VarProcess,
    history: Option<&[f64]>,
    length: usize,
    mut rng: Option<&mut impl Rng>,
    burn_in: usize,
) -> Result<Vec<f64>> {
    if length == 0 {
        return Err(VarError::Invalid("length must be at least 1".into()));
    }
    let c = proc.channels;
    // ring buffer of the p most recent states, oldest first
    let mut recent: Vec<f64> = match history {
        Some(h) => h.to_vec(),
        None => vec![0.0; proc.p * c],
    };
    let mut out = Vec::with_capacity(length * c);
    let mut y = vec![0.0f64; c];
    for step in 0..burn_in + length {
        y.iter_mut().for_each(|v| *v = 0.0);
        for m in 1..=proc.p {
            let a = &proc.coeffs[m - 1];
            let past = &recent[(proc.p - m) * c..(proc.p - m + 1) * c];
            for (i, yi) in y.iter_mut().enumerate() {
                let row = &a[i * c..(i + 1) * c];
                *yi += row.iter().zip(past).map(|(aij, pj)| aij * pj).sum::<f64>();
            }
        }
        if let Some(r) = rng.as_deref_mut() {
            for (yi, std) in y.iter_mut().zip(&proc.noise_std) {
                let u: f64 = r.sample(StandardNormal);
                *yi += std * u;
            }
        }
        if let Some(&bad) = y.iter().find(|v| v.abs() > DIVERGENCE_LIMIT || !v.is_finite()) {
            return Err(VarError::Diverged { step, magnitude: bad.abs() });
        }
        recent.copy_within(c.., 0);
        recent[(proc.p - 1) * c..].copy_from_slice(&y);
        if step >= burn_in {
            out.extend_from_slice(&y);
        }
    }
    Ok(out)
}

/// Exact linear maps carrying observation `y_j` into observation `y_t`:
/// `weights(t, j)` is the `C×C` sensitivity of `y_t` to `y_j` with every
/// intermediate step responding. Equivalently the impulse response, so a
/// zero-initial-state trajectory decomposes exactly as
/// `y_t = Σ_{j≤t} weights(t, j) · u_j`.
#[derive(Debug, Clone)]
pub struct ContributionMap {
    pub t_len: usize,
    pub channels: usize,
    /// `T×T×C×C` row-major; block `(t, j)` is zero for `j > t`.
    pub weights: Vec<f64>,
}

impl ContributionMap {
    pub fn block(&self, t: usize, j: usize) -> &[f64] {
        let c2 = self.channels * self.channels;
        let base = (t * self.t_len + j) * c2;
        &self.weights[base..base + c2]
    }
}

/// Unroll the recursion `Φ_{t,j} = Σ_m A_m Φ_{t-m,j}` with `Φ_{j,j} = I`
/// over a window of `t_len` observations.
pub fn ground_truth_contributions(proc: &VarProcess, t_len: usize) -> ContributionMap {
    let c = proc.channels;
    let c2 = c * c;
    let mut weights = vec![0.0f64; t_len * t_len * c2];
    for j in 0..t_len {
        for ch in 0..c {
            weights[(j * t_len + j) * c2 + ch * c + ch] = 1.0;
        }
        for t in j + 1..t_len {
            // split so we can read earlier rows while writing row t
            let (past, cur) = weights.split_at_mut((t * t_len + j) * c2);
            let block = &mut cur[..c2];
            for m in 1..=proc.p.min(t - j) {
                let a = &proc.coeffs[m - 1];
                let prev = &past[((t - m) * t_len + j) * c2..((t - m) * t_len + j) * c2 + c2];
                mat_mul_add(c, a, prev, block);
            }
        }
    }
    ContributionMap { t_len, channels: c, weights }
}

/// `out += a @ b` for `n×n` row-major matrices.
fn mat_mul_add(n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += aik * b[k * n + j];
            }
        }
    }
}

/// Spectral radius estimate of the `pC×pC` companion matrix.
#[derive(Debug, Clone, Copy)]
pub struct SpectralRadius {
    pub value: f64,
    /// False when power iteration failed to settle and `value` is the norm
    /// bound `‖M^256‖_F^{1/256}`, an upper bound on the radius.
    pub converged: bool,
}

/// Companion matrix in block form: first block row is `[A_1 … A_p]`, identity
/// blocks on the subdiagonal.
fn companion_matrix(proc: &VarProcess) -> Vec<f64> {
    let c = proc.channels;
    let n = proc.p * c;
    let mut m = vec![0.0f64; n * n];
    for (lag, a) in proc.coeffs.iter().enumerate() {
        for i in 0..c {
            for j in 0..c {
                m[i * n + lag * c + j] = a[i * c + j];
            }
        }
    }
    for blk in 1..proc.p {
        for i in 0..c {
            m[(blk * c + i) * n + (blk - 1) * c + i] = 1.0;
        }
    }
    m
}

/// Power iteration (200 iterations, tolerance 1e-9). Complex dominant
/// eigenvalue pairs make the iteration oscillate; in that case fall back to
/// the norm bound `‖M^256‖_F^{1/256}`, which upper-bounds the radius tightly
/// enough for a stability test.
pub fn companion_spectral_radius(proc: &VarProcess) -> SpectralRadius {
    let n = proc.p * proc.channels;
    let m = companion_matrix(proc);
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + 0.1 * (i as f64 + 1.0).sin()).collect();
    let norm = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = norm(&v);
    v.iter_mut().for_each(|x| *x /= nv);
    let mut estimate = 0.0f64;
    let mut w = vec![0.0f64; n];
    for _ in 0..200 {
        for (i, wi) in w.iter_mut().enumerate() {
            *wi = m[i * n..(i + 1) * n].iter().zip(&v).map(|(a, b)| a * b).sum();
        }
        let nw = norm(&w);
        if nw < 1e-300 {
            return SpectralRadius { value: 0.0, converged: true };
        }
        let prev = estimate;
        estimate = nw;
        for (vi, wi) in v.iter_mut().zip(&w) {
            *vi = wi / nw;
        }
        if (estimate - prev).abs() <= 1e-9 * estimate.max(1.0) {
            return SpectralRadius { value: estimate, converged: true };
        }
    }
    SpectralRadius { value: norm_power_bound(&m, n), converged: false }
}

/// `‖M^256‖_F^{1/256}` by repeated squaring with log-scale renormalization.
fn norm_power_bound(m: &[f64], n: usize) -> f64 {
    let fro = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>().sqrt();
    let mut b = m.to_vec();
    let mut log_scale = 0.0f64; // M^(2^k) = b * exp(log_scale)
    for _ in 0..8 {
        let s = fro(&b);
        if s < 1e-300 {
            return 0.0;
        }
        b.iter_mut().for_each(|x| *x /= s);
        log_scale = 2.0 * (log_scale + s.ln());
        let mut sq = vec![0.0f64; n * n];
        mat_mul_add(n, &b.clone(), &b, &mut sq);
        b = sq;
    }
    ((fro(&b).ln() + log_scale) / 256.0).exp()
}
