//! Optimization loop and evaluation protocol: AdamW with decoupled decay,
//! warmup + linear-decay learning rate, early stopping on validation MSE,
//! teacher-forced training over every endogenous token, and last-token
//! evaluation.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attn_stack::{Mode, ModelError};
use crate::autodiff::{Scalar, TensorError};
use crate::ingest::{window_sampler, IngestError, SplitView};
use crate::model::Model;
use crate::params::{Bound, ParamError, ParamVault};
use crate::synth_bench::{make_example, Split, SynthConfig};
use crate::var_math::VarError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{0}")]
    Invalid(String),
    #[error("training diverged at epoch {epoch}, step {step}: loss {loss:.3e} (lr {lr:.3e})")]
    Diverged { epoch: usize, step: usize, loss: f64, lr: f64 },
    #[error("every step of epoch {epoch} was skipped for non-finite values; aborting")]
    AllSkipped { epoch: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Synth(#[from] VarError),
    #[error(transparent)]
    Param(#[from] ParamError),
}

type Result<T> = std::result::Result<T, TrainError>;

/// Numeric width training runs at (weights, activations, and optimizer all
/// follow it; selection happens where the model is constructed).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub lr_warmup_start: f64,
    pub lr_peak: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    /// Global-norm gradient clip; `None` disables.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            max_epochs: 100,
            patience: 12,
            lr_warmup_start: 6e-5,
            lr_peak: 6e-4,
            warmup_epochs: 5,
            weight_decay: 0.1,
            betas: (0.9, 0.95),
            eps: 1e-8,
            grad_clip: Some(1.0),
            seed: 0,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(TrainError::Invalid("batch size and epoch count must be positive".into()));
        }
        if self.warmup_epochs >= self.max_epochs {
            return Err(TrainError::Invalid(format!(
                "warmup ({}) must end before max_epochs ({})",
                self.warmup_epochs, self.max_epochs
            )));
        }
        if !(self.lr_warmup_start.is_finite() && self.lr_peak.is_finite()) {
            return Err(TrainError::Invalid("learning rates must be finite".into()));
        }
        Ok(())
    }
}


/// Abort threshold: a finite training loss above this is treated as
/// divergence.
pub const DIVERGENCE_LOSS: f64 = 1e4;

/// One line of the metrics log. `wall_seconds` is elapsed real time and is
/// the only field exempt from run-to-run reproducibility.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
    pub val_mae: f64,
    pub lr: f64,
    pub wall_seconds: f64,
}

impl MetricsRecord {
    /// Exact bit patterns of every reproducible field, for log comparison.
    pub fn deterministic_bits(&self) -> (usize, u64, u64, u64, u64) {
        (
            self.epoch,
            self.train_mse.to_bits(),
            self.val_mse.to_bits(),
            self.val_mae.to_bits(),
            self.lr.to_bits(),
        )
    }
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// AdamW moments, one pair per parameter tensor, aligned with the vault's
/// registration order. Moments are kept in `f64` regardless of the weight
/// precision.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    /// Steps refused because a gradient was non-finite.
    pub skipped: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<S: Scalar>(vault: &ParamVault<S>) -> Self {
        let m: Vec<Vec<f64>> = vault.iter().map(|(_, e)| vec![0.0; e.value.len()]).collect();
        AdamState { step: 0, skipped: 0, v: m.clone(), m }
    }
}

/// Scale all gradients so their global L2 norm is at most `max_norm`;
/// returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Option<Vec<f64>>], max_norm: f64) -> f64 {
    let sq: f64 = grads
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum();
    let norm = sq.sqrt();
    if norm.is_finite() && norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

/// One AdamW step over every parameter: bias-corrected moments, decoupled
/// weight decay. `grads` aligns with the vault's registration order; `None`
/// counts as a zero gradient. If any gradient value is non-finite the whole
/// step is skipped (weights, moments, and step count untouched), a warning is
/// printed, and `false` is returned.
pub fn adamw_step<S: Scalar>(
    vault: &mut ParamVault<S>,
    grads: &[Option<Vec<f64>>],
    state: &mut AdamState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<bool> {
    if grads.len() != state.m.len() || grads.len() != vault.len() {
        return Err(TrainError::Invalid(format!(
            "{} gradients for {} parameters",
            grads.len(),
            vault.len()
        )));
    }
    if grads.iter().flatten().any(|g| g.iter().any(|v| !v.is_finite())) {
        state.skipped += 1;
        eprintln!("warning: non-finite gradient, skipping optimizer step (skipped: {})", state.skipped);
        return Ok(false);
    }
    let (b1, b2) = cfg.betas;
    state.step += 1;
    let bc1 = 1.0 - b1.powi(state.step as i32);
    let bc2 = 1.0 - b2.powi(state.step as i32);
    for (idx, (_, entry)) in vault.iter_mut().enumerate() {
        let g = grads[idx].as_deref();
        let (m, v) = (&mut state.m[idx], &mut state.v[idx]);
        for (i, w) in entry.value.iter_mut().enumerate() {
            let gi = g.map_or(0.0, |g| g[i]);
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            let w64 = Scalar::to_f64(*w);
            *w = S::from_f64(w64 - lr * (m_hat / (v_hat.sqrt() + cfg.eps)) - lr * cfg.weight_decay * w64);
        }
    }
    Ok(true)
}

/// Learning rate at fractional position `epoch + step_fraction`: linear from
/// `lr_warmup_start` to `lr_peak` across `[0, warmup_epochs)`, then linear to
/// zero at `max_epochs`. Continuous and piecewise linear.
pub fn lr_schedule(epoch: usize, step_fraction: f64, cfg: &TrainConfig) -> f64 {
    let pos = epoch as f64 + step_fraction.clamp(0.0, 1.0);
    let (w, m) = (cfg.warmup_epochs as f64, cfg.max_epochs as f64);
    if pos < w {
        cfg.lr_warmup_start + (cfg.lr_peak - cfg.lr_warmup_start) * pos / w
    } else {
        (cfg.lr_peak * (m - pos) / (m - w)).max(0.0)
    }
}

// ---------------------------------------------------------------------------
// Data plumbing
// ---------------------------------------------------------------------------

/// Where training examples come from.
pub enum DataSource<'a> {
    /// Fresh generating processes per example index; the index set is fixed
    /// across epochs, so the train split is a finite (memorizable) set.
    Synthetic(&'a SynthConfig),
    /// Chronological sliding windows over standardized splits.
    Windows { train: &'a SplitView, val: &'a SplitView, stride: usize },
}

enum Pool<'a> {
    Owned(Vec<(Vec<f64>, Vec<f64>)>),
    Borrowed(Vec<(&'a [f64], &'a [f64])>),
}

impl Pool<'_> {
    fn len(&self) -> usize {
        match self {
            Pool::Owned(v) => v.len(),
            Pool::Borrowed(v) => v.len(),
        }
    }

    fn get(&self, i: usize) -> (&[f64], &[f64]) {
        match self {
            Pool::Owned(v) => (&v[i].0, &v[i].1),
            Pool::Borrowed(v) => v[i],
        }
    }
}

/// Validation set size for synthetic runs: an eighth of the epoch budget,
/// clamped to a practical range.
pub fn synth_val_count(examples_per_epoch: usize) -> usize {
    (examples_per_epoch / 8).clamp(64, 1024).min(examples_per_epoch)
}

fn build_pools<'a, S: Scalar>(model: &Model<S>, data: &DataSource<'a>) -> Result<(Pool<'a>, Pool<'a>)> {
    match data {
        DataSource::Synthetic(sc) => {
            let check = |what: &str, got: usize, want: usize| {
                if got != want {
                    return Err(TrainError::Invalid(format!(
                        "synthetic {what} {got} does not match the model's {want}"
                    )));
                }
                Ok(())
            };
            check("channel count", sc.channels, model.cfg.channels)?;
            check("input length", sc.input_len, model.cfg.input_len)?;
            check("prediction length", sc.pred_len, model.cfg.pred_len)?;
            let mut train = Vec::with_capacity(sc.examples_per_epoch);
            for i in 0..sc.examples_per_epoch as u64 {
                let ex = make_example(sc, Split::Train, i)?;
                train.push((ex.input, ex.target));
            }
            let mut val = Vec::with_capacity(synth_val_count(sc.examples_per_epoch));
            for i in 0..synth_val_count(sc.examples_per_epoch) as u64 {
                let ex = make_example(sc, Split::Val, i)?;
                val.push((ex.input, ex.target));
            }
            Ok((Pool::Owned(train), Pool::Owned(val)))
        }
        DataSource::Windows { train, val, stride } => {
            let (li, lp) = (model.cfg.input_len, model.cfg.pred_len);
            let t: Vec<_> = window_sampler(train, li, lp, *stride)?.collect();
            let v: Vec<_> = window_sampler(val, li, lp, *stride)?.collect();
            Ok((Pool::Borrowed(t), Pool::Borrowed(v)))
        }
    }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// What `train` leaves behind. The model itself carries the best-validation
/// weights when training returns.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub log: Vec<MetricsRecord>,
    pub skipped_steps: u64,
    /// Largest pre-clip gradient norm observed (diagnostic).
    pub max_grad_norm: f64,
}

fn collect_grads<S: Scalar>(vault: &ParamVault<S>, bound: &Bound<S>) -> Result<Vec<Option<Vec<f64>>>> {
    let mut out = Vec::with_capacity(vault.len());
    for (name, _) in vault.iter() {
        let t = bound.get(name)?;
        out.push(t.grad().map(|g| g.iter().map(|v| Scalar::to_f64(*v)).collect()));
    }
    Ok(out)
}

fn nonfinite_model_err(e: &ModelError) -> bool {
    matches!(e, ModelError::Tensor(TensorError::NonFinite { .. }))
}

/// Train in place: teacher-forced MSE over all endogenous tokens, AdamW,
/// early stopping on validation MSE with the configured patience. On return
/// the model holds the weights of the best validation epoch. Deterministic
/// for a fixed seed/config/data.
pub fn train<S: Scalar>(
    model: &mut Model<S>,
    data: &DataSource,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (train_pool, val_pool) = build_pools(model, data)?;
    if train_pool.len() == 0 || val_pool.len() == 0 {
        return Err(TrainError::Invalid("empty train or validation pool".into()));
    }
    // distinct fixed salts keep the two RNG streams independent per seed
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5AD0_0001));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5AD0_0002));
    let mut state = AdamState::new(&model.vault);
    let started = Instant::now();

    let mut log = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut best_vault: Option<ParamVault<S>> = None;
    let mut stale = 0usize;
    let mut max_grad_norm = 0.0f64;

    let steps_per_epoch = train_pool.len().div_ceil(cfg.batch_size);
    let mut order: Vec<usize> = (0..train_pool.len()).collect();

    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut loss_examples = 0usize;
        let mut applied_steps = 0usize;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let inputs: Vec<&[f64]> = chunk.iter().map(|&i| train_pool.get(i).0).collect();
            let targets: Vec<&[f64]> = chunk.iter().map(|&i| train_pool.get(i).1).collect();
            let lr = lr_schedule(epoch, step as f64 / steps_per_epoch as f64, cfg);
            let mut mode = Mode::Train { p: model.cfg.stack.dropout, rng: &mut dropout_rng };
            let graph = match model.forward(&inputs, Some(&targets), &mut mode) {
                Ok(g) => g,
                Err(e) if nonfinite_model_err(&e) => {
                    state.skipped += 1;
                    eprintln!("warning: non-finite forward value, skipping step ({e})");
                    continue;
                }
                Err(e) => return Err(e.into()),
            };
            let loss_t = graph.loss.as_ref().expect("targets were supplied");
            let loss = Scalar::to_f64(loss_t.value()[0]);
            if loss.is_finite() && loss > DIVERGENCE_LOSS {
                return Err(TrainError::Diverged { epoch, step, loss, lr });
            }
            match loss_t.backward() {
                Ok(()) => {}
                Err(TensorError::NonFinite { .. }) => {
                    state.skipped += 1;
                    eprintln!("warning: non-finite backward value, skipping step");
                    continue;
                }
                Err(e) => return Err(ModelError::from(e).into()),
            }
            let mut grads = collect_grads(&model.vault, &graph.bound)?;
            if let Some(max) = cfg.grad_clip {
                let norm = clip_global_norm(&mut grads, max);
                if norm.is_finite() {
                    max_grad_norm = max_grad_norm.max(norm);
                }
            }
            if adamw_step(&mut model.vault, &grads, &mut state, lr, cfg)? {
                applied_steps += 1;
                loss_sum += loss * chunk.len() as f64;
                loss_examples += chunk.len();
            }
        }
        if applied_steps == 0 {
            return Err(TrainError::AllSkipped { epoch });
        }
        let train_mse = loss_sum / loss_examples as f64;
        let val_views: Vec<(&[f64], &[f64])> = (0..val_pool.len()).map(|i| val_pool.get(i)).collect();
        let (val_mse, val_mae) = evaluate(model, &val_views, cfg.batch_size)?;
        log.push(MetricsRecord {
            epoch,
            train_mse,
            val_mse,
            val_mae,
            lr: lr_schedule(epoch, 0.0, cfg),
            wall_seconds: started.elapsed().as_secs_f64(),
        });
        if val_mse < best_val {
            best_val = val_mse;
            best_epoch = epoch;
            best_vault = Some(model.vault.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }

    if let Some(v) = best_vault {
        model.vault = v;
    }
    Ok(TrainOutcome {
        best_epoch,
        best_val_mse: best_val,
        log,
        skipped_steps: state.skipped,
        max_grad_norm,
    })
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Forecast each window from its last endogenous token and score against the
/// continuation: `(MSE, MAE)` averaged over every window, step, and channel,
/// in the units the windows are given in.
pub fn evaluate<S: Scalar>(
    model: &Model<S>,
    windows: &[(&[f64], &[f64])],
    batch_size: usize,
) -> Result<(f64, f64)> {
    if windows.is_empty() || batch_size == 0 {
        return Err(TrainError::Invalid("evaluation needs windows and a positive batch".into()));
    }
    let (mut se, mut ae) = (0.0, 0.0);
    let mut count = 0usize;
    for chunk in windows.chunks(batch_size) {
        let inputs: Vec<&[f64]> = chunk.iter().map(|w| w.0).collect();
        let graph = model.forward(&inputs, None, &mut Mode::Eval)?;
        for (b, (_, target)) in chunk.iter().enumerate() {
            let pred = graph.forecast(b);
            debug_assert_eq!(pred.len(), target.len());
            for (p, t) in pred.iter().zip(*target) {
                let d = p - t;
                se += d * d;
                ae += d.abs();
                count += 1;
            }
        }
    }
    Ok((se / count as f64, ae / count as f64))
}

/// Naive floor: predict that the last patch of the input repeats. Same
/// averaging as `evaluate`.
pub fn repeat_last_baseline(
    windows: &[(&[f64], &[f64])],
    channels: usize,
    pred_len: usize,
) -> Result<(f64, f64)> {
    if windows.is_empty() {
        return Err(TrainError::Invalid("no windows".into()));
    }
    let (mut se, mut ae) = (0.0, 0.0);
    let mut count = 0usize;
    for (input, target) in windows {
        if input.len() < pred_len * channels || target.len() != pred_len * channels {
            return Err(TrainError::Invalid("window shorter than one patch".into()));
        }
        let tail = &input[input.len() - pred_len * channels..];
        for (p, t) in tail.iter().zip(*target) {
            let d = p - t;
            se += d * d;
            ae += d.abs();
            count += 1;
        }
    }
    Ok((se / count as f64, ae / count as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attn_stack::Variant;
    use crate::model::ModelConfig;

    fn tiny_model(seed: u64) -> Model<f64> {
        let mut cfg = ModelConfig::new(Variant::Samovar, 1, 8, 2);
        cfg.stack.layers = 1;
        cfg.stack.model_dim = 8;
        cfg.stack.heads = 2;
        Model::new(cfg, seed).unwrap()
    }

    fn tiny_synth() -> SynthConfig {
        SynthConfig {
            channels: 1,
            input_len: 8,
            pred_len: 2,
            train_lags: vec![1],
            train_range: (-0.5, 0.5),
            val_lags: vec![1, 2],
            val_range: (-0.25, 0.25),
            examples_per_epoch: 24,
            seed: 7,
        }
    }

    #[test]
    fn zero_gradients_leave_weights_fixed_without_decay() {
        let mut vault: ParamVault<f64> = ParamVault::new();
        vault.register("w", &[2], vec![1.5, -2.0]).unwrap();
        let mut state = AdamState::new(&vault);
        let cfg = TrainConfig { weight_decay: 0.0, ..TrainConfig::default() };
        let applied =
            adamw_step(&mut vault, &[Some(vec![0.0, 0.0])], &mut state, 1e-3, &cfg).unwrap();
        assert!(applied);
        assert_eq!(vault.get("w").unwrap().value, vec![1.5, -2.0]);
    }

    #[test]
    fn decoupled_decay_shrinks_weights_multiplicatively() {
        let mut vault: ParamVault<f64> = ParamVault::new();
        vault.register("w", &[1], vec![2.0]).unwrap();
        let mut state = AdamState::new(&vault);
        let cfg = TrainConfig::default(); // decay 0.1
        adamw_step(&mut vault, &[Some(vec![0.0])], &mut state, 1e-3, &cfg).unwrap();
        let got = vault.get("w").unwrap().value[0];
        assert!((got - 2.0 * (1.0 - 1e-4)).abs() < 1e-15, "{got}");
    }

    #[test]
    fn quadratic_toy_problem_converges() {
        let mut vault: ParamVault<f64> = ParamVault::new();
        vault.register("w", &[1], vec![10.0]).unwrap();
        let mut state = AdamState::new(&vault);
        let cfg = TrainConfig { weight_decay: 0.0, ..TrainConfig::default() };
        let mut converged_at = None;
        for step in 0..2000 {
            let w = vault.get("w").unwrap().value[0];
            let grad = 2.0 * (w - 3.0);
            adamw_step(&mut vault, &[Some(vec![grad])], &mut state, 0.05, &cfg).unwrap();
            if (vault.get("w").unwrap().value[0] - 3.0).abs() < 1e-6 {
                converged_at = Some(step);
                break;
            }
        }
        assert!(converged_at.is_some(), "no convergence within 2000 steps");
    }

    #[test]
    fn non_finite_gradients_skip_the_step() {
        let mut vault: ParamVault<f64> = ParamVault::new();
        vault.register("w", &[2], vec![1.0, 2.0]).unwrap();
        let mut state = AdamState::new(&vault);
        let cfg = TrainConfig::default();
        let applied =
            adamw_step(&mut vault, &[Some(vec![f64::NAN, 0.0])], &mut state, 1e-3, &cfg).unwrap();
        assert!(!applied);
        assert_eq!(state.skipped, 1);
        assert_eq!(state.step, 0);
        assert_eq!(vault.get("w").unwrap().value, vec![1.0, 2.0]);
    }

    #[test]
    fn global_norm_clip_rescales_to_the_bound() {
        let mut grads = vec![Some(vec![3.0, 0.0]), Some(vec![0.0, 4.0])];
        let norm = clip_global_norm(&mut grads, 1.0);
        assert!((norm - 5.0).abs() < 1e-12);
        let clipped: f64 = grads
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        assert!((clipped - 1.0).abs() < 1e-12);
        // under the bound: untouched
        let mut small = vec![Some(vec![0.3])];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0].as_ref().unwrap()[0], 0.3);
    }

    #[test]
    fn schedule_hits_the_pinned_values_and_stays_continuous() {
        let cfg = TrainConfig::default();
        assert!((lr_schedule(0, 0.0, &cfg) - 6e-5).abs() < 1e-18);
        assert!((lr_schedule(5, 0.0, &cfg) - 6e-4).abs() < 1e-18);
        assert_eq!(lr_schedule(100, 0.0, &cfg), 0.0);
        // continuity at the warmup boundary
        let left = lr_schedule(4, 0.999_999, &cfg);
        let right = lr_schedule(5, 0.0, &cfg);
        assert!((left - right).abs() < 1e-8);
        // piecewise linearity at interior points
        let mid_warm = lr_schedule(2, 0.5, &cfg);
        assert!((mid_warm - (6e-5 + (6e-4 - 6e-5) * 2.5 / 5.0)).abs() < 1e-18);
        let mid_decay = lr_schedule(52, 0.5, &cfg);
        assert!((mid_decay - 6e-4 * (100.0 - 52.5) / 95.0).abs() < 1e-18);
    }

    #[test]
    fn identical_seeds_reproduce_the_metric_log_bitwise() {
        let sc = tiny_synth();
        let cfg = TrainConfig {
            batch_size: 8,
            max_epochs: 3,
            warmup_epochs: 1,
            seed: 11,
            precision: Precision::F64,
            ..TrainConfig::default()
        };
        let run = || {
            let mut model = tiny_model(5);
            train(&mut model, &DataSource::Synthetic(&sc), &cfg).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.log.len(), b.log.len());
        for (x, y) in a.log.iter().zip(&b.log) {
            assert_eq!(x.deterministic_bits(), y.deterministic_bits());
        }
        assert_eq!(a.best_epoch, b.best_epoch);
        assert!(a.log.iter().all(|r| {
            r.train_mse.is_finite() && r.val_mse.is_finite() && r.val_mae.is_finite()
        }));
    }

    #[test]
    fn best_checkpoint_never_trails_the_logged_minimum() {
        let sc = tiny_synth();
        let cfg = TrainConfig {
            batch_size: 8,
            max_epochs: 4,
            warmup_epochs: 1,
            seed: 3,
            precision: Precision::F64,
            ..TrainConfig::default()
        };
        let mut model = tiny_model(5);
        let out = train(&mut model, &DataSource::Synthetic(&sc), &cfg).unwrap();
        let min = out.log.iter().map(|r| r.val_mse).fold(f64::INFINITY, f64::min);
        assert_eq!(out.best_val_mse, min);
        // the restored weights rescore to the recorded best
        let val: Vec<(Vec<f64>, Vec<f64>)> = (0..synth_val_count(sc.examples_per_epoch) as u64)
            .map(|i| {
                let ex = make_example(&sc, Split::Val, i).unwrap();
                (ex.input, ex.target)
            })
            .collect();
        let views: Vec<(&[f64], &[f64])> = val.iter().map(|(a, b)| (&a[..], &b[..])).collect();
        let (mse, _) = evaluate(&model, &views, 8).unwrap();
        assert!((mse - out.best_val_mse).abs() < 1e-12);
    }

    #[test]
    fn frozen_learning_rate_exhausts_patience_early() {
        let sc = tiny_synth();
        let cfg = TrainConfig {
            batch_size: 8,
            max_epochs: 50,
            patience: 2,
            lr_warmup_start: 0.0,
            lr_peak: 0.0,
            warmup_epochs: 1,
            seed: 0,
            precision: Precision::F64,
            ..TrainConfig::default()
        };
        let mut model = tiny_model(5);
        // zero dropout so the weights (and thus val) never move
        model.cfg.stack.dropout = 0.0;
        let out = train(&mut model, &DataSource::Synthetic(&sc), &cfg).unwrap();
        assert_eq!(out.log.len(), 3, "epoch 0 best + 2 stale epochs");
        assert_eq!(out.best_epoch, 0);
    }

    #[test]
    fn exploding_outputs_abort_as_divergence() {
        let sc = tiny_synth();
        let cfg = TrainConfig {
            batch_size: 8,
            max_epochs: 2,
            warmup_epochs: 1,
            precision: Precision::F64,
            ..TrainConfig::default()
        };
        let mut model = tiny_model(5);
        for v in model.vault.get_mut("tok.w_out").unwrap().value.iter_mut() {
            *v *= 1e8;
        }
        let err = train(&mut model, &DataSource::Synthetic(&sc), &cfg).unwrap_err();
        assert!(matches!(err, TrainError::Diverged { .. }), "{err}");
    }

    #[test]
    fn windowed_source_trains_and_scores() {
        // a short standardized split: 1 channel, linear ramp
        let rows = 26;
        let split = SplitView {
            values: (0..rows).map(|i| (i as f64) / 10.0).collect(),
            rows,
            channels: 1,
        };
        let mut cfg = ModelConfig::new(Variant::Samovar, 1, 8, 2);
        cfg.stack.layers = 1;
        cfg.stack.model_dim = 8;
        cfg.stack.heads = 2;
        let mut model: Model<f64> = Model::new(cfg, 9).unwrap();
        let tc = TrainConfig {
            batch_size: 4,
            max_epochs: 2,
            warmup_epochs: 1,
            precision: Precision::F64,
            ..TrainConfig::default()
        };
        let data = DataSource::Windows { train: &split, val: &split, stride: 2 };
        let out = train(&mut model, &data, &tc).unwrap();
        assert_eq!(out.log.len(), 2);
        assert!(out.log.iter().all(|r| r.val_mse.is_finite()));
    }

    #[test]
    fn repeat_last_is_exact_on_patch_periodic_data() {
        // input whose last patch equals the continuation
        let input: Vec<f64> = vec![9.0, 8.0, 1.0, 2.0];
        let target = vec![1.0, 2.0];
        let (mse, mae) = repeat_last_baseline(&[(&input, &target)], 1, 2).unwrap();
        assert_eq!((mse, mae), (0.0, 0.0));
        // and the error is the literal step difference otherwise
        let target2 = vec![2.0, 4.0];
        let (mse2, mae2) = repeat_last_baseline(&[(&input, &target2)], 1, 2).unwrap();
        assert!((mse2 - (1.0 + 4.0) / 2.0).abs() < 1e-15);
        assert!((mae2 - 1.5).abs() < 1e-15);
    }

    #[test]
    fn schedule_validation_rejects_warmup_past_the_end() {
        let cfg = TrainConfig { warmup_epochs: 100, ..TrainConfig::default() };
        assert!(cfg.validate().is_err());
    }

    /// On-demand wall-clock probe at the synthetic-benchmark scale; run with
    /// `--ignored` when budgeting long jobs.
    #[test]
    #[ignore]
    fn timing_probe_synthetic_epoch() {
        let sc = SynthConfig { examples_per_epoch: 512, ..SynthConfig::default() };
        let mut cfg = ModelConfig::new(Variant::Samovar, sc.channels, sc.input_len, sc.pred_len);
        cfg.stack.heads = 2;
        let mut model: Model<f32> = Model::new(cfg, 0).unwrap();
        let tc = TrainConfig { max_epochs: 2, warmup_epochs: 1, ..TrainConfig::default() };
        let t0 = std::time::Instant::now();
        let out = train(&mut model, &DataSource::Synthetic(&sc), &tc).unwrap();
        let dt = t0.elapsed().as_secs_f64();
        eprintln!(
            "{}-example epoch, d={} layers={}: {:.2}s/epoch ({} epochs, {:.1}s total)",
            sc.examples_per_epoch,
            model.cfg.stack.model_dim,
            model.cfg.stack.layers,
            dt / out.log.len() as f64,
            out.log.len(),
            dt
        );
    }
}
