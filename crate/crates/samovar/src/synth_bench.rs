//! Synthetic VAR forecasting benchmark: streams of (input, target) windows,
//! each drawn from a freshly sampled random stable VAR process. The training
//! split uses short lags with wide coefficients; the validation split uses
//! longer lags with tighter coefficients, so doing well on validation means
//! generalizing across process families rather than memorizing one.
//!
//! Examples are keyed by `(seed, split, index)`: regenerating any index is
//! bitwise identical, independent of iteration order.

use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use rand_chacha::ChaCha8Rng;

use crate::var_math::{sample_var_process, simulate, VarError, VarProcess};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub channels: usize,
    pub input_len: usize,
    pub pred_len: usize,
    pub train_lags: Vec<usize>,
    pub train_range: (f64, f64),
    pub val_lags: Vec<usize>,
    pub val_range: (f64, f64),
    pub examples_per_epoch: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            channels: 2,
            input_len: 64,
            pred_len: 1,
            train_lags: vec![1, 2, 3],
            train_range: (-0.5, 0.5),
            val_lags: vec![3, 4, 5],
            val_range: (-0.25, 0.25),
            examples_per_epoch: 8192,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

/// One forecasting example with its generating process attached (the process
/// is what recovered model weights are compared against).
#[derive(Debug, Clone)]
pub struct SynthExample {
    /// `input_len × C` row-major.
    pub input: Vec<f64>,
    /// `pred_len × C` row-major, the immediate continuation of `input`.
    pub target: Vec<f64>,
    pub process: VarProcess,
    /// RNG seed this example was generated from.
    pub seed: u64,
}

/// Number of leading simulation steps discarded before the window starts.
pub const BURN_IN: usize = 50;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Seed for example `index` of `split`; stable across platforms and
/// independent of generation order.
pub fn example_seed(cfg_seed: u64, split: Split, index: u64) -> u64 {
    let tag = match split {
        Split::Train => 0x7472u64,
        Split::Val => 0x76616cu64,
    };
    splitmix(cfg_seed ^ splitmix(tag ^ splitmix(index)))
}

fn validate(cfg: &SynthConfig) -> Result<(), VarError> {
    if cfg.channels == 0 || cfg.input_len == 0 || cfg.pred_len == 0 {
        return Err(VarError::Invalid("channels, input_len, pred_len must be positive".into()));
    }
    if cfg.input_len % cfg.pred_len != 0 {
        return Err(VarError::Invalid(format!(
            "input_len {} must be divisible by pred_len {}",
            cfg.input_len, cfg.pred_len
        )));
    }
    Ok(())
}

/// Simulate one window pair from an already-sampled process.
pub fn example_from_process(
    proc: &VarProcess,
    rng: &mut ChaCha8Rng,
    input_len: usize,
    pred_len: usize,
) -> Result<(Vec<f64>, Vec<f64>), VarError> {
    let series = simulate(proc, input_len + pred_len, rng, BURN_IN)?;
    let cut = input_len * proc.channels;
    let (input, target) = series.split_at(cut);
    Ok((input.to_vec(), target.to_vec()))
}

/// Generate example `index` of the given split: a fresh process from the
/// split's lag/coefficient distribution, simulated just long enough for one
/// input window and its continuation.
pub fn make_example(cfg: &SynthConfig, split: Split, index: u64) -> Result<SynthExample, VarError> {
    validate(cfg)?;
    let (lags, range) = match split {
        Split::Train => (&cfg.train_lags, cfg.train_range),
        Split::Val => (&cfg.val_lags, cfg.val_range),
    };
    let seed = example_seed(cfg.seed, split, index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let process = sample_var_process(&mut rng, lags, range, cfg.channels)?;
    let (input, target) = example_from_process(&process, &mut rng, cfg.input_len, cfg.pred_len)?;
    Ok(SynthExample { input, target, process, seed })
}

/// Iterator over `examples_per_epoch` examples of one split.
pub fn make_split(
    cfg: &SynthConfig,
    split: Split,
) -> impl Iterator<Item = Result<SynthExample, VarError>> + '_ {
    (0..cfg.examples_per_epoch as u64).map(move |i| make_example(cfg, split, i))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::var_math::VarProcess;

    #[test]
    fn train_split_draws_from_the_wide_short_lag_family() {
        let cfg = SynthConfig { examples_per_epoch: 30, ..SynthConfig::default() };
        for ex in make_split(&cfg, Split::Train) {
            let ex = ex.unwrap();
            assert!(cfg.train_lags.contains(&ex.process.p));
            assert!(ex.process.coeffs.iter().flatten().all(|&a| (-0.5..=0.5).contains(&a)));
            assert!(ex.process.stable);
            assert_eq!(ex.input.len(), 64 * 2);
            assert_eq!(ex.target.len(), 2);
        }
    }

    #[test]
    fn val_split_draws_from_the_tight_long_lag_family() {
        let cfg = SynthConfig { examples_per_epoch: 30, ..SynthConfig::default() };
        for ex in make_split(&cfg, Split::Val) {
            let ex = ex.unwrap();
            assert!(cfg.val_lags.contains(&ex.process.p));
            assert!(ex.process.coeffs.iter().flatten().all(|&a| (-0.25..=0.25).contains(&a)));
        }
    }

    #[test]
    fn same_seed_and_index_regenerate_bitwise_identical_examples() {
        let cfg = SynthConfig::default();
        let a = make_example(&cfg, Split::Train, 17).unwrap();
        let b = make_example(&cfg, Split::Train, 17).unwrap();
        assert_eq!(a.seed, b.seed);
        assert!(a.input.iter().zip(&b.input).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(a.target.iter().zip(&b.target).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(a.process.coeffs, b.process.coeffs);
        // different indices and splits decorrelate
        let c = make_example(&cfg, Split::Train, 18).unwrap();
        let d = make_example(&cfg, Split::Val, 17).unwrap();
        assert_ne!(a.input, c.input);
        assert_ne!(a.input, d.input);
    }

    #[test]
    fn target_is_the_one_step_continuation_of_the_input() {
        // With a strongly autocorrelated known process, the residual
        // target - Σ_m A_m·(input tail) is exactly the innovation: mean 0,
        // variance 1. A window misaligned by even one step inflates the
        // variance by ~Var(y)·‖A‖², far outside the band checked here.
        let proc =
            VarProcess::new(vec![vec![0.9, 0.0, 0.0, 0.9]], vec![1.0, 1.0]).unwrap();
        let mut residuals = Vec::new();
        for i in 0..500u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + i);
            let (input, target) = example_from_process(&proc, &mut rng, 64, 1).unwrap();
            for ch in 0..2 {
                residuals.push(target[ch] - 0.9 * input[63 * 2 + ch]);
            }
        }
        let n = residuals.len() as f64;
        let mean = residuals.iter().sum::<f64>() / n;
        let var = residuals.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 0.1, "residual mean {mean}");
        assert!((var - 1.0).abs() < 0.15, "residual variance {var}");
    }

    #[test]
    fn sampling_failure_propagates_from_the_stream() {
        let cfg = SynthConfig {
            train_range: (2.9, 3.0),
            train_lags: vec![1],
            examples_per_epoch: 1,
            ..SynthConfig::default()
        };
        let err = make_split(&cfg, Split::Train).next().unwrap().unwrap_err();
        assert!(err.to_string().contains("no stable process"), "{err}");
    }

    #[test]
    fn config_with_indivisible_window_is_rejected() {
        let cfg = SynthConfig { input_len: 64, pred_len: 3, ..SynthConfig::default() };
        assert!(make_example(&cfg, Split::Train, 0).is_err());
    }
}
