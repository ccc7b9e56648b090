//! End-to-end forecaster assembly: raw multivariate window → patches → RevIN
//! → interleaved ARX tokens → variant stack → endogenous-token selection →
//! output normalization → patch projection → de-normalization. Every endo
//! token predicts the *next* patch of its channel, so training is
//! teacher-forced over all token positions while forecasting reads only the
//! last token's projection.

use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use rand_chacha::ChaCha8Rng;

use crate::attn_stack::{
    bind_fixedvar, bind_lintrans, bind_samovar, count_footprint, fixedvar_forward,
    lintrans_forward, mlp_front, register_stack, samovar_forward, Footprint, Mode, ModelError,
    StackConfig, Variant, NORM_EPS,
};
use crate::autodiff::{Graph, Scalar, Tensor};
use crate::params::{Bound, ParamVault};
use crate::tokenizer::{
    build_arx_tokens, endo_positions, patchify, revin_normalize, TokenizerConfig,
    TokenizerWeights,
};

type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub channels: usize,
    pub input_len: usize,
    /// Patch length; each endogenous token forecasts this many steps.
    pub pred_len: usize,
    pub whole_input_std: bool,
    pub stack: StackConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::new(Variant::Samovar, 2, 64, 1)
    }
}

impl ModelConfig {
    pub fn new(variant: Variant, channels: usize, input_len: usize, pred_len: usize) -> Self {
        ModelConfig {
            channels,
            input_len,
            pred_len,
            whole_input_std: true,
            stack: StackConfig::for_variant(variant, channels),
        }
    }

    pub fn n_patches(&self) -> usize {
        let pad = (self.pred_len - self.input_len % self.pred_len) % self.pred_len;
        (self.input_len + pad) / self.pred_len
    }

    pub fn tokenizer(&self) -> TokenizerConfig {
        TokenizerConfig {
            channels: self.channels,
            patch_len: self.pred_len,
            model_dim: self.stack.model_dim,
            whole_input_std: self.whole_input_std,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.input_len == 0 || self.pred_len == 0 {
            return Err(ModelError::Invalid(
                "channels, input_len, pred_len must be positive".into(),
            ));
        }
        self.stack.validate()
    }
}

/// A model is a configuration plus its parameter store; each step binds the
/// parameters into a fresh graph.
pub struct Model<S: Scalar> {
    pub cfg: ModelConfig,
    pub vault: ParamVault<S>,
}

/// One bound forward pass. `predictions` is `[B·C, N, L_P]` in the input's
/// units (RevIN-reversed); batch example `b`, channel `c` fold to row `b·C+c`.
pub struct StepGraph<S: Scalar> {
    pub graph: Graph<S>,
    pub bound: Bound<S>,
    pub predictions: Tensor<S>,
    /// Mean-squared teacher-forced error over all endo tokens (when targets
    /// were supplied).
    pub loss: Option<Tensor<S>>,
    pub batch: usize,
    pub channels: usize,
    pub n_patches: usize,
    pub pred_len: usize,
}

impl<S: Scalar> StepGraph<S> {
    /// Forecast from the last endogenous token of example `b`: `L_P×C`
    /// row-major, matching the dataset's window layout.
    pub fn forecast(&self, b: usize) -> Vec<f64> {
        let (c, n, lp) = (self.channels, self.n_patches, self.pred_len);
        let vals = self.predictions.value();
        let mut out = vec![0.0; lp * c];
        for ch in 0..c {
            let base = ((b * c + ch) * n + (n - 1)) * lp;
            for t in 0..lp {
                out[t * c + ch] = vals[base + t].to_f64();
            }
        }
        out
    }
}

impl<S: Scalar> Model<S> {
    /// Initialize all weights from the seed: tokenizer first, then the stack,
    /// in one deterministic draw order.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut vault = ParamVault::new();
        TokenizerWeights::register(&mut vault, &mut rng, &cfg.tokenizer(), cfg.n_patches())?;
        register_stack(&mut vault, &mut rng, &cfg.stack)?;
        Ok(Model { cfg, vault })
    }

    pub fn footprint(&self) -> Footprint {
        count_footprint(
            &self.cfg.stack,
            &self.vault,
            self.cfg.channels,
            self.cfg.n_patches(),
            self.cfg.pred_len,
        )
    }

    /// Re-instantiate with the same configuration at another precision.
    pub fn cast<T: Scalar>(&self) -> Model<T> {
        Model { cfg: self.cfg.clone(), vault: self.vault.cast() }
    }

    /// The stack's input signal for one window, dropout off: tokens after the
    /// front blocks (or the raw ARX tokens for the pre-norm Transformer
    /// variant), `[C, 2N, d]` row-major as `f64`. This is the signal the
    /// reconstructed VAR weights act on.
    pub fn stack_input(&self, input: &[f64]) -> Result<Vec<f64>> {
        let cfg = &self.cfg;
        if input.len() != cfg.input_len * cfg.channels {
            return Err(ModelError::Invalid(format!(
                "window holds {} values, expected {}×{}",
                input.len(),
                cfg.input_len,
                cfg.channels
            )));
        }
        let g = Graph::new();
        let bound = self.vault.bind_all(&g)?;
        let tok_w = TokenizerWeights::bind(&bound)?;
        let raw = patchify::<S>(input, cfg.input_len, cfg.channels, cfg.pred_len)
            .map_err(|e| ModelError::Invalid(e.to_string()))?;
        let p = revin_normalize(&raw, cfg.whole_input_std);
        let tb =
            build_arx_tokens(&g, &p, &tok_w).map_err(|e| ModelError::Invalid(e.to_string()))?;
        let x1 = match cfg.stack.variant {
            Variant::LinTrans => tb.tokens,
            Variant::Samovar => {
                let w = bind_samovar(&bound, &cfg.stack)?;
                mlp_front(&tb.tokens, &w.front, &mut Mode::Eval)?
            }
            Variant::FixedVar => {
                let w = bind_fixedvar(&bound, &cfg.stack)?;
                mlp_front(&tb.tokens, &w.front, &mut Mode::Eval)?
            }
        };
        Ok(x1.value().iter().map(|v| crate::autodiff::Scalar::to_f64(*v)).collect())
    }

    /// Run one batch. Each input is an `input_len×C` row-major window; each
    /// target, when training, is the `pred_len×C` continuation.
    pub fn forward(
        &self,
        inputs: &[&[f64]],
        targets: Option<&[&[f64]]>,
        mode: &mut Mode,
    ) -> Result<StepGraph<S>> {
        let cfg = &self.cfg;
        let (c, lp) = (cfg.channels, cfg.pred_len);
        let n = cfg.n_patches();
        let b = inputs.len();
        if b == 0 {
            return Err(ModelError::Invalid("empty batch".into()));
        }
        if let Some(t) = targets {
            if t.len() != b {
                return Err(ModelError::Invalid(format!(
                    "{} targets for {b} inputs",
                    t.len()
                )));
            }
        }
        let g = Graph::new();
        let bound = self.vault.bind_all(&g)?;
        let tok_w = TokenizerWeights::bind(&bound)?;

        let mut parts = Vec::with_capacity(b);
        let mut mean_all = Vec::with_capacity(b * c * n);
        let mut std_all = Vec::with_capacity(b * c * n);
        let mut raw_all = Vec::with_capacity(b);
        for (bi, input) in inputs.iter().enumerate() {
            if input.len() != cfg.input_len * c {
                return Err(ModelError::Invalid(format!(
                    "input {bi} holds {} values, expected {}×{c}",
                    input.len(),
                    cfg.input_len
                )));
            }
            let raw = patchify::<S>(input, cfg.input_len, c, lp)
                .map_err(|e| ModelError::Invalid(e.to_string()))?;
            let p = revin_normalize(&raw, cfg.whole_input_std);
            let tb = build_arx_tokens(&g, &p, &tok_w)
                .map_err(|e| ModelError::Invalid(e.to_string()))?;
            parts.push(tb.tokens);
            mean_all.extend(tb.mean);
            std_all.extend(tb.std);
            raw_all.push(raw.values);
        }
        let tokens = if b == 1 { parts.pop().unwrap() } else { Graph::concat(&parts, 0)? }; // [B·C, 2N, d]

        let stacked = match cfg.stack.variant {
            Variant::Samovar => {
                let w = bind_samovar(&bound, &cfg.stack)?;
                let x1 = mlp_front(&tokens, &w.front, mode)?;
                samovar_forward(&x1, &w, &cfg.stack, mode)?
            }
            Variant::LinTrans => {
                let w = bind_lintrans(&bound, &cfg.stack)?;
                lintrans_forward(&tokens, &w, &cfg.stack, mode)?
            }
            Variant::FixedVar => {
                let w = bind_fixedvar(&bound, &cfg.stack)?;
                let x1 = mlp_front(&tokens, &w.front, mode)?;
                fixedvar_forward(&x1, &w, &cfg.stack, mode)?
            }
        };
        let endo = stacked
            .index_select(1, &endo_positions(n))?
            .rms_norm(&bound.get("out.norm")?, S::from_f64(NORM_EPS))?;
        let predictions =
            crate::tokenizer::project_out(&endo, &tok_w.w_out, &mean_all, &std_all)
                .map_err(|e| ModelError::Invalid(e.to_string()))?;

        let loss = match targets {
            Some(tg) => {
                let mut tvals = Vec::with_capacity(b * c * n * lp);
                for (bi, raw) in raw_all.iter().enumerate() {
                    let future = tg[bi];
                    if future.len() != lp * c {
                        return Err(ModelError::Invalid(format!(
                            "target {bi} holds {} values, expected {lp}×{c}",
                            future.len()
                        )));
                    }
                    for ch in 0..c {
                        // next-patch targets: patches 1..N, then the continuation
                        let stream = &raw[ch * n * lp..(ch + 1) * n * lp];
                        tvals.extend_from_slice(&stream[lp..]);
                        for t in 0..lp {
                            tvals.push(S::from_f64(future[t * c + ch]));
                        }
                    }
                }
                let t = g.constant(tvals, &[b * c, n, lp])?;
                Some(predictions.sub(&t)?.square()?.mean_all()?)
            }
            None => None,
        };
        Ok(StepGraph {
            graph: g,
            bound,
            predictions,
            loss,
            batch: b,
            channels: c,
            n_patches: n,
            pred_len: lp,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn window(rows: usize, c: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..rows * c).map(|_| rng.gen_range(-2.0..2.0)).collect()
    }

    fn small_cfg(variant: Variant) -> ModelConfig {
        let mut cfg = ModelConfig::new(variant, 2, 12, 4);
        cfg.stack.layers = 2;
        cfg.stack.model_dim = 8;
        cfg.stack.heads = 2;
        cfg.stack.dropout = 0.0;
        cfg.stack.max_positions = 8;
        cfg
    }

    #[test]
    fn forward_shapes_and_loss_are_finite_for_every_variant() {
        for variant in [Variant::Samovar, Variant::LinTrans, Variant::FixedVar] {
            let model: Model<f64> = Model::new(small_cfg(variant), 1).unwrap();
            let w0 = window(12, 2, 2);
            let w1 = window(12, 2, 3);
            let t0 = window(4, 2, 4);
            let t1 = window(4, 2, 5);
            let step = model
                .forward(
                    &[&w0, &w1],
                    Some(&[&t0, &t1]),
                    &mut Mode::Eval,
                )
                .unwrap();
            assert_eq!(step.predictions.shape(), vec![4, 3, 4]);
            let loss = step.loss.as_ref().unwrap().item().unwrap();
            assert!(loss.is_finite() && loss > 0.0, "{variant:?}: {loss}");
            assert_eq!(step.forecast(1).len(), 8);
        }
    }

    #[test]
    fn teacher_forced_targets_line_up_with_the_next_patch() {
        // An input whose channel-0 values are 0,1,2,… makes each patch
        // recognizable; with W_out zeroed, predictions equal the stored token
        // means, so the loss can be computed by hand against next patches.
        let mut cfg = small_cfg(Variant::Samovar);
        cfg.channels = 1;
        let mut model: Model<f64> = Model::new(cfg, 6).unwrap();
        model.vault.get_mut("tok.w_out").unwrap().value.iter_mut().for_each(|v| *v = 0.0);
        let input: Vec<f64> = (0..12).map(f64::from).collect();
        let target = vec![20.0, 21.0, 22.0, 23.0];
        let step = model.forward(&[&input], Some(&[&target]), &mut Mode::Eval).unwrap();
        // patch means: (1.5, 5.5, 9.5); predictions are those means per step
        let expected: Vec<f64> = [
            [1.5; 4], // token 0 predicts patch 1 = [4,5,6,7]
            [5.5; 4], // token 1 predicts patch 2 = [8,9,10,11]
            [9.5; 4], // token 2 predicts the continuation 20..24
        ]
        .concat();
        assert_eq!(step.predictions.value(), expected);
        let targets: Vec<f64> = [[4.0, 5.0, 6.0, 7.0], [8.0, 9.0, 10.0, 11.0], [20.0, 21.0, 22.0, 23.0]].concat();
        let want: f64 =
            expected.iter().zip(&targets).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / 12.0;
        let got = step.loss.unwrap().item().unwrap();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn batch_forward_matches_single_example_forwards() {
        let model: Model<f64> = Model::new(small_cfg(Variant::Samovar), 7).unwrap();
        let w0 = window(12, 2, 8);
        let w1 = window(12, 2, 9);
        let both = model.forward(&[&w0, &w1], None, &mut Mode::Eval).unwrap();
        let solo0 = model.forward(&[&w0], None, &mut Mode::Eval).unwrap();
        let solo1 = model.forward(&[&w1], None, &mut Mode::Eval).unwrap();
        let combined: Vec<f64> = solo0
            .predictions
            .value()
            .into_iter()
            .chain(solo1.predictions.value())
            .collect();
        for (a, b) in both.predictions.value().iter().zip(&combined) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_gradients_reach_every_parameter_group() {
        let model: Model<f64> = Model::new(small_cfg(Variant::Samovar), 10).unwrap();
        let w0 = window(12, 2, 11);
        let t0 = window(4, 2, 12);
        let step = model.forward(&[&w0], Some(&[&t0]), &mut Mode::Eval).unwrap();
        step.loss.as_ref().unwrap().backward().unwrap();
        let mut missing = Vec::new();
        for (name, t) in step.bound.iter() {
            let g = t.grad();
            let nonzero = g.as_ref().is_some_and(|g| g.iter().any(|v| *v != 0.0));
            if !nonzero {
                missing.push(name.to_string());
            }
        }
        assert!(missing.is_empty(), "no gradient signal in: {missing:?}");
    }

    #[test]
    fn forecast_reads_the_last_token_block() {
        let model: Model<f64> = Model::new(small_cfg(Variant::LinTrans), 13).unwrap();
        let w0 = window(12, 2, 14);
        let step = model.forward(&[&w0], None, &mut Mode::Eval).unwrap();
        let fc = step.forecast(0);
        let vals = step.predictions.value();
        let (n, lp) = (3, 4);
        for ch in 0..2 {
            for t in 0..lp {
                assert_eq!(fc[t * 2 + ch], vals[(ch * n + n - 1) * lp + t]);
            }
        }
    }

    #[test]
    fn mismatched_input_length_is_rejected() {
        let model: Model<f64> = Model::new(small_cfg(Variant::Samovar), 15).unwrap();
        let bad = window(11, 2, 16);
        assert!(model.forward(&[&bad], None, &mut Mode::Eval).is_err());
    }
}
