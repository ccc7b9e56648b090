//! Temporary diagnostic: is the frozen training caused by the degenerate
//! zero-embedding init point? Three identical short runs: standard init at
//! f32, jiggled init at f32, standard init at f64.

use std::io::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use samovar::attn_stack::Variant;
use samovar::autodiff::Scalar;
use samovar::model::{Model, ModelConfig};
use samovar::synth_bench::SynthConfig;
use samovar::train_eval::{train, DataSource, Precision, TrainConfig};

fn note(msg: &str) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{msg}");
}

fn bench_cfg() -> ModelConfig {
    let mut cfg = ModelConfig::new(Variant::Samovar, 2, 64, 1);
    cfg.stack.heads = 2;
    cfg
}

fn run<S: Scalar>(label: &str, jiggle: f64, precision: Precision) {
    let synth = SynthConfig { examples_per_epoch: 1024, ..SynthConfig::default() };
    let tc = TrainConfig {
        max_epochs: 6,
        warmup_epochs: 2,
        seed: 0,
        precision,
        ..Default::default()
    };
    let mut model = Model::<S>::new(bench_cfg(), 0).unwrap();
    if jiggle > 0.0 {
        let mut r = ChaCha8Rng::seed_from_u64(4242);
        let names: Vec<String> = model.vault.iter().map(|(n, _)| n.to_string()).collect();
        for name in &names {
            for v in &mut model.vault.get_mut(name).unwrap().value {
                *v = *v + S::from_f64(r.gen_range(-jiggle..jiggle));
            }
        }
    }
    let out = train(&mut model, &DataSource::Synthetic(&synth), &tc).unwrap();
    for rec in &out.log {
        note(&format!(
            "[{label}] epoch {}: train {:.4e} val {:.4e} lr {:.2e}",
            rec.epoch, rec.train_mse, rec.val_mse, rec.lr
        ));
    }
    note(&format!(
        "[{label}] best val {:.4e} at {}, skipped {}, max grad norm {:.3e}",
        out.best_val_mse, out.best_epoch, out.skipped_steps, out.max_grad_norm
    ));
}

#[test]
fn diag() {
    run::<f32>("A f32 standard", 0.0, Precision::F32);
    run::<f32>("B f32 jiggled", 0.02, Precision::F32);
    run::<f64>("C f64 standard", 0.0, Precision::F64);
}

#[test]
fn overfit_one_batch() {
    use samovar::attn_stack::Mode;
    use samovar::synth_bench::{make_example, Split};
    use samovar::train_eval::{adamw_step, AdamState};

    let synth = SynthConfig::default();
    let exs: Vec<_> = (0..8u64).map(|i| make_example(&synth, Split::Train, i).unwrap()).collect();
    let inputs: Vec<&[f64]> = exs.iter().map(|e| e.input.as_slice()).collect();
    let targets: Vec<&[f64]> = exs.iter().map(|e| e.target.as_slice()).collect();

    let mut model = Model::<f64>::new(bench_cfg(), 0).unwrap();
    let tc = TrainConfig { grad_clip: None, weight_decay: 0.0, ..Default::default() };
    let mut state = AdamState::new(&model.vault);
    let names: Vec<String> = model.vault.iter().map(|(n, _)| n.to_string()).collect();

    for step in 0..301 {
        let graph = model.forward(&inputs, Some(&targets), &mut Mode::Eval).unwrap();
        let loss_t = graph.loss.clone().unwrap();
        let loss = loss_t.item().unwrap();
        loss_t.backward().unwrap();
        let grads: Vec<Option<Vec<f64>>> = names
            .iter()
            .map(|n| graph.bound.get(n).ok().and_then(|t| t.grad()))
            .collect();
        if step == 0 {
            for (n, g) in names.iter().zip(&grads) {
                let norm = g
                    .as_ref()
                    .map(|g| g.iter().map(|v| v * v).sum::<f64>().sqrt())
                    .unwrap_or(0.0);
                note(&format!("[overfit] grad at init {n}: {norm:.3e}"));
            }
        }
        if step % 25 == 0 {
            note(&format!("[overfit] step {step}: loss {loss:.6e}"));
        }
        adamw_step(&mut model.vault, &grads, &mut state, 3e-3, &tc).unwrap();
    }
}

#[test]
fn weight_motion() {
    let synth = SynthConfig { examples_per_epoch: 512, ..SynthConfig::default() };
    let tc = TrainConfig {
        max_epochs: 3,
        warmup_epochs: 1,
        patience: 100,
        seed: 0,
        precision: Precision::F64,
        ..Default::default()
    };
    let mut model = Model::<f64>::new(bench_cfg(), 0).unwrap();
    let before: Vec<(String, Vec<f64>)> = model
        .vault
        .iter()
        .map(|(n, e)| (n.to_string(), e.value.clone()))
        .collect();
    let out = train(&mut model, &DataSource::Synthetic(&synth), &tc).unwrap();
    note(&format!(
        "[motion] best val {:.4e}, skipped {}, max grad norm {:.3e}",
        out.best_val_mse, out.skipped_steps, out.max_grad_norm
    ));
    for (name, old) in &before {
        let new = &model.vault.get(name).unwrap().value;
        let diff: f64 = new
            .iter()
            .zip(old)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let scale: f64 = old.iter().map(|v| v * v).sum::<f64>().sqrt();
        note(&format!(
            "[motion] {name}: ‖Δ‖ {diff:.3e}  ‖w₀‖ {scale:.3e}  ({} coords)",
            new.len()
        ));
    }
}
