//! Temporary reduced-scale rehearsal of the expensive acceptance criteria.
//! Prints directions; asserts nothing beyond "it runs".

use std::time::Instant;

use samovar::attn_stack::Variant;
use samovar::ingest::{split_and_standardize, window_sampler, Dataset, SplitSpec};
use samovar::interpret::{lintrans_attention, HeatmapAnalysis};
use samovar::model::{Model, ModelConfig};
use samovar::synth_bench::{make_example, Split, SynthConfig};
use samovar::train_eval::{
    evaluate, repeat_last_baseline, train, DataSource, Precision, TrainConfig,
};
use samovar::var_math::ground_truth_contributions;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn bench_cfg(variant: Variant) -> ModelConfig {
    let mut cfg = ModelConfig::new(variant, 2, 64, 1);
    cfg.stack.heads = 2;
    cfg
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut out = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va.sqrt() * vb.sqrt())
    }
}

#[test]
fn smoke_bench_and_heatmap() {
    let synth = SynthConfig { examples_per_epoch: 2048, ..SynthConfig::default() };
    let mut sam_model = None;
    let mut lin_model = None;
    for variant in [Variant::Samovar, Variant::FixedVar, Variant::LinTrans] {
        let t0 = Instant::now();
        let tc = TrainConfig { max_epochs: 6, seed: 0, precision: Precision::F32, ..Default::default() };
        let mut model = Model::<f32>::new(bench_cfg(variant), 0).unwrap();
        let out = train(&mut model, &DataSource::Synthetic(&synth), &tc).unwrap();
        let last = out.log.last().unwrap();
        eprintln!(
            "[smoke bench] {}: best val {:.4e} (epoch {}), last train {:.4e} / val {:.4e}, {:.0}s",
            variant.name(),
            out.best_val_mse,
            out.best_epoch,
            last.train_mse,
            last.val_mse,
            t0.elapsed().as_secs_f64()
        );
        match variant {
            Variant::Samovar => sam_model = Some(model),
            Variant::LinTrans => lin_model = Some(model),
            _ => {}
        }
    }

    // heatmap-vs-attention rehearsal (criterion 6 plumbing)
    let sam = sam_model.unwrap();
    let lin = lin_model.unwrap();
    let (channels, steps) = (2usize, 64usize);
    let t_len = 2 * steps;
    let max_lag = 8usize;
    let band = 2 * max_lag + 1;
    let mut wins = 0;
    for i in 0..16u64 {
        let ex = make_example(&synth, Split::Val, i).unwrap();
        let truth = ground_truth_contributions(&ex.process, steps + 1);
        let x1 = sam.stack_input(&ex.input).unwrap();
        let analysis =
            HeatmapAnalysis::new(&sam.cfg.stack, &sam.vault, &x1, channels, t_len, Some(band))
                .unwrap();
        let tm = analysis.time_map().unwrap();
        let c2 = channels * channels;
        let xl = lin.stack_input(&ex.input).unwrap();
        let att = lintrans_attention(&lin.cfg.stack, &lin.vault, &xl, channels, t_len).unwrap();
        let (mut ms, mut ls, mut gs) = (Vec::new(), Vec::new(), Vec::new());
        for tau in 0..steps {
            let t = tau + 1;
            if t > steps {
                continue;
            }
            for sigma in tau.saturating_sub(max_lag - 1)..=tau {
                let mut m = 0.0;
                for k in 0..c2 {
                    m += tm.weights[(tau * steps + sigma) * c2 + k].abs();
                }
                ms.push(m / c2 as f64);
                let mut l = 0.0;
                for c in 0..channels {
                    let row = (c * t_len + 2 * tau + 1) * t_len;
                    l += att[row + 2 * sigma] + att[row + 2 * sigma + 1];
                }
                ls.push(l / channels as f64);
                let block = truth.block(t, sigma);
                gs.push(block.iter().map(|v| v.abs()).sum::<f64>() / c2 as f64);
            }
        }
        let (rho_m, rho_l) = (spearman(&ms, &gs), spearman(&ls, &gs));
        if rho_m > rho_l {
            wins += 1;
        }
        eprintln!("[smoke heatmap] window {i}: var ρ {rho_m:+.3} vs att ρ {rho_l:+.3}");
    }
    eprintln!("[smoke heatmap] wins {wins}/16");
}

#[test]
fn smoke_determinism() {
    let synth = SynthConfig { examples_per_epoch: 256, ..SynthConfig::default() };
    let run = || {
        let tc = TrainConfig { max_epochs: 2, seed: 0, precision: Precision::F64, ..Default::default() };
        let mut model = Model::<f64>::new(bench_cfg(Variant::Samovar), 0).unwrap();
        train(&mut model, &DataSource::Synthetic(&synth), &tc).unwrap()
    };
    let (a, b) = (run(), run());
    let same = a.log.len() == b.log.len()
        && a.log
            .iter()
            .zip(&b.log)
            .all(|(x, y)| x.deterministic_bits() == y.deterministic_bits());
    eprintln!("[smoke determinism] logs bitwise equal: {same}");
}

#[test]
fn smoke_hourly() {
    // shrunken copy of the hourly generator (2910 fewer rows for speed)
    let rows = 7000usize;
    let c = 7usize;
    let mut r = ChaCha8Rng::seed_from_u64(0x0E77);
    let tau = std::f64::consts::TAU;
    let mut base = vec![0.0_f64; rows * c];
    for ch in 0..c - 1 {
        let a_day = r.gen_range(0.6..1.2);
        let a_week = r.gen_range(0.8..1.4);
        let p_day = r.gen_range(0.0..tau);
        let p_week = r.gen_range(0.0..tau);
        let slope = r.gen_range(-1.0..1.0) * 1.5 / rows as f64;
        let mut ar = 0.0_f64;
        for t in 0..rows {
            ar = 0.9 * ar + 0.35 * r.gen_range(-1.0..1.0);
            let mod_day = 1.0 + 0.3 * (tau * t as f64 / 2000.0).sin();
            base[t * c + ch] = a_day * mod_day * (tau * t as f64 / 24.0 + p_day).sin()
                + a_week * (tau * t as f64 / 168.0 + p_week).sin()
                + slope * t as f64
                + ar
                + 0.05 * r.gen_range(-1.0..1.0);
        }
    }
    let mut ar = 0.0_f64;
    for t in 0..rows {
        ar = 0.85 * ar + 0.25 * r.gen_range(-1.0..1.0);
        let lag24 = if t >= 24 { base[(t - 24) * c] } else { 0.0 };
        let lag1 = if t >= 1 { base[(t - 1) * c + 1] } else { 0.0 };
        base[t * c + c - 1] = 0.4 * lag24
            + 0.3 * lag1
            + 0.5 * (tau * t as f64 / 24.0 + 1.0).sin()
            + ar
            + 0.05 * r.gen_range(-1.0..1.0);
    }
    let ds = Dataset {
        name: "smoke-hourly".into(),
        values: base,
        rows,
        channels: c,
        timestamps: None,
        channel_names: (0..c).map(|i| format!("ch{i}")).collect(),
    };
    let splits = split_and_standardize(&ds, &SplitSpec::default()).unwrap();
    let (input_len, pred_len, stride) = (512usize, 96usize, 32usize);
    let mut mses = Vec::new();
    for variant in [Variant::Samovar, Variant::FixedVar] {
        let cfg = ModelConfig::new(variant, 7, input_len, pred_len);
        let tc = TrainConfig { max_epochs: 6, seed: 0, precision: Precision::F32, ..Default::default() };
        let mut model = Model::<f32>::new(cfg, 0).unwrap();
        let t0 = Instant::now();
        let source = DataSource::Windows { train: &splits.train, val: &splits.val, stride };
        let out = train(&mut model, &source, &tc).unwrap();
        let test_windows: Vec<(&[f64], &[f64])> =
            window_sampler(&splits.test, input_len, pred_len, stride).unwrap().collect();
        let (mse, _) = evaluate(&model, &test_windows, tc.batch_size).unwrap();
        eprintln!(
            "[smoke hourly] {}: test mse {:.4e} over {} windows ({} epochs, {:.0}s)",
            variant.name(),
            mse,
            test_windows.len(),
            out.log.len(),
            t0.elapsed().as_secs_f64()
        );
        mses.push(mse);
    }
    let test_windows: Vec<(&[f64], &[f64])> =
        window_sampler(&splits.test, input_len, pred_len, stride).unwrap().collect();
    let (naive, _) = repeat_last_baseline(&test_windows, 7, pred_len).unwrap();
    eprintln!(
        "[smoke hourly] repeat-last {naive:.4e}; samovar margin {:.1}% (need ≥ 15), beats fixed: {}",
        (1.0 - mses[0] / naive) * 100.0,
        mses[0] < mses[1]
    );
}
