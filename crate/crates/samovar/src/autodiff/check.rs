//! Finite-difference gradient oracle.
//!
//! [`finite_diff_check`] rebuilds a user-supplied scalar function from scratch
//! for every probe, so it is meant for small problem sizes. It runs entirely
//! at `f64`: central differences with the default `h = 1e-5` resolve roughly
//! ten significant digits, which is far tighter than any tolerance used by
//! the tests that rely on it.

use super::{Graph, Tensor, TensorError};

/// Worst-case deviation between reverse-mode and central-difference gradients.
#[derive(Debug, Clone, Copy)]
pub struct FdReport {
    /// max over coordinates of |ad - fd| / (|fd| + eps)
    pub max_rel_err: f64,
    /// max over coordinates of |ad - fd|
    pub max_abs_err: f64,
    /// number of coordinates compared
    pub compared: usize,
}

/// Compare reverse-mode gradients of `f` against central differences.
///
/// `inputs` are `(values, shape)` pairs; each becomes a differentiable leaf
/// passed to `f` in order. `f` must return a scalar tensor and must be
/// deterministic: it is evaluated twice on the unperturbed inputs and any
/// bitwise disagreement aborts the check with [`TensorError::OracleInvalid`],
/// since finite differences of a noisy function certify nothing.
///
/// Relative error uses an `eps` guard in the denominator so near-zero true
/// gradients do not blow up the ratio. Zero-size inputs are fine; with no
/// coordinates to probe the report comes back with `compared == 0` and zero
/// errors.
pub fn finite_diff_check<F>(
    inputs: &[(Vec<f64>, Vec<usize>)],
    h: f64,
    eps: f64,
    f: F,
) -> Result<FdReport, TensorError>
where
    F: Fn(&Graph<f64>, &[Tensor<f64>]) -> Result<Tensor<f64>, TensorError>,
{
    if !(h > 0.0) || !(eps > 0.0) {
        return Err(TensorError::InvalidArgument {
            op: "finite_diff_check",
            msg: format!("step {h} and guard {eps} must be positive"),
        });
    }
    let eval = |probe: &[(Vec<f64>, Vec<usize>)]| -> Result<f64, TensorError> {
        let g = Graph::new();
        let leaves: Vec<Tensor<f64>> = probe
            .iter()
            .map(|(v, s)| g.leaf(v.clone(), s))
            .collect::<Result<_, _>>()?;
        f(&g, &leaves)?.item()
    };

    let base = eval(inputs)?;
    let again = eval(inputs)?;
    if base.to_bits() != again.to_bits() {
        return Err(TensorError::OracleInvalid(format!(
            "function is not deterministic: {base:?} vs {again:?} on identical inputs"
        )));
    }

    // Reverse-mode gradients on one fresh tape.
    let g = Graph::new();
    let leaves: Vec<Tensor<f64>> = inputs
        .iter()
        .map(|(v, s)| g.leaf(v.clone(), s))
        .collect::<Result<_, _>>()?;
    let loss = f(&g, &leaves)?;
    loss.backward()?;
    let ad_grads: Vec<Vec<f64>> = leaves
        .iter()
        .zip(inputs)
        .map(|(t, (v, _))| t.grad().unwrap_or_else(|| vec![0.0; v.len()]))
        .collect();

    let mut report = FdReport { max_rel_err: 0.0, max_abs_err: 0.0, compared: 0 };
    let mut probe = inputs.to_vec();
    for (ti, (values, _)) in inputs.iter().enumerate() {
        for ci in 0..values.len() {
            let orig = probe[ti].0[ci];
            probe[ti].0[ci] = orig + h;
            let up = eval(&probe)?;
            probe[ti].0[ci] = orig - h;
            let down = eval(&probe)?;
            probe[ti].0[ci] = orig;
            let fd = (up - down) / (2.0 * h);
            let ad = ad_grads[ti][ci];
            let abs = (ad - fd).abs();
            let rel = abs / (fd.abs() + eps);
            report.max_abs_err = report.max_abs_err.max(abs);
            report.max_rel_err = report.max_rel_err.max(rel);
            report.compared += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const H: f64 = 1e-5;
    const EPS: f64 = 1e-6;
    const TOL: f64 = 1e-6;

    fn rand_vals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()
    }

    #[test]
    fn sum_of_squares_gradient_is_near_exact() {
        let inputs = vec![(vec![0.3, -1.2, 2.5, 0.0], vec![4])];
        let r = finite_diff_check(&inputs, H, EPS, |_, xs| xs[0].mul(&xs[0])?.sum_all()).unwrap();
        assert_eq!(r.compared, 4);
        assert!(r.max_rel_err < 1e-8, "{r:?}");
    }

    #[test]
    fn zero_size_input_passes_vacuously() {
        let inputs = vec![(vec![], vec![0, 3])];
        let r = finite_diff_check(&inputs, H, EPS, |g, xs| {
            let pad = g.constant(vec![1.0], &[1])?;
            xs[0].sum_all()?.add(&pad)?.sum_all()
        })
        .unwrap();
        assert_eq!(r.compared, 0);
        assert_eq!(r.max_rel_err, 0.0);
    }

    #[test]
    fn nondeterministic_function_is_rejected() {
        use std::cell::Cell;
        let calls = Cell::new(0.0f64);
        let inputs = vec![(vec![1.0], vec![1])];
        let err = finite_diff_check(&inputs, H, EPS, |_, xs| {
            calls.set(calls.get() + 1.0);
            xs[0].add_scalar(calls.get())?.sum_all()
        })
        .unwrap_err();
        assert!(matches!(err, TensorError::OracleInvalid(_)), "{err}");
    }

    #[test]
    fn elementwise_and_broadcast_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let a = rand_vals(&mut rng, 6);
        let b = rand_vals(&mut rng, 3);
        let inputs = vec![(a, vec![2, 3]), (b, vec![3])];
        // mix add/sub/mul/div with broadcasting and scalars
        let r = finite_diff_check(&inputs, H, EPS, |_, xs| {
            let d = xs[1].add_scalar(4.0)?; // keep divisor away from zero
            xs[0]
                .mul(&xs[1])?
                .add(&xs[0])?
                .sub(&xs[1])?
                .div(&d)?
                .scale(1.7)?
                .sum_all()
        })
        .unwrap();
        assert!(r.max_rel_err < TOL, "{r:?}");
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for (ashape, bshape, tb) in [
            (vec![3, 4], vec![4, 2], false),
            (vec![3, 4], vec![2, 4], true),
            (vec![2, 3, 4], vec![4, 5], false),
            (vec![2, 3, 4], vec![2, 5, 4], true),
            (vec![2, 1, 3, 4], vec![1, 5, 4, 2], false),
        ] {
            let a = rand_vals(&mut rng, ashape.iter().product());
            let b = rand_vals(&mut rng, bshape.iter().product());
            let inputs = vec![(a, ashape.clone()), (b, bshape.clone())];
            let r = finite_diff_check(&inputs, H, EPS, |_, xs| {
                let y = if tb { xs[0].matmul_t(&xs[1]) } else { xs[0].matmul(&xs[1]) }?;
                // square to exercise nonlinear composition past the matmul
                y.mul(&y)?.sum_all()
            })
            .unwrap();
            assert!(r.max_rel_err < TOL, "shapes {ashape:?} x {bshape:?} tb={tb}: {r:?}");
        }
    }

    #[test]
    fn cumsum_reshape_permute_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let a = rand_vals(&mut rng, 24);
        let inputs = vec![(a, vec![2, 3, 4])];
        let r = finite_diff_check(&inputs, H, EPS, |_, xs| {
            let y = xs[0].cumsum(1)?.permute(&[2, 0, 1])?.reshape(&[4, 6])?;
            y.mul(&y)?.sum_all()
        })
        .unwrap();
        assert!(r.max_rel_err < TOL, "{r:?}");
    }

    #[test]
    fn gather_scatter_concat_slice_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let a = rand_vals(&mut rng, 12);
        let b = rand_vals(&mut rng, 4);
        let inputs = vec![(a, vec![3, 4]), (b, vec![1, 4])];
        let r = finite_diff_check(&inputs, H, EPS, |g, xs| {
            let picked = xs[0].index_select(0, &[2, 0, 2])?; // repeated index
            let cat = Graph::concat(&[picked, xs[1].clone()], 0)?;
            let cut = cat.slice(0, 1, 3)?;
            let emb = xs[1].reshape(&[4])?.embed(&[2, 3], &[4, 1, 3, 0])?;
            let joined = Graph::concat(&[cut.reshape(&[12])?, emb.reshape(&[6])?], 0)?;
            let _ = g;
            joined.mul(&joined)?.sum_all()
        })
        .unwrap();
        assert!(r.max_rel_err < TOL, "{r:?}");
    }

    #[test]
    fn reduction_and_activation_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let a = rand_vals(&mut rng, 12);
        let inputs = vec![(a, vec![3, 4])];
        let r = finite_diff_check(&inputs, H, EPS, |_, xs| {
            let sp = xs[0].softplus()?;
            let ge = xs[0].gelu()?;
            let sq = xs[0].mul(&xs[0])?.add_scalar(0.5)?.sqrt()?;
            sp.add(&ge)?.add(&sq)?.sum_axis(1)?.mul(&xs[0].sum_axis(1)?)?.mean_all()
        })
        .unwrap();
        assert!(r.max_rel_err < TOL, "{r:?}");
    }

    #[test]
    fn norm_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        let x = rand_vals(&mut rng, 10);
        let gain = rand_vals(&mut rng, 5);
        let inputs = vec![(x, vec![2, 5]), (gain, vec![5])];
        for center in [false, true] {
            let r = finite_diff_check(&inputs, H, EPS, |_, xs| {
                let y = if center {
                    xs[0].layer_norm(&xs[1], 1e-5)
                } else {
                    xs[0].rms_norm(&xs[1], 1e-5)
                }?;
                y.mul(&y)?.sum_all()
            })
            .unwrap();
            assert!(r.max_rel_err < TOL, "center={center}: {r:?}");
        }
    }

    #[test]
    fn tri_solve_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let n = 3;
        // well-conditioned triangle: unit-ish diagonal plus small off-diagonal
        let mut t = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                t[i * n + j] = if i == j {
                    1.5 + 0.3 * i as f64
                } else {
                    rng.gen_range(-0.4..0.4)
                };
            }
        }
        let b = rand_vals(&mut rng, n * 2);
        for (lower, unit) in [(true, false), (false, false), (true, true), (false, true)] {
            let inputs = vec![(t.clone(), vec![n, n]), (b.clone(), vec![n, 2])];
            let r = finite_diff_check(&inputs, H, EPS, |_, xs| {
                let y = xs[0].tri_solve(&xs[1], lower, unit)?;
                y.mul(&y)?.sum_all()
            })
            .unwrap();
            assert!(r.max_rel_err < TOL, "lower={lower} unit={unit}: {r:?}");
        }
        // batched with broadcast over T
        let tb: Vec<f64> = t.clone();
        let bb = rand_vals(&mut rng, 2 * n * 2);
        let inputs = vec![(tb, vec![n, n]), (bb, vec![2, n, 2])];
        let r = finite_diff_check(&inputs, H, EPS, |_, xs| {
            let y = xs[0].tri_solve(&xs[1], true, false)?;
            y.mul(&y)?.sum_all()
        })
        .unwrap();
        assert!(r.max_rel_err < TOL, "batched: {r:?}");
    }

    #[test]
    fn dropout_gradient_is_the_stored_mask() {
        // deterministic given the seed, so FD and AD agree through the mask
        let mut rng = ChaCha8Rng::seed_from_u64(48);
        let a = rand_vals(&mut rng, 8);
        let inputs = vec![(a, vec![8])];
        let r = finite_diff_check(&inputs, H, EPS, |_, xs| {
            let mut mask_rng = ChaCha8Rng::seed_from_u64(99);
            xs[0].dropout(0.5, &mut mask_rng)?.mul(&xs[0])?.sum_all()
        })
        .unwrap();
        assert!(r.max_rel_err < TOL, "{r:?}");
    }

    #[test]
    fn deep_composition_gradient_matches_finite_differences() {
        // a miniature residual block: x + W2·gelu(W1·norm(x))
        let mut rng = ChaCha8Rng::seed_from_u64(49);
        let x = rand_vals(&mut rng, 8);
        let w1 = rand_vals(&mut rng, 16);
        let w2 = rand_vals(&mut rng, 16);
        let gain = rand_vals(&mut rng, 4);
        let inputs = vec![
            (x, vec![2, 4]),
            (w1, vec![4, 4]),
            (w2, vec![4, 4]),
            (gain, vec![4]),
        ];
        let r = finite_diff_check(&inputs, H, EPS, |_, xs| {
            let h = xs[0].rms_norm(&xs[3], 1e-5)?.matmul(&xs[1])?.gelu()?.matmul(&xs[2])?;
            let y = xs[0].add(&h)?;
            y.mul(&y)?.mean_all()
        })
        .unwrap();
        assert!(r.max_rel_err < TOL, "{r:?}");
    }
}
