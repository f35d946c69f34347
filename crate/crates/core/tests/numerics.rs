use itemforge_core::numerics::{
    backward, checkpointed_backward, finite_diff_check, NumericsError, Tape, Tensor, Var,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

/// Central-difference check of `op` applied to a single parameter tensor,
/// reduced to a scalar with fixed random weights.
fn check_unary(shape: &[usize], seed: u64, op: impl Fn(&mut Tape<f64>, Var) -> Var) -> f64 {
    let theta = random(shape, seed, 1.0);
    let mut weights: Option<Tensor<f64>> = None;
    finite_diff_check(
        |t| {
            let mut tape = Tape::new();
            let p = tape.param(t.clone());
            let y = op(&mut tape, p);
            let w = weights
                .get_or_insert_with(|| random(tape.shape(y), seed + 1, 1.0))
                .clone();
            let loss = tape.weighted_sum(y, w).unwrap();
            let value = tape.value(loss).item().unwrap();
            let mut grads = backward(&mut tape, loss).unwrap();
            Ok((value, grads.take(p).unwrap()))
        },
        &theta,
        1e-5,
    )
    .unwrap()
}

#[test]
fn scalar_product_rule() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::new(&[1, 1], vec![3.0f64]).unwrap());
    let y = tape.param(Tensor::new(&[1, 1], vec![-2.5f64]).unwrap());
    let z = tape.matmul(x, y, false).unwrap();
    let loss = tape.weighted_sum(z, Tensor::full(&[1, 1], 1.0)).unwrap();
    let g = backward(&mut tape, loss).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[-2.5]);
    assert_eq!(g.get(y).unwrap().data(), &[3.0]);
}

#[test]
fn each_op_matches_finite_differences() {
    let tol = 1e-6;
    let cases: Vec<(&str, f64)> = vec![
        ("matmul", {
            let w = random(&[4, 3], 50, 1.0);
            check_unary(&[2, 5, 4], 1, move |t, p| {
                let w = t.param(w.clone());
                t.matmul(p, w, false).unwrap()
            })
        }),
        ("matmul weight side", {
            let x = random(&[6, 4], 51, 1.0);
            check_unary(&[4, 3], 2, move |t, p| {
                let x = t.constant(x.clone());
                t.matmul(x, p, false).unwrap()
            })
        }),
        ("matmul transposed", {
            let w = random(&[7, 4], 52, 1.0);
            check_unary(&[3, 4], 3, move |t, p| {
                let w = t.param(w.clone());
                t.matmul(p, w, true).unwrap()
            })
        }),
        ("matmul transposed weight side", {
            let x = random(&[3, 4], 53, 1.0);
            check_unary(&[7, 4], 4, move |t, p| {
                let x = t.constant(x.clone());
                t.matmul(x, p, true).unwrap()
            })
        }),
        ("batch_matmul", {
            let b = random(&[2, 3, 4, 5], 54, 1.0);
            check_unary(&[2, 3, 6, 4], 5, move |t, p| {
                let b = t.param(b.clone());
                t.batch_matmul(p, b, false).unwrap()
            })
        }),
        ("batch_matmul transposed rhs", {
            let a = random(&[2, 5, 4], 55, 1.0);
            check_unary(&[2, 6, 4], 6, move |t, p| {
                let a = t.constant(a.clone());
                t.batch_matmul(a, p, true).unwrap()
            })
        }),
        ("add", {
            let other = random(&[3, 4], 56, 1.0);
            check_unary(&[3, 4], 7, move |t, p| {
                let o = t.constant(other.clone());
                t.add(p, o).unwrap()
            })
        }),
        ("add_bias", {
            let x = random(&[5, 4], 57, 1.0);
            check_unary(&[4], 8, move |t, p| {
                let x = t.constant(x.clone());
                t.add_bias(x, p).unwrap()
            })
        }),
        ("scale", check_unary(&[3, 3], 9, |t, p| t.scale(p, 0.37).unwrap())),
        ("softmax last axis", check_unary(&[3, 5], 10, |t, p| t.softmax(p, 1).unwrap())),
        ("softmax middle axis", check_unary(&[2, 4, 3], 11, |t, p| t.softmax(p, 1).unwrap())),
        ("layer_norm input", {
            let g = random(&[6], 58, 1.0);
            let b = random(&[6], 59, 1.0);
            check_unary(&[4, 6], 12, move |t, p| {
                let g = t.constant(g.clone());
                let b = t.constant(b.clone());
                t.layer_norm(p, g, b, 1e-5).unwrap()
            })
        }),
        ("layer_norm gain", {
            let x = random(&[4, 6], 60, 1.0);
            let b = random(&[6], 61, 1.0);
            check_unary(&[6], 13, move |t, p| {
                let x = t.constant(x.clone());
                let b = t.constant(b.clone());
                t.layer_norm(x, p, b, 1e-5).unwrap()
            })
        }),
        ("gelu", check_unary(&[4, 5], 14, |t, p| t.gelu(p).unwrap())),
        ("embed_gather", check_unary(&[5, 3], 15, |t, p| {
            t.embed_gather(p, &[4, 0, 4, 2, 1, 4], &[2, 3]).unwrap()
        })),
        ("causal mask + softmax", check_unary(&[2, 4, 4], 16, |t, p| {
            let m = t.causal_mask_fill(p).unwrap();
            t.softmax(m, 2).unwrap()
        })),
        ("split/merge heads", check_unary(&[2, 3, 6], 17, |t, p| {
            let s = t.split_heads(p, 2).unwrap();
            let s = t.scale(s, 1.5).unwrap();
            t.merge_heads(s).unwrap()
        })),
        ("split heads alone", check_unary(&[2, 3, 6], 18, |t, p| t.split_heads(p, 3).unwrap())),
        ("dropout", check_unary(&[2, 3], 19, |t, p| {
            t.dropout(p, vec![2.0, 0.0, 2.0, 2.0, 0.0, 0.0]).unwrap()
        })),
        ("cross_entropy", check_unary(&[3, 2, 5], 20, |t, p| {
            let l = t.cross_entropy(p, &[0, 4, 2, 2, 1, 3]).unwrap();
            t.scale(l, 2.0).unwrap()
        })),
    ];
    for (name, err) in cases {
        assert!(err < tol, "{name}: max relative error {err:e}");
    }
}

#[test]
fn cross_entropy_gradient_is_softmax_minus_one_hot() {
    let logits = random(&[3, 4], 30, 2.0);
    let targets = [1u32, 3, 0];
    let mut tape = Tape::new();
    let l = tape.param(logits.clone());
    let loss = tape.cross_entropy(l, &targets).unwrap();
    let g = backward(&mut tape, loss).unwrap();
    let grad = g.get(l).unwrap();
    for r in 0..3 {
        let row = &logits.data()[r * 4..(r + 1) * 4];
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        for c in 0..4 {
            let onehot = if targets[r] as usize == c { 1.0 } else { 0.0 };
            let expected = (row[c].exp() / z - onehot) / 3.0;
            assert!((grad.data()[r * 4 + c] - expected).abs() < 1e-15);
        }
    }
}

#[test]
fn cross_entropy_analytic_values() {
    let mut tape = Tape::<f64>::new();
    let uniform = tape.constant(Tensor::zeros(&[2, 4]));
    let h = tape.cross_entropy(uniform, &[0, 3]).unwrap();
    assert!((tape.value(h).item().unwrap() - 4f64.ln()).abs() < 1e-15);
    assert!((tape.value(h).item().unwrap() - 1.386294).abs() < 1e-6);

    let confident = tape.constant(Tensor::new(&[1, 3], vec![0.0, 800.0, 0.0]).unwrap());
    let h = tape.cross_entropy(confident, &[1]).unwrap();
    assert_eq!(tape.value(h).item().unwrap(), 0.0);
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::full(&[2, 5], 3.25));
    let y = tape.softmax(x, 1).unwrap();
    assert!(tape.value(y).data().iter().all(|&p| (p - 0.2).abs() < 1e-7));
}

#[test]
fn shape_errors() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(tape.matmul(a, b, false), Err(NumericsError::ShapeError(_))));
    assert!(matches!(tape.softmax(a, 2), Err(NumericsError::ShapeError(_))));
    assert!(matches!(tape.cross_entropy(a, &[0, 3]), Err(NumericsError::ShapeError(_))));
    assert!(matches!(backward(&mut tape, a), Err(NumericsError::ShapeError(_))));
}

#[test]
fn checked_mode_trips_on_non_finite() {
    let mut tape = Tape::<f32>::new();
    tape.set_checked(true);
    let x = tape.constant(Tensor::full(&[1, 2], f32::MAX));
    assert!(matches!(tape.scale(x, 10.0), Err(NumericsError::NumericError(_))));
    let sq = tape.constant(Tensor::zeros(&[2, 2]));
    assert!(tape.causal_mask_fill(sq).is_ok());
}

/// Residual stack of `layers` tanh-free blocks: x + gelu(LN(x)·W).
fn layered(tape: &mut Tape<f64>, layers: usize, params: &[Tensor<f64>]) -> (Var, Vec<Var>) {
    let x0 = tape.constant(random(&[6, 4], 99, 1.0));
    let gain = tape.constant(Tensor::full(&[4], 1.0));
    let bias = tape.constant(Tensor::zeros(&[4]));
    let mut vars = Vec::new();
    let mut x = x0;
    tape.mark();
    for l in 0..layers {
        let w = tape.param(params[l].clone());
        vars.push(w);
        let h = tape.layer_norm(x, gain, bias, 1e-5).unwrap();
        let h = tape.matmul(h, w, false).unwrap();
        let h = tape.gelu(h).unwrap();
        x = tape.add(x, h).unwrap();
        tape.mark();
    }
    let loss = tape.cross_entropy(x, &[0, 1, 2, 3, 0, 1]).unwrap();
    (loss, vars)
}

#[test]
fn checkpointing_is_bitwise_and_saves_memory() {
    let params: Vec<Tensor<f64>> = (0..8).map(|l| random(&[4, 4], 200 + l, 0.8)).collect();
    let mut plain = Tape::new();
    let (loss, vars) = layered(&mut plain, 8, &params);
    let reference = backward(&mut plain, loss).unwrap();
    let plain_peak = plain.stats().peak;

    let mut peaks = Vec::new();
    for seg in [1usize, 2, 4] {
        let mut tape = Tape::checkpointed(seg).unwrap();
        let (loss, vars2) = layered(&mut tape, 8, &params);
        let grads = checkpointed_backward(&mut tape, seg, loss).unwrap();
        for (a, b) in vars.iter().zip(&vars2) {
            let (ga, gb) = (reference.get(*a).unwrap(), grads.get(*b).unwrap());
            assert!(ga.data().iter().zip(gb.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        if seg > 1 {
            assert!(tape.stats().recomputed_ops > 0);
        } else {
            assert_eq!(tape.stats().recomputed_ops, 0);
        }
        peaks.push(tape.stats().peak);
    }
    assert_eq!(peaks[0], plain_peak);
    assert!(peaks[2] < peaks[0], "peaks {peaks:?}");
    assert!(peaks[1] < peaks[0], "peaks {peaks:?}");
}

#[test]
fn checkpointed_backward_rejects_mismatched_policy() {
    let mut tape = Tape::<f64>::checkpointed(2).unwrap();
    let x = tape.param(Tensor::full(&[1, 2], 1.0));
    let l = tape.cross_entropy(x, &[0]).unwrap();
    assert!(matches!(
        checkpointed_backward(&mut tape, 3, l),
        Err(NumericsError::InvalidArgument(_))
    ));
    assert!(Tape::<f64>::checkpointed(0).is_err());
}

#[test]
fn linear_softmax_model_gradient_check() {
    // logits = X·W + b on a fixed batch, loss = mean cross entropy
    let x = random(&[8, 5], 40, 1.0);
    let targets = [0u32, 2, 1, 3, 3, 0, 1, 2];
    let theta = random(&[5 * 4 + 4], 41, 0.5);
    let err = finite_diff_check(
        |t| {
            let mut tape = Tape::new();
            let w = tape.param(Tensor::new(&[5, 4], t.data()[..20].to_vec()).unwrap());
            let b = tape.param(Tensor::new(&[4], t.data()[20..].to_vec()).unwrap());
            let xv = tape.constant(x.clone());
            let h = tape.matmul(xv, w, false).unwrap();
            let h = tape.add_bias(h, b).unwrap();
            let loss = tape.cross_entropy(h, &targets).unwrap();
            let value = tape.value(loss).item().unwrap();
            let g = backward(&mut tape, loss).unwrap();
            let mut flat = g.get(w).unwrap().data().to_vec();
            flat.extend_from_slice(g.get(b).unwrap().data());
            Ok((value, Tensor::new(&[24], flat).unwrap()))
        },
        &theta,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "{err:e}");
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(seed in any::<u64>(), width in 1usize..64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<f32>::from_fn(&[4, width], |_| rng.random_range(-50.0f32..50.0));
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let y = tape.softmax(v, 1).unwrap();
        for row in tape.value(y).data().chunks(width) {
            prop_assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn layer_norm_normalizes_rows(seed in any::<u64>(), width in 8usize..64, shift in -20.0f32..20.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // rows with variance near eps are scaled by var / (var + eps), so keep
        // enough samples per row that the input variance dwarfs eps
        let x = Tensor::<f32>::from_fn(&[3, width], |_| shift + rng.random_range(-5.0f32..5.0));
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let g = tape.constant(Tensor::full(&[width], 1.0));
        let b = tape.constant(Tensor::zeros(&[width]));
        let y = tape.layer_norm(v, g, b, 1e-5).unwrap();
        for row in tape.value(y).data().chunks(width) {
            let n = width as f32;
            let mean = row.iter().sum::<f32>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
            prop_assert!(mean.abs() < 1e-5);
            prop_assert!((var - 1.0).abs() < 1e-4, "var {}", var);
        }
    }
}
