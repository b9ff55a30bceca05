use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::grad_check_with_eps;
use super::*;
use crate::error::Error;

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Fixed random weights, so `sum(w ⊙ f(x))` has a generic gradient.
fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let w = rand_tensor(tape.shape(y), seed);
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn check(f: impl Fn(&mut Tape, Var) -> Result<Var>, x: &Tensor) -> f64 {
    let r = grad_check(f, x, 1e-3).unwrap();
    r.max_rel_error
}

/// erf by its Maclaurin series, evaluated in f64.
fn erf_series(z: f64) -> f64 {
    let mut sum = 0.0;
    let mut term = z; // z^(2n+1) (-1)^n / n!
    for n in 0..60 {
        sum += term / (2 * n + 1) as f64;
        term *= -z * z / (n + 1) as f64;
    }
    2.0 / std::f64::consts::PI.sqrt() * sum
}

#[test]
fn matmul_identity() {
    let mut tape = Tape::new();
    let m = rand_tensor(&[3, 3], 1);
    let i = tape.constant(Tensor::eye(3));
    let mv = tape.constant(m.clone());
    let out = tape.matmul(i, mv).unwrap();
    assert_eq!(tape.value(out).data(), m.data());
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::zeros([4, 4]));
    let s = tape.softmax(z).unwrap();
    assert!(tape.data(s).iter().all(|&v| v == 0.25));
}

#[test]
fn gelu_matches_erf_series() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new([3], vec![-2.0, 0.0, 2.0]).unwrap());
    let y = tape.gelu(x);
    for (&xv, &yv) in [-2.0f64, 0.0, 2.0].iter().zip(tape.data(y)) {
        let want = xv * 0.5 * (1.0 + erf_series(xv / 2f64.sqrt()));
        assert!(
            (yv as f64 - want).abs() < 1e-6,
            "gelu({xv}) = {yv}, want {want}"
        );
    }
}

#[test]
fn linear_map_gradient_is_outer_product() {
    let mut tape = Tape::new();
    let w = tape.leaf(rand_tensor(&[2, 3], 2).with_requires_grad(true));
    let x = tape.constant(Tensor::new([3, 1], vec![0.5, -1.0, 2.0]).unwrap());
    let y = tape.matmul(w, x).unwrap();
    let loss = tape.sum(y);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(w).unwrap(), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
}

#[test]
fn sum_of_softmax_has_zero_gradient() {
    let mut tape = Tape::new();
    let z = tape.leaf(rand_tensor(&[1, 5], 3).with_requires_grad(true));
    let s = tape.softmax(z).unwrap();
    let loss = tape.sum(s);
    tape.backward(loss).unwrap();
    assert!(tape.grad(z).unwrap().iter().all(|g| g.abs() < 1e-7));
}

#[test]
fn backward_rejects_non_scalar() {
    let mut tape = Tape::new();
    let z = tape.leaf(Tensor::zeros([2]).with_requires_grad(true));
    assert!(matches!(tape.backward(z), Err(Error::NonScalarLoss(_))));
}

#[test]
fn shape_error_names_op_and_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros([2, 3]));
    let b = tape.constant(Tensor::zeros([2, 3]));
    let msg = tape.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
}

#[test]
fn leaf_participants_get_grads() {
    let mut tape = Tape::new();
    let a = tape.leaf(rand_tensor(&[3], 4).with_requires_grad(true));
    let b = tape.leaf(rand_tensor(&[3], 5).with_requires_grad(true));
    let c = tape.constant(rand_tensor(&[3], 6));
    let ab = tape.mul(a, b).unwrap();
    let abc = tape.add(ab, c).unwrap();
    let loss = tape.sum(abc);
    tape.backward(loss).unwrap();
    for v in [a, b, ab, abc, loss] {
        assert_eq!(tape.grad(v).map(<[f32]>::len), Some(tape.value(v).numel()));
    }
    assert!(tape.grad(c).is_none());
    assert!(tape.backward(loss).is_err(), "tape is single-use");
}

#[test]
fn sum_of_squares_gradcheck_is_exact() {
    // Central differences are exact for quadratics at any step, so a wide
    // step isolates the adjoint from float32 rounding in f.
    let x = rand_tensor(&[7], 7);
    let r = grad_check(
        |t, x| {
            let sq = t.mul(x, x)?;
            Ok(t.sum(sq))
        },
        &x,
        0.5,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

#[test]
fn two_uses_accumulate() {
    // f(x) = sum(x ⊙ exp(x)) + sum(x): x feeds three consumers.
    let x = rand_tensor(&[5], 8);
    let err = check(
        |t, x| {
            let e = t.exp(x);
            let p = t.mul(x, e)?;
            let s = t.sum(p);
            let s2 = t.sum(x);
            t.add(s, s2)
        },
        &x,
    );
    assert!(err < 1e-3, "{err}");
}

#[test]
fn composite_graph_gradcheck() {
    // matmul -> gelu -> softmax -> square -> weighted sum
    let x = rand_tensor(&[3, 4], 9);
    let w = rand_tensor(&[4, 5], 10);
    let err = check(
        |t, x| {
            let w = t.constant(w.clone());
            let h = t.matmul(x, w)?;
            let g = t.gelu(h);
            let s = t.softmax(g)?;
            let sq = t.mul(s, s)?;
            weighted_sum(t, sq, 11)
        },
        &x,
    );
    assert!(err < 1e-3, "{err}");
}

macro_rules! op_gradcheck {
    ($name:ident, $shape:expr, $seed:expr, |$t:ident, $x:ident| $body:expr) => {
        #[test]
        fn $name() {
            let x0 = rand_tensor(&$shape, $seed);
            let err = check(
                |$t: &mut Tape, $x: Var| -> Result<Var> {
                    let y = $body;
                    weighted_sum($t, y, $seed + 100)
                },
                &x0,
            );
            assert!(err < 1e-3, "{}: rel err {err}", stringify!($name));
        }
    };
}

op_gradcheck!(grad_add_broadcast, [3, 4], 20, |t, x| {
    let b = t.leaf(rand_tensor(&[4], 1));
    t.add_broadcast(x, b)?
});
op_gradcheck!(grad_sub_mul, [6], 21, |t, x| {
    let c = t.constant(rand_tensor(&[6], 2));
    let d = t.sub(x, c)?;
    t.mul(d, x)?
});
op_gradcheck!(grad_scale_add_scalar, [4], 22, |t, x| {
    let s = t.scale(x, -1.5);
    t.add_scalar(s, 0.3)
});
op_gradcheck!(grad_matmul_rhs, [4, 2], 23, |t, x| {
    let a = t.constant(rand_tensor(&[3, 4], 3));
    t.matmul(a, x)?
});
op_gradcheck!(grad_bmm, [2, 3, 4], 24, |t, x| {
    let b = t.constant(rand_tensor(&[2, 4, 2], 4));
    let y = t.bmm(x, b)?;
    let xt = t.transpose(x)?;
    let z = t.bmm(xt, x)?;
    let zs = t.reshape(z, &[2 * 16])?;
    let ys = t.reshape(y, &[12])?;
    t.concat(&[ys, zs], 0)?
});
op_gradcheck!(grad_conv1d_input, [2, 3, 9], 25, |t, x| {
    let w = t.constant(rand_tensor(&[4, 3, 3], 5));
    let b = t.constant(rand_tensor(&[4], 6));
    t.conv1d(x, w, Some(b), 2, 0, 2)?
});
op_gradcheck!(grad_conv1d_weight, [4, 3, 3], 26, |t, w| {
    let x = t.constant(rand_tensor(&[2, 3, 9], 7));
    t.conv1d(x, w, None, 1, 1, 1)?
});
op_gradcheck!(grad_causal_depthwise_input, [2, 3, 10], 27, |t, x| {
    let k = t.constant(rand_tensor(&[3, 6], 8));
    t.causal_depthwise_conv(x, k)?
});
op_gradcheck!(grad_causal_depthwise_kernel, [3, 12], 28, |t, k| {
    let x = t.constant(rand_tensor(&[2, 3, 10], 9));
    t.causal_depthwise_conv(x, k)?
});
op_gradcheck!(grad_softmax, [3, 5], 29, |t, x| t.softmax(x)?);
op_gradcheck!(grad_gelu, [10], 30, |t, x| {
    let s = t.scale(x, 3.0);
    t.gelu(s)
});
op_gradcheck!(grad_relu, [10], 31, |t, x| t.relu(x));
op_gradcheck!(grad_exp_log, [6], 32, |t, x| {
    let e = t.exp(x);
    let s = t.add_scalar(e, 1.0);
    t.log(s)
});
op_gradcheck!(grad_powf, [6], 33, |t, x| {
    let e = t.exp(x);
    t.powf(e, -0.5)
});
op_gradcheck!(grad_batch_norm_train, [3, 2, 4], 34, |t, x| {
    let g = t.constant(Tensor::new([2], vec![1.3, -0.7]).unwrap());
    let b = t.constant(Tensor::new([2], vec![0.1, 0.2]).unwrap());
    t.batch_norm(x, g, b, None, 1e-5)?.0
});
op_gradcheck!(grad_batch_norm_gamma, [2], 35, |t, g| {
    let x = t.constant(rand_tensor(&[3, 2, 4], 10));
    let b = t.constant(Tensor::zeros([2]));
    t.batch_norm(x, g, b, None, 1e-5)?.0
});
op_gradcheck!(grad_batch_norm_eval, [3, 2, 4], 36, |t, x| {
    let g = t.constant(Tensor::new([2], vec![1.3, -0.7]).unwrap());
    let b = t.constant(Tensor::new([2], vec![0.1, 0.2]).unwrap());
    t.batch_norm(x, g, b, Some((&[0.1, -0.2], &[0.5, 2.0])), 1e-5)?
        .0
});
op_gradcheck!(grad_max_pool, [2, 2, 8], 37, |t, x| t.max_pool1d(x, 3)?);
op_gradcheck!(grad_mean_sum_axis, [2, 3, 4], 38, |t, x| {
    let m = t.mean_axis(x, 1)?;
    let s = t.sum_axis(x, 2)?;
    let m = t.reshape(m, &[8])?;
    let s = t.reshape(s, &[6])?;
    t.concat(&[m, s], 0)?
});
op_gradcheck!(grad_concat_axis1, [2, 3, 2], 39, |t, x| {
    let c = t.constant(rand_tensor(&[2, 1, 2], 11));
    t.concat(&[x, c, x], 1)?
});
op_gradcheck!(grad_dropout, [20], 40, |t, x| {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    t.dropout(x, 0.3, &mut rng)?
});
op_gradcheck!(grad_l2_normalize, [3, 4], 41, |t, x| t.l2_normalize(x)?);
op_gradcheck!(grad_norm, [3, 4], 42, |t, x| {
    let n = t.norm(x);
    t.reshape(n, &[1])?
});
op_gradcheck!(grad_narrow_repeat, [2, 4], 43, |t, x| {
    let r = t.repeat_interleave_last(x, 3)?;
    t.narrow_last(r, 2, 7)?
});
op_gradcheck!(grad_mean_all, [5], 44, |t, x| {
    let sq = t.mul(x, x)?;
    let m = t.mean(sq);
    t.reshape(m, &[1])?
});

#[test]
fn cross_entropy_gradcheck() {
    let x = rand_tensor(&[4, 3], 50);
    let err = check(|t, x| t.cross_entropy(x, &[0, 2, 1, 2]), &x);
    assert!(err < 1e-3, "{err}");
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let x = Tensor::from_fn([20, 7], |_| rng.random_range(-30.0..30.0));
    let x = tape.constant(x);
    let s = tape.softmax(x).unwrap();
    for row in tape.data(s).chunks(7) {
        let sum: f64 = row.iter().map(|&v| v as f64).sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }
}

#[test]
fn batch_norm_eval_is_deterministic_affine() {
    let x = rand_tensor(&[2, 2, 5], 52);
    let run = || {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let g = tape.constant(Tensor::new([2], vec![2.0, 0.5]).unwrap());
        let b = tape.constant(Tensor::new([2], vec![1.0, -1.0]).unwrap());
        let (y, stats) = tape
            .batch_norm(xv, g, b, Some((&[0.5, -0.5], &[4.0, 0.25])), 0.0)
            .unwrap();
        assert!(stats.is_none());
        tape.value(y).clone()
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    // channel 0: 2 * (x - 0.5) / 2 + 1
    let want = (x.data()[0] - 0.5) + 1.0;
    assert!((a.data()[0] - want).abs() < 1e-6);
}

#[test]
fn batch_norm_train_normalizes() {
    let mut tape = Tape::new();
    let x = tape.constant(rand_tensor(&[4, 3, 8], 53));
    let g = tape.constant(Tensor::full([3], 1.0));
    let b = tape.constant(Tensor::zeros([3]));
    let (y, stats) = tape.batch_norm(x, g, b, None, 1e-5).unwrap();
    assert!(stats.is_some());
    let yv = tape.data(y);
    for ch in 0..3 {
        let vals: Vec<f64> = (0..4)
            .flat_map(|n| {
                yv[(n * 3 + ch) * 8..(n * 3 + ch + 1) * 8]
                    .iter()
                    .map(|&v| v as f64)
            })
            .collect();
        let mean = vals.iter().sum::<f64>() / 32.0;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 32.0;
        assert!(mean.abs() < 1e-6 && (var - 1.0).abs() < 1e-3);
    }
}

#[test]
fn dropout_rate_zero_is_identity() {
    let mut tape = Tape::new();
    let x = tape.constant(rand_tensor(&[10], 54));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let y = tape.dropout(x, 0.0, &mut rng).unwrap();
    assert_eq!(tape.value(x), tape.value(y));
    assert!(tape.dropout(x, 1.0, &mut rng).is_err());
}

#[test]
fn conv1d_matches_direct_sum() {
    let x = rand_tensor(&[1, 2, 7], 55);
    let w = rand_tensor(&[3, 2, 3], 56);
    let mut tape = Tape::new();
    let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
    let y = tape.conv1d(xv, wv, None, 2, 1, 2).unwrap();
    assert_eq!(tape.shape(y), &[1, 3, 4]);
    for o in 0..3 {
        for t in 0..4 {
            let mut want = 0.0f32;
            for c in 0..2 {
                for k in 0..3 {
                    let pos = (t * 2 + k) as isize - 2;
                    if (0..7).contains(&pos) {
                        want += w.at(&[o, c, k]) * x.at(&[0, c, pos as usize]);
                    }
                }
            }
            assert!((tape.value(y).at(&[0, o, t]) - want).abs() < 1e-5);
        }
    }
}

#[test]
fn causal_conv_ignores_future() {
    let mut x = rand_tensor(&[1, 2, 16], 57);
    let k = rand_tensor(&[2, 16], 58);
    let run = |x: &Tensor| {
        let mut tape = Tape::new();
        let (xv, kv) = (tape.constant(x.clone()), tape.constant(k.clone()));
        let y = tape.causal_depthwise_conv(xv, kv).unwrap();
        tape.value(y).clone()
    };
    let before = run(&x);
    for c in 0..2 {
        for t in 10..16 {
            x.set(&[0, c, t], 0.0);
        }
    }
    let after = run(&x);
    for c in 0..2 {
        for t in 0..10 {
            assert_eq!(before.at(&[0, c, t]), after.at(&[0, c, t]));
        }
    }
}

#[test]
fn gradcheck_reports_non_finite() {
    let x = Tensor::new([2], vec![-1.0, 1.0]).unwrap();
    let r = grad_check_with_eps(
        |t, x| {
            let l = t.log(x);
            Ok(t.sum(l))
        },
        &x,
        1e-3,
        1e-3,
    );
    assert!(matches!(r, Err(Error::NonFinite(_))));
    assert!(grad_check(|t, x| Ok(t.sum(x)), &x, 0.0).is_err());
}
