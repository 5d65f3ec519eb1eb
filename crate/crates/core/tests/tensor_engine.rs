mod common;

use common::*;
use copanet::tensor::{BatchNormState, Fault};
use copanet::{Error, Tape, Tensor};
use proptest::prelude::*;
use rand::Rng;

const TOL: f64 = 1e-4;
const POINTWISE_TOL: f64 = 1e-6;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape, data.to_vec()).unwrap()
}

#[test]
fn conv_of_ones_counts_overlap() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
    let w = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
    let y = tape.conv2d(x, w, 1, 1).unwrap();
    assert_eq!(tape.value(y).data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
}

#[test]
fn one_by_one_conv_scales() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let w = tape.constant(t(&[1, 1, 1, 1], &[2.0]));
    let y = tape.conv2d(x, w, 1, 0).unwrap();
    assert_eq!(tape.value(y).data(), &[2.0, 4.0, 6.0, 8.0]);
}

#[test]
fn conv_matches_direct_loops() {
    let mut r = rng(1);
    for &(c, o, h, k, stride, pad) in &[(3, 4, 8, 3, 1, 1), (3, 4, 8, 3, 2, 1), (5, 2, 7, 1, 1, 0), (2, 3, 9, 1, 2, 0)] {
        let x = randn(&[2, c, h, h], 1.0, &mut r);
        let w = randn(&[o, c, k, k], 1.0, &mut r);
        let mut tape = Tape::<f64>::new();
        let (vx, vw) = (tape.constant(x.clone()), tape.constant(w.clone()));
        let y = tape.conv2d(vx, vw, stride, pad).unwrap();
        let want = conv_ref(&x, &w, stride, pad);
        assert_eq!(tape.value(y).shape(), want.shape());
        for (a, b) in tape.value(y).data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}

#[test]
fn conv_channel_mismatch_names_both_shapes() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::<f64>::zeros(&[1, 3, 4, 4]));
    let w = tape.constant(Tensor::<f64>::zeros(&[2, 5, 3, 3]));
    let err = tape.conv2d(x, w, 1, 1).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    let msg = err.to_string();
    assert!(msg.contains("[1, 3, 4, 4]") && msg.contains("[2, 5, 3, 3]"), "{msg}");
}

#[test]
fn conv_gradient_matches_finite_differences() {
    let mut r = rng(2);
    let x = randn(&[2, 3, 8, 8], 1.0, &mut r);
    let w = randn(&[4, 3, 3, 3], 0.5, &mut r);
    let proj = randn(&[2, 4, 8, 8], 1.0, &mut r);
    let err = fd_check(&[x, w], &|tp, v| {
        let y = tp.conv2d(v[0], v[1], 1, 1).unwrap();
        tp.weighted_sum(y, &proj).unwrap()
    }, 1e-6);
    assert!(err < TOL, "max relative error {err:e}");
}

#[test]
fn strided_conv_gradient_matches_finite_differences() {
    let mut r = rng(3);
    let x = randn(&[2, 2, 5, 5], 1.0, &mut r);
    let w = randn(&[3, 2, 3, 3], 0.5, &mut r);
    let proj = randn(&[2, 3, 3, 3], 1.0, &mut r);
    let err = fd_check(&[x, w], &|tp, v| {
        let y = tp.conv2d(v[0], v[1], 2, 1).unwrap();
        tp.weighted_sum(y, &proj).unwrap()
    }, 1e-6);
    assert!(err < TOL, "max relative error {err:e}");
}

#[test]
fn batch_norm_normalizes_per_channel() {
    let mut r = rng(4);
    let mut x = randn(&[8, 2, 4, 4], 1.0, &mut r);
    // Rescale each channel to mean 5, std 2.
    let moments = channel_moments(&x);
    let plane = 16;
    for (i, v) in x.data_mut().iter_mut().enumerate() {
        let ch = (i / plane) % 2;
        let (m, s) = moments[ch];
        *v = 5.0 + 2.0 * (*v - m) / s;
    }
    let mut tape = Tape::<f64>::new();
    let mut state = BatchNormState::new(2);
    let vx = tape.constant(x.clone());
    let g = tape.constant(Tensor::ones(&[2]));
    let b = tape.constant(Tensor::zeros(&[2]));
    let y = tape.batch_norm(vx, g, b, &mut state, true).unwrap();
    for (m, s) in channel_moments(tape.value(y)) {
        assert!(m.abs() < 1e-6, "mean {m}");
        assert!((s - 1.0).abs() < 1e-3, "std {s}");
    }
    let g = tape.constant(t(&[2], &[3.0, 3.0]));
    let b = tape.constant(t(&[2], &[-1.0, -1.0]));
    let y = tape.batch_norm(vx, g, b, &mut state, true).unwrap();
    for (m, s) in channel_moments(tape.value(y)) {
        assert!((m + 1.0).abs() < 1e-6, "mean {m}");
        assert!((s - 3.0).abs() < 1e-3, "std {s}");
    }
}

#[test]
fn batch_norm_matches_reference_and_updates_running_stats() {
    let mut r = rng(5);
    let x = randn(&[3, 4, 3, 3], 2.0, &mut r);
    let gamma = [0.5, 1.0, 1.5, 2.0];
    let beta = [0.1, -0.1, 0.0, 0.3];
    let mut tape = Tape::<f64>::new();
    let mut state = BatchNormState::new(4);
    let vx = tape.constant(x.clone());
    let g = tape.constant(t(&[4], &gamma));
    let b = tape.constant(t(&[4], &beta));
    let y = tape.batch_norm(vx, g, b, &mut state, true).unwrap();
    let want = bn_ref(&x, &gamma, &beta, 1e-5);
    for (a, b) in tape.value(y).data().iter().zip(want.data()) {
        assert!((a - b).abs() < 1e-12);
    }
    // Running mean moves a tenth of the way from 0 towards the batch mean;
    // running variance uses the unbiased batch variance.
    let count = 27.0;
    for (ch, (m, s)) in channel_moments(&x).into_iter().enumerate() {
        assert!((state.running_mean[ch] - 0.1 * m).abs() < 1e-12);
        let unbiased = s * s * count / (count - 1.0);
        assert!((state.running_var[ch] - (0.9 + 0.1 * unbiased)).abs() < 1e-12);
    }
}

#[test]
fn batch_norm_rejects_single_value_statistics() {
    let mut tape = Tape::<f64>::new();
    let mut state = BatchNormState::new(2);
    let x = tape.constant(Tensor::<f64>::ones(&[1, 2, 1, 1]));
    let g = tape.constant(Tensor::ones(&[2]));
    let b = tape.constant(Tensor::zeros(&[2]));
    assert!(tape.batch_norm(x, g, b, &mut state, true).is_err());
    // Eval mode has no such restriction.
    assert!(tape.batch_norm(x, g, b, &mut state, false).is_ok());
}

#[test]
fn batch_norm_gradient_matches_finite_differences() {
    let mut r = rng(6);
    for training in [true, false] {
        let x = randn(&[2, 2, 3, 3], 1.0, &mut r);
        let g = uniform(&[2], 0.5, 1.5, &mut r);
        let b = randn(&[2], 0.5, &mut r);
        let proj = randn(&[2, 2, 3, 3], 1.0, &mut r);
        let err = fd_check(&[x, g, b], &|tp, v| {
            let mut state = BatchNormState::new(2);
            state.running_mean = vec![0.2, -0.3];
            state.running_var = vec![0.8, 1.7];
            let y = tp.batch_norm(v[0], v[1], v[2], &mut state, training).unwrap();
            tp.weighted_sum(y, &proj).unwrap()
        }, 1e-6);
        assert!(err < TOL, "training={training}: max relative error {err:e}");
    }
}

#[test]
fn max_merge_examples() {
    let mut tape = Tape::<f64>::new();
    let a = tape.variable(t(&[3], &[1.0, -2.0, 3.0]));
    let b = tape.variable(t(&[3], &[0.0, 5.0, 3.0]));
    let (y, mask) = tape.max_k(&[a, b], true).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 5.0, 3.0]);
    assert_eq!(mask.unwrap().winners, vec![0, 1, 0]);
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(a).unwrap().data(), &[1.0, 0.0, 1.0]);
    assert_eq!(tape.grad(b).unwrap().data(), &[0.0, 1.0, 0.0]);

    let mut tape = Tape::<f64>::new();
    let x = t(&[2, 2], &[0.5, -1.0, 2.0, 0.0]);
    let vars: Vec<_> = (0..3).map(|_| tape.variable(x.clone())).collect();
    let (y, mask) = tape.max_k(&vars, true).unwrap();
    assert_eq!(tape.value(y), &x);
    assert!(mask.unwrap().winners.iter().all(|&w| w == 0));
}

#[test]
fn max_merge_gradient_matches_finite_differences() {
    // Distinct values keep every element away from a tie, where the max is
    // not differentiable.
    let mut r = rng(7);
    let a = randn(&[2, 3, 2, 2], 1.0, &mut r);
    let b = randn(&[2, 3, 2, 2], 1.0, &mut r);
    let c = randn(&[2, 3, 2, 2], 1.0, &mut r);
    let proj = randn(&[2, 3, 2, 2], 1.0, &mut r);
    let err = fd_check(&[a, b, c], &|tp, v| {
        let (y, _) = tp.max_k(v, false).unwrap();
        tp.weighted_sum(y, &proj).unwrap()
    }, 1e-9);
    assert!(err < POINTWISE_TOL, "max relative error {err:e}");
}

#[test]
fn max_merge_rejects_bad_inputs() {
    let mut tape = Tape::<f64>::new();
    assert!(matches!(tape.max_k(&[], false), Err(Error::Config(_))));
    let a = tape.variable(Tensor::zeros(&[3]));
    let b = tape.variable(Tensor::zeros(&[4]));
    assert!(matches!(tape.max_k(&[a, b], false), Err(Error::Config(_))));
}

#[test]
fn plumbing_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
    let y = tape.relu(x);
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);

    let x = tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let y = tape.avg_pool2d(x, 2, 2).unwrap();
    assert_eq!(tape.value(y).data(), &[2.5]);

    let mut r = rng(8);
    let a = randn(&[2, 3, 2, 2], 1.0, &mut r);
    let b = randn(&[2, 5, 2, 2], 1.0, &mut r);
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let c = tape.concat_channels(&[va, vb]).unwrap();
    let cat = tape.value(c).clone();
    assert_eq!(cat.shape(), &[2, 8, 2, 2]);
    assert_eq!(cat.channel_slice(0, 3).unwrap(), a);
    assert_eq!(cat.channel_slice(3, 8).unwrap(), b);

    let bad = tape.constant(Tensor::zeros(&[2, 1, 3, 3]));
    assert!(matches!(tape.concat_channels(&[va, bad]), Err(Error::Config(_))));
    assert!(matches!(tape.add(va, vb), Err(Error::Config(_))));
}

#[test]
fn pointwise_and_plumbing_gradients() {
    let mut r = rng(9);
    // Keep relu inputs away from the kink.
    let mut x = randn(&[2, 3, 4, 4], 1.0, &mut r);
    for v in x.data_mut() {
        if v.abs() < 0.05 {
            *v += 0.1;
        }
    }
    let y = randn(&[2, 3, 4, 4], 1.0, &mut r);
    let proj = randn(&[2, 3, 4, 4], 1.0, &mut r);
    let err = fd_check(&[x.clone(), y], &|tp, v| {
        let s = tp.add(v[0], v[1]).unwrap();
        let h = tp.relu(v[0]);
        let z = tp.add(s, h).unwrap();
        let z = tp.scale(z, 0.7);
        tp.weighted_sum(z, &proj).unwrap()
    }, 1e-9);
    assert!(err < POINTWISE_TOL, "relu/add/scale: {err:e}");

    let a = randn(&[2, 2, 4, 4], 1.0, &mut r);
    let b = randn(&[2, 3, 4, 4], 1.0, &mut r);
    let proj = randn(&[2, 5, 2, 2], 1.0, &mut r);
    let err = fd_check(&[a, b], &|tp, v| {
        let c = tp.concat_channels(v).unwrap();
        let p = tp.avg_pool2d(c, 2, 2).unwrap();
        tp.weighted_sum(p, &proj).unwrap()
    }, 1e-9);
    assert!(err < POINTWISE_TOL, "concat/avgpool: {err:e}");

    let x = randn(&[3, 4, 2, 2], 1.0, &mut r);
    let w = randn(&[4, 5], 1.0, &mut r);
    let b = randn(&[5], 1.0, &mut r);
    let err = fd_check(&[x, w, b], &|tp, v| {
        let g = tp.global_avg_pool(v[0]).unwrap();
        let l = tp.linear(g, v[1], v[2]).unwrap();
        tp.softmax_cross_entropy(l, &[4, 0, 2]).unwrap()
    }, 1e-9);
    assert!(err < POINTWISE_TOL, "global pool/linear/cross-entropy: {err:e}");
}

#[test]
fn linear_matches_matrix_product() {
    let mut r = rng(10);
    let x = randn(&[3, 4], 1.0, &mut r);
    let w = randn(&[4, 2], 1.0, &mut r);
    let b = randn(&[2], 1.0, &mut r);
    let mut tape = Tape::<f64>::new();
    let (vx, vw, vb) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
    let y = tape.linear(vx, vw, vb).unwrap();
    for i in 0..3 {
        for j in 0..2 {
            let want: f64 = (0..4).map(|k| x.at(&[i, k]) * w.at(&[k, j])).sum::<f64>() + b.data()[j];
            assert!((tape.value(y).at(&[i, j]) - want).abs() < 1e-12);
        }
    }
}

#[test]
fn dropout_examples() {
    let mut r = rng(11);
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[2], &[10.0, 5.0]));
    let y = tape.dropout(x, 0.2, false, &mut r).unwrap();
    assert_eq!(tape.value(y).data(), &[8.0, 4.0]);
    for training in [true, false] {
        let y = tape.dropout(x, 0.0, training, &mut r).unwrap();
        assert_eq!(tape.value(y).data(), &[10.0, 5.0]);
    }
    assert!(matches!(tape.dropout(x, 1.0, true, &mut r), Err(Error::Config(_))));
    assert!(matches!(tape.dropout(x, -0.1, false, &mut r), Err(Error::Config(_))));

    let n = 100_000;
    let ones = tape.constant(Tensor::ones(&[n]));
    let y = tape.dropout(ones, 0.5, true, &mut r).unwrap();
    let vals = tape.value(y).data();
    let zeros = vals.iter().filter(|&&v| v == 0.0).count();
    assert!(vals.iter().all(|&v| v == 0.0 || v == 1.0));
    let frac = zeros as f64 / n as f64;
    assert!((frac - 0.5).abs() < 0.01, "zero fraction {frac}");
}

#[test]
fn dropout_gradient_follows_mask() {
    let mut r = rng(12);
    let mut tape = Tape::<f64>::new();
    let x = tape.variable(randn(&[200], 1.0, &mut r));
    let y = tape.dropout(x, 0.3, true, &mut r).unwrap();
    let kept: Vec<f64> = tape.value(y).data().iter().map(|&v| if v == 0.0 { 0.0 } else { 1.0 }).collect();
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), kept.as_slice());
}

#[test]
fn cross_entropy_examples() {
    let mut tape = Tape::<f64>::new();
    let l = tape.variable(Tensor::zeros(&[2, 10]));
    let loss = tape.softmax_cross_entropy(l, &[3, 7]).unwrap();
    assert!((tape.value(loss).data()[0] - 10f64.ln()).abs() < 1e-12);

    let mut logits = vec![0.0; 10];
    logits[4] = 30.0;
    let l = tape.variable(t(&[1, 10], &logits));
    let loss = tape.softmax_cross_entropy(l, &[4]).unwrap();
    assert!(tape.value(loss).data()[0] < 1e-9);

    assert!(matches!(tape.softmax_cross_entropy(l, &[10]), Err(Error::Data(_))));

    let mut r = rng(13);
    let x = randn(&[4, 6], 3.0, &mut r);
    let mut tape = Tape::<f64>::new();
    let v = tape.variable(x.clone());
    let loss = tape.softmax_cross_entropy(v, &[0, 5, 2, 2]).unwrap();
    let want = cross_entropy_ref(x.data(), 6, &[0, 5, 2, 2]);
    assert!((tape.value(loss).data()[0] - want).abs() < 1e-12);

    let err = fd_check(&[x], &|tp, v| tp.softmax_cross_entropy(v[0], &[0, 5, 2, 2]).unwrap(), 1e-9);
    assert!(err < POINTWISE_TOL, "{err:e}");
}

#[test]
fn backward_examples() {
    let mut r = rng(14);
    let mut tape = Tape::<f64>::new();
    let x = tape.variable(randn(&[2, 3, 4], 1.0, &mut r));
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert!(tape.grad(x).unwrap().data().iter().all(|&g| g == 1.0));
    assert!(matches!(tape.backward(s), Err(Error::Usage(_))));

    let mut tape = Tape::<f64>::new();
    let base = randn(&[10], 1.0, &mut r);
    let x = tape.variable(base.map(|v| v + 10.0));
    let y = tape.variable(base);
    let (m, _) = tape.max_k(&[x, y], false).unwrap();
    let s = tape.sum(m);
    tape.backward(s).unwrap();
    assert!(tape.grad(x).unwrap().data().iter().all(|&g| g == 1.0));
    assert!(tape.grad(y).unwrap().data().iter().all(|&g| g == 0.0));

    let mut tape = Tape::<f64>::new();
    let x = tape.variable(Tensor::<f64>::ones(&[3]));
    let y = tape.relu(x);
    assert!(matches!(tape.backward(y), Err(Error::Usage(_))));
}

#[test]
fn backward_is_linear() {
    let mut r = rng(15);
    let x = randn(&[2, 3, 4, 4], 1.0, &mut r);
    let w = randn(&[3, 3, 3, 3], 0.5, &mut r);
    let p1 = randn(&[2, 3, 4, 4], 1.0, &mut r);
    let p2 = randn(&[2, 3, 4, 4], 1.0, &mut r);
    let grad_of = |a: f64, b: f64| {
        let mut tape = Tape::<f64>::new();
        let vx = tape.variable(x.clone());
        let vw = tape.constant(w.clone());
        let y = tape.conv2d(vx, vw, 1, 1).unwrap();
        let y = tape.relu(y);
        let l1 = tape.weighted_sum(y, &p1).unwrap();
        let l2 = tape.weighted_sum(y, &p2).unwrap();
        let l1 = tape.scale(l1, a);
        let l2 = tape.scale(l2, b);
        let l = tape.add(l1, l2).unwrap();
        tape.backward(l).unwrap();
        tape.grad(vx).unwrap().clone()
    };
    let (g1, g2, g) = (grad_of(1.0, 0.0), grad_of(0.0, 1.0), grad_of(2.5, -0.75));
    for i in 0..g.numel() {
        let want = 2.5 * g1.data()[i] - 0.75 * g2.data()[i];
        assert!((g.data()[i] - want).abs() < 1e-12);
    }
}

#[test]
fn forward_is_deterministic() {
    let mut r = rng(16);
    let x = randn(&[4, 3, 6, 6], 1.0, &mut r);
    let w = randn(&[5, 3, 3, 3], 0.5, &mut r);
    let run = || {
        let mut r = rng(99);
        let mut tape = Tape::<f64>::new();
        let mut state = BatchNormState::new(5);
        let (vx, vw) = (tape.constant(x.clone()), tape.constant(w.clone()));
        let y = tape.conv2d(vx, vw, 1, 1).unwrap();
        let g = tape.constant(Tensor::ones(&[5]));
        let b = tape.constant(Tensor::zeros(&[5]));
        let y = tape.batch_norm(y, g, b, &mut state, true).unwrap();
        let y = tape.dropout(y, 0.2, true, &mut r).unwrap();
        let z = tape.scale(y, -1.0);
        let (m, mask) = tape.max_k(&[y, z], true).unwrap();
        (tape.value(m).clone(), mask.unwrap().winners, state)
    };
    assert_eq!(run(), run());
}

#[test]
fn injected_fault_breaks_conservation() {
    let mut tape = Tape::<f64>::new();
    tape.inject_fault(Fault::CorruptMaxBackward);
    let a = tape.variable(t(&[2], &[1.0, 0.0]));
    let b = tape.variable(t(&[2], &[0.0, 1.0]));
    let (y, _) = tape.max_k(&[a, b], false).unwrap();
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    let total: f64 = tape.grad(a).unwrap().data()[0] + tape.grad(b).unwrap().data()[0];
    assert_ne!(total, 1.0);
}

fn small_ints(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((-3i32..=3).prop_map(f64::from), n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn max_routing_invariants(
        k in 2usize..5,
        n in 1usize..40,
        seed in any::<u64>(),
    ) {
        let mut r = rng(seed);
        let inputs: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..n).map(|_| r.random_range(-3i32..=3) as f64).collect())
            .collect();
        let upstream: Vec<f64> = (0..n).map(|_| r.random_range(-2.0..2.0)).collect();
        let mut tape = Tape::<f64>::new();
        let vars: Vec<_> = inputs.iter().map(|v| tape.variable(t(&[n], v))).collect();
        let (y, mask) = tape.max_k(&vars, true).unwrap();
        let mask = mask.unwrap();
        let l = tape.weighted_sum(y, &t(&[n], &upstream)).unwrap();
        tape.backward(l).unwrap();
        for i in 0..n {
            let col: Vec<f64> = inputs.iter().map(|v| v[i]).collect();
            let best = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert_eq!(tape.value(y).data()[i], best);
            let first = col.iter().position(|&v| v == best).unwrap();
            prop_assert_eq!(mask.winners[i] as usize, first);
            let mut total = 0.0;
            for (p, &v) in vars.iter().enumerate() {
                let g = tape.grad(v).unwrap().data()[i];
                if p != first {
                    prop_assert_eq!(g, 0.0);
                }
                total += g;
            }
            prop_assert_eq!(total, upstream[i]);
        }
    }

    #[test]
    fn max_output_dominates_inputs(vals in small_ints(24), other in small_ints(24)) {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[24], &vals));
        let b = tape.constant(t(&[24], &other));
        let (y, _) = tape.max_k(&[a, b], false).unwrap();
        for i in 0..24 {
            prop_assert!(tape.value(y).data()[i] >= vals[i]);
            prop_assert!(tape.value(y).data()[i] >= other[i]);
        }
    }
}

#[test]
fn nan_is_not_swallowed() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[2], &[f64::NAN, -1.0]));
    let y = tape.relu(x);
    assert!(tape.value(y).data()[0].is_nan());
    let a = tape.constant(t(&[2], &[1.0, f64::NAN]));
    let b = tape.constant(t(&[2], &[f64::NAN, 0.0]));
    let (m, mask) = tape.max_k(&[a, b], true).unwrap();
    assert!(tape.value(m).data().iter().all(|v| v.is_nan()));
    assert_eq!(mask.unwrap().winners, vec![1, 0]);
}
