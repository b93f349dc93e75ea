mod common;

use common::*;
use glossnet::tensor::{PoolDims, Tape, Tensor};
use glossnet::Error;
use proptest::prelude::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn conv2d_identity_kernel() {
    let mut r = rng(1);
    let x = random(&mut r, &[1, 3, 3]);
    let mut k = vec![0.0; 9];
    k[4] = 1.0;
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let w = tape.constant(t(&[1, 1, 3, 3], &k));
    let b = tape.constant(Tensor::zeros([1]));
    let y = tape.conv2d(xv, w, b, 1, 1).unwrap();
    assert_eq!(tape.value(y).data(), x.data());
}

#[test]
fn conv2d_sum_of_ones() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full([1, 4, 4], 1.0f64));
    let w = tape.constant(Tensor::full([1, 1, 2, 2], 1.0));
    let b = tape.constant(Tensor::zeros([1]));
    let y = tape.conv2d(x, w, b, 2, 0).unwrap();
    assert_eq!(tape.shape(y), &[1, 2, 2]);
    assert_eq!(tape.value(y).data(), &[4.0; 4]);
}

#[test]
fn conv2d_matches_loop_oracle() {
    let mut r = rng(2);
    let x = random(&mut r, &[2, 5, 5]);
    let w = random(&mut r, &[3, 2, 3, 3]);
    let b = random(&mut r, &[3]);
    for (stride, pad) in [(1, 0), (1, 1), (2, 1)] {
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
        let y = tape.conv2d(xv, wv, bv, stride, pad).unwrap();
        let (expect, oh, ow) =
            conv2d_oracle(x.data(), (1, 2, 5, 5), w.data(), (3, 3, 3), b.data(), (stride, stride), (pad, pad));
        assert_eq!(tape.shape(y), &[3, oh, ow]);
        assert!(max_abs_diff(tape.value(y).data(), &expect) < 1e-6);
    }
}

#[test]
fn conv2d_shape_errors() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros([2, 5, 5]));
    let w = tape.constant(Tensor::zeros([3, 4, 3, 3]));
    let b = tape.constant(Tensor::zeros([3]));
    assert!(matches!(tape.conv2d(x, w, b, 1, 0), Err(Error::Dimension(_))));
    let w = tape.constant(Tensor::zeros([3, 2, 7, 7]));
    assert!(matches!(tape.conv2d(x, w, b, 1, 0), Err(Error::Dimension(_))));
}

#[test]
fn conv1d_identity_and_length() {
    let mut r = rng(3);
    let x = random(&mut r, &[1, 16]);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let w = tape.constant(t(&[1, 1, 3], &[0.0, 1.0, 0.0]));
    let b = tape.constant(Tensor::zeros([1]));
    let y = tape.conv1d(xv, w, b, 1, 1).unwrap();
    assert_eq!(tape.value(y).data(), x.data());
    let w5 = tape.constant(Tensor::zeros([1, 1, 5]));
    let y = tape.conv1d(xv, w5, b, 1, 0).unwrap();
    assert_eq!(tape.shape(y), &[1, 12]);
}

#[test]
fn conv1d_matches_loop_oracle() {
    let mut r = rng(4);
    let x = random(&mut r, &[3, 11]);
    let w = random(&mut r, &[4, 3, 5]);
    let b = random(&mut r, &[4]);
    for (stride, pad) in [(1, 0), (2, 2)] {
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
        let y = tape.conv1d(xv, wv, bv, stride, pad).unwrap();
        let (expect, _, ow) = conv2d_oracle(x.data(), (1, 3, 1, 11), w.data(), (4, 1, 5), b.data(), (1, stride), (0, pad));
        assert_eq!(tape.shape(y), &[4, ow]);
        assert!(max_abs_diff(tape.value(y).data(), &expect) < 1e-6);
    }
}

#[test]
fn max_pool_cases() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 4], &[1.0, 2.0, 3.0, 4.0]));
    let y = tape.max_pool(x, 2, PoolDims::Temporal).unwrap();
    assert_eq!(tape.value(y).data(), &[2.0, 4.0]);
    let c = tape.constant(Tensor::full([2, 4, 6], 0.5));
    let y = tape.max_pool(c, 2, PoolDims::Spatial).unwrap();
    assert_eq!(tape.shape(y), &[2, 2, 3]);
    assert!(tape.value(y).data().iter().all(|&v| v == 0.5));
    assert!(matches!(tape.max_pool(x, 0, PoolDims::Temporal), Err(Error::Config(_))));
}

#[test]
fn max_pool_matches_oracle_and_truncates() {
    let mut r = rng(5);
    let x = random(&mut r, &[2, 5, 7]);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = tape.max_pool(xv, 2, PoolDims::Spatial).unwrap();
    assert_eq!(tape.shape(y), &[2, 2, 3]);
    let mut expect = Vec::new();
    for c in 0..2 {
        for oy in 0..2 {
            for ox in 0..3 {
                let mut m = f64::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        m = m.max(x.data()[(c * 5 + oy * 2 + dy) * 7 + ox * 2 + dx]);
                    }
                }
                expect.push(m);
            }
        }
    }
    assert_eq!(tape.value(y).data(), &expect[..]);
    let y = tape.max_pool(xv, 3, PoolDims::Temporal).unwrap();
    assert_eq!(tape.shape(y), &[2, 5, 2]);
}

#[test]
fn max_pool_tie_routes_to_first() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[1, 4], &[2.0, 2.0, 1.0, 1.0]), true);
    let y = tape.max_pool(x, 2, PoolDims::Temporal).unwrap();
    let s = tape.sum(y).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0, 0.0, 1.0, 0.0]);
}

#[test]
fn global_avg_pool_cases() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full([2, 3, 3], 3.5f64));
    let y = tape.global_avg_pool(x).unwrap();
    assert_eq!(tape.value(y).data(), &[3.5, 3.5]);
    let x = tape.constant(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let y = tape.global_avg_pool(x).unwrap();
    assert_eq!(tape.value(y).data(), &[2.5]);
    let mut r = rng(6);
    let x = random(&mut r, &[3, 4, 3, 2]);
    let xv = tape.constant(x.clone());
    let y = tape.global_avg_pool(xv).unwrap();
    assert_eq!(tape.shape(y), &[3, 4]);
    let expect: Vec<f64> = x.data().chunks(6).map(|c| c.iter().sum::<f64>() / 6.0).collect();
    assert!(max_abs_diff(tape.value(y).data(), &expect) < 1e-12);
}

#[test]
fn batch_norm_cases() {
    let mut r = rng(7);
    let x = random(&mut r, &[2, 3, 4]);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let g = tape.constant(Tensor::full([3], 1.0));
    let b = tape.constant(Tensor::zeros([3]));
    let (y, stats) = tape.batch_norm(xv, g, b, 1, Some((&[0.0; 3], &[1.0; 3])), 0.0).unwrap();
    assert!(stats.is_none());
    assert_eq!(tape.value(y).data(), x.data());

    let c = tape.constant(Tensor::full([5, 2], 0.7));
    let g2 = tape.constant(Tensor::full([2], 1.3));
    let b2 = tape.constant(t(&[2], &[0.25, -0.5]));
    let (y, _) = tape.batch_norm(c, g2, b2, 1, None, 1e-5).unwrap();
    for row in tape.value(y).data().chunks(2) {
        assert_eq!(row, &[0.25, -0.5]);
    }

    // Train mode against explicit per-channel statistics.
    let gamma = random(&mut r, &[3]);
    let beta = random(&mut r, &[3]);
    let (gv, bv) = (tape.constant(gamma.clone()), tape.constant(beta.clone()));
    let (y, stats) = tape.batch_norm(xv, gv, bv, 1, None, 1e-5).unwrap();
    let stats = stats.unwrap();
    for c in 0..3 {
        let vals: Vec<f64> = (0..2).flat_map(|o| (0..4).map(move |i| (o, i))).map(|(o, i)| x.data()[(o * 3 + c) * 4 + i]).collect();
        let mean = vals.iter().sum::<f64>() / 8.0;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        assert!((stats.mean[c] - mean).abs() < 1e-12);
        assert!((stats.var[c] - var * 8.0 / 7.0).abs() < 1e-12);
        for o in 0..2 {
            for i in 0..4 {
                let idx = (o * 3 + c) * 4 + i;
                let e = gamma.data()[c] * (x.data()[idx] - mean) / (var + 1e-5).sqrt() + beta.data()[c];
                assert!((tape.value(y).data()[idx] - e).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn activations() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full([2, 5], 0.3f64));
    let s = tape.softmax(x).unwrap();
    assert!(tape.value(s).data().iter().all(|&p| (p - 0.2).abs() < 1e-15));
    let x = tape.constant(t(&[3], &[-1.0, -0.5, 2.0]));
    let r = tape.relu(x).unwrap();
    assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
    let mut rr = rng(8);
    let inp = random(&mut rr, &[4, 3]);
    let xv = tape.constant(inp.clone());
    let eye = tape.constant(t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]));
    let zb = tape.constant(Tensor::zeros([3]));
    let y = tape.linear(xv, eye, zb).unwrap();
    assert_eq!(tape.value(y).data(), inp.data());
}

#[test]
fn softmax_rows_and_log_softmax_stability() {
    let mut r = rng(9);
    let logits = Tensor::from_fn([6, 7], |_| rand::Rng::random_range(&mut r, -100.0..100.0));
    let mut tape = Tape::new();
    let x = tape.constant(logits);
    let s = tape.softmax(x).unwrap();
    let ls = tape.log_softmax(x).unwrap();
    for (srow, lrow) in tape.value(s).data().chunks(7).zip(tape.value(ls).data().chunks(7)) {
        assert!((srow.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        for (&p, &lp) in srow.iter().zip(lrow) {
            if p > 0.0 {
                assert!((p.ln() - lp).abs() < 1e-6);
            }
            assert!(lp.is_finite());
        }
    }
    let mut t32 = Tape::<f32>::new();
    let x = t32.constant(Tensor::from_fn([1, 4], |i| [100.0f32, -100.0, 99.0, 0.0][i]));
    let s = t32.softmax(x).unwrap();
    assert!((t32.value(s).data().iter().sum::<f32>() - 1.0).abs() < 1e-6);
}

#[test]
fn backward_basics() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new([3], vec![1.0f64, -2.0, 0.5]).unwrap(), true);
    let s = tape.sum(x).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0, 2.0]);

    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(3.0f64), true);
    let y = tape.mul(x, x).unwrap();
    tape.backward(y).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[6.0]);

    let v = tape.leaf(Tensor::zeros([2]), true);
    assert!(matches!(tape.backward(v), Err(Error::Usage(_))));
}

#[test]
fn non_finite_forward_is_an_error() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full([2], 1e300f64));
    assert!(matches!(tape.mul(x, x), Err(Error::NonFinite("mul"))));
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let mut r = rng(10);
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(random(&mut r, &[6, 3, 8, 8]).cast());
        let w = tape.constant(random(&mut r, &[5, 3, 3, 3]).cast());
        let b = tape.constant(random(&mut r, &[5]).cast());
        let y = tape.conv2d(x, w, b, 1, 1).unwrap();
        let p = tape.global_avg_pool(y).unwrap();
        tape.value(p).clone()
    };
    assert_eq!(run(), run());
}

const TOL: f64 = 1e-4;

#[test]
fn gradcheck_conv2d() {
    let mut r = rng(11);
    let inputs = [random(&mut r, &[2, 2, 5, 4]), random(&mut r, &[3, 2, 3, 2]), random(&mut r, &[3])];
    for (s, p) in [(1, 0), (2, 1)] {
        let err = gradcheck(&inputs, |tape, v| {
            let y = tape.conv2d(v[0], v[1], v[2], s, p).unwrap();
            project(tape, y, 1)
        });
        assert!(err < TOL, "stride {s} pad {p}: {err}");
    }
}

#[test]
fn gradcheck_conv1d() {
    let mut r = rng(12);
    let inputs = [random(&mut r, &[3, 9]), random(&mut r, &[2, 3, 5]), random(&mut r, &[2])];
    let err = gradcheck(&inputs, |tape, v| {
        let y = tape.conv1d(v[0], v[1], v[2], 1, 2).unwrap();
        project(tape, y, 2)
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn gradcheck_pools_and_gap() {
    let mut r = rng(13);
    let inputs = [random(&mut r, &[2, 3, 4, 6])];
    let err = gradcheck(&inputs, |tape, v| {
        let y = tape.max_pool(v[0], 2, PoolDims::Spatial).unwrap();
        let y = tape.max_pool(y, 3, PoolDims::Temporal).unwrap();
        project(tape, y, 3)
    });
    assert!(err < TOL, "{err}");
    let err = gradcheck(&inputs, |tape, v| {
        let y = tape.global_avg_pool(v[0]).unwrap();
        project(tape, y, 4)
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn gradcheck_batch_norm_both_modes() {
    let mut r = rng(14);
    let inputs = [random(&mut r, &[3, 4, 5]), random(&mut r, &[4]), random(&mut r, &[4])];
    let err = gradcheck(&inputs, |tape, v| {
        let (y, _) = tape.batch_norm(v[0], v[1], v[2], 1, None, 1e-5).unwrap();
        project(tape, y, 5)
    });
    assert!(err < TOL, "train: {err}");
    let (rm, rv) = ([0.1, -0.2, 0.3, 0.0], [0.5, 1.5, 2.0, 1.0]);
    let err = gradcheck(&inputs, |tape, v| {
        let (y, _) = tape.batch_norm(v[0], v[1], v[2], 1, Some((&rm, &rv)), 1e-5).unwrap();
        project(tape, y, 6)
    });
    assert!(err < TOL, "infer: {err}");
}

#[test]
fn gradcheck_dense_ops() {
    let mut r = rng(15);
    let inputs = [random(&mut r, &[4, 5]), random(&mut r, &[3, 5]), random(&mut r, &[3])];
    let err = gradcheck(&inputs, |tape, v| {
        let y = tape.linear(v[0], v[1], v[2]).unwrap();
        let y = tape.relu(y).unwrap();
        let y = tape.log_softmax(y).unwrap();
        project(tape, y, 7)
    });
    assert!(err < TOL, "{err}");
    let err = gradcheck(&inputs[..1], |tape, v| {
        let y = tape.softmax(v[0]).unwrap();
        let y = tape.transpose(y).unwrap();
        let s = tape.scale(y, 1.7).unwrap();
        let q = tape.sum_squares(s).unwrap();
        let p = project(tape, y, 8);
        tape.add(p, q).unwrap()
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn gradcheck_losses() {
    let mut r = rng(16);
    let inputs = [random(&mut r, &[6, 4])];
    let err = gradcheck(&inputs, |tape, v| {
        let lp = tape.log_softmax(v[0]).unwrap();
        tape.ctc_loss(lp, &[1, 0, 0], 3).unwrap()
    });
    assert!(err < TOL, "ctc: {err}");
    let err = gradcheck(&inputs, |tape, v| {
        let lp = tape.log_softmax(v[0]).unwrap();
        tape.weighted_nll(lp, &[3, 1, 3, 0, 2, 3], &[0.5, 1.0, 0.5, 1.0, 1.0, 0.5], 1e-12).unwrap()
    });
    assert!(err < TOL, "nll: {err}");
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, .. ProptestConfig::default() })]

    #[test]
    fn conv2d_gradients_on_random_shapes(
        n in 1usize..3, c in 1usize..3, h in 3usize..6, w in 3usize..6,
        co in 1usize..3, k in 1usize..4, stride in 1usize..3, pad in 0usize..2, seed in 0u64..1000,
    ) {
        prop_assume!(k <= h + 2 * pad && k <= w + 2 * pad);
        let mut r = rng(seed);
        let inputs = [random(&mut r, &[n, c, h, w]), random(&mut r, &[co, c, k, k]), random(&mut r, &[co])];
        let err = gradcheck(&inputs, |tape, v| {
            let y = tape.conv2d(v[0], v[1], v[2], stride, pad).unwrap();
            project(tape, y, seed)
        });
        prop_assert!(err < TOL, "{}", err);
    }

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..5, cols in 1usize..9, seed in 0u64..1000) {
        let mut r = rng(seed);
        let x = Tensor::from_fn([rows, cols], |_| rand::Rng::random_range(&mut r, -100.0..100.0f64));
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let s = tape.softmax(v).unwrap();
        for row in tape.value(s).data().chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}
