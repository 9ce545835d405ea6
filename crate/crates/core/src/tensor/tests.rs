use rand::{Rng, SeedableRng};

use super::gradcheck::{check, FD_STEP};
use super::*;
use crate::rng::Xoshiro256;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(shape: &[usize], rng: &mut Xoshiro256) -> Tensor {
    let n = shape.iter().product();
    t(shape, &(0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>())
}

#[test]
fn matmul_identity_and_projector() {
    let tape = Tape::new();
    let eye = tape.constant(t(&[2, 2], &[1., 0., 0., 1.]));
    let m = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
    assert_eq!(eye.matmul(m).unwrap().value().data(), &[1., 2., 3., 4.]);

    let proj = tape.constant(t(&[2, 2], &[1., 0., 0., 0.]));
    let m = tape.constant(t(&[2, 2], &[5., 6., 7., 8.]));
    assert_eq!(proj.matmul(m).unwrap().value().data(), &[5., 6., 0., 0.]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    let msg = a.matmul(b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3] x [2, 3]"), "{msg}");
}

#[test]
fn matmul_gradient() {
    let mut rng = Xoshiro256::seed_from_u64(1);
    let inputs = [random(&[3, 4], &mut rng), random(&[4, 2], &mut rng)];
    let r = check(&inputs, FD_STEP, |_, v| Ok(v[0].matmul(v[1])?.sum())).unwrap();
    assert!(r.max_rel_err < 1e-6, "{}", r.max_rel_err);
}

#[test]
fn elementwise_identities() {
    let tape = Tape::new();
    let x = tape.constant(t(&[3], &[1.5, -2.0, 0.25]));
    let zero = tape.constant(Tensor::scalar(0.0));
    let one = tape.constant(Tensor::scalar(1.0));
    assert_eq!(x.add(zero).unwrap().value().data(), x.value().data());
    assert_eq!(x.mul(one).unwrap().value().data(), x.value().data());
}

#[test]
fn broadcast_add_gradient_sums_over_leading_axis() {
    let mut rng = Xoshiro256::seed_from_u64(2);
    let inputs = [random(&[2, 3], &mut rng), random(&[3], &mut rng)];
    let r = check(&inputs, FD_STEP, |tape, v| {
        let w = tape.constant(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        Ok(v[0].add(v[1])?.mul(w)?.sum())
    })
    .unwrap();
    assert!(r.max_rel_err < 1e-6);
    // d/db of sum(w * (a + b)) is the column sum of w
    assert!((r.analytic[1].data()[0] - 5.0).abs() < 1e-12);
    assert!((r.analytic[1].data()[2] - 9.0).abs() < 1e-12);
}

#[test]
fn non_broadcastable_is_rejected() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2]));
    assert!(matches!(a.add(b), Err(Error::Dimension(_))));
    let c = tape.constant(Tensor::zeros(&[3, 3]));
    assert!(matches!(a.mul(c), Err(Error::Dimension(_))));
}

#[test]
fn activation_fixed_points() {
    let tape = Tape::new();
    let z = tape.constant(Tensor::scalar(0.0));
    assert_eq!(z.sigmoid().value().item(), 0.5);
    assert_eq!(z.tanh().value().item(), 0.0);
    assert_eq!(z.relu().value().item(), 0.0);
    assert_eq!(z.swish().value().item(), 0.0);
}

#[test]
fn swish_gradient_at_reference_points() {
    let x = t(&[5], &[-2.0, -0.5, 0.0, 0.5, 2.0]);
    let r = check(&[x], FD_STEP, |_, v| Ok(v[0].swish().sum())).unwrap();
    assert!(r.max_rel_err < 1e-6, "{}", r.max_rel_err);
}

#[test]
fn activation_gradients() {
    let mut rng = Xoshiro256::seed_from_u64(3);
    for kind in [Activation::Sigmoid, Activation::Tanh, Activation::Swish] {
        let x = random(&[7], &mut rng);
        let r = check(&[x], FD_STEP, |_, v| Ok(v[0].activation(kind).sum())).unwrap();
        assert!(r.max_rel_err < 1e-6, "{kind:?}: {}", r.max_rel_err);
    }
    // relu away from the kink
    let x = t(&[4], &[-1.0, -0.3, 0.4, 2.0]);
    let r = check(&[x], FD_STEP, |_, v| Ok(v[0].relu().sum())).unwrap();
    assert!(r.max_rel_err < 1e-9);
}

#[test]
fn log_sum_exp_edge_cases() {
    let tape = Tape::new();
    let lse = |vals: &[f64]| {
        tape.constant(t(&[vals.len()], vals))
            .log_sum_exp(0)
            .unwrap()
            .value()
            .item()
    };
    assert!((lse(&[0.7, 0.7]) - (0.7 + 2f64.ln())).abs() < 1e-15);
    assert_eq!(lse(&[0.0, f64::NEG_INFINITY]), 0.0);
    assert_eq!(lse(&[f64::NEG_INFINITY, f64::NEG_INFINITY]), f64::NEG_INFINITY);
    assert!((lse(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-12);
    assert!((lse(&[1e6, 1e6]) - (1e6 + 2f64.ln())).abs() < 1e-9);
    assert!((lse(&[-1e6, -1e6]) - (-1e6 + 2f64.ln())).abs() < 1e-9);
}

#[test]
fn log_sum_exp_axes_and_gradient() {
    let mut rng = Xoshiro256::seed_from_u64(4);
    let x = random(&[2, 3, 4], &mut rng);
    for axis in 0..3 {
        let r = check(std::slice::from_ref(&x), FD_STEP, |tape, v| {
            let out = v[0].log_sum_exp(axis)?;
            let w = tape.constant(Tensor::full(&out.shape(), 0.5));
            Ok(out.mul(w)?.sum())
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-6, "axis {axis}: {}", r.max_rel_err);
    }
    let tape = Tape::new();
    assert!(tape.constant(x).log_sum_exp(3).is_err());
}

#[test]
fn softmax_gradients() {
    let mut rng = Xoshiro256::seed_from_u64(5);
    let x = random(&[3, 4], &mut rng);
    let w = random(&[3, 4], &mut rng);
    let r = check(std::slice::from_ref(&x), FD_STEP, |tape, v| {
        Ok(v[0].softmax().mul(tape.constant(w.clone()))?.sum())
    })
    .unwrap();
    assert!(r.max_rel_err < 1e-6);
    let r = check(&[x], FD_STEP, |tape, v| {
        Ok(v[0].log_softmax().mul(tape.constant(w.clone()))?.sum())
    })
    .unwrap();
    assert!(r.max_rel_err < 1e-6);
}

#[test]
fn masked_softmax_puts_zero_weight_on_neg_inf() {
    let tape = Tape::new();
    let x = tape.constant(t(&[1, 3], &[1.0, f64::NEG_INFINITY, 1.0]));
    assert_eq!(x.softmax().value().data(), &[0.5, 0.0, 0.5]);
}

#[test]
fn layer_norm_examples() {
    let tape = Tape::new();
    let g = tape.constant(Tensor::full(&[4], 1.0));
    let b = tape.constant(Tensor::zeros(&[4]));
    let c = tape.constant(Tensor::full(&[1, 4], 3.0));
    assert!(c
        .layer_norm(g, b)
        .unwrap()
        .value()
        .data()
        .iter()
        .all(|&v| v == 0.0));

    let g = tape.constant(Tensor::full(&[2], 1.0));
    let b = tape.constant(Tensor::zeros(&[2]));
    let x = tape.constant(t(&[2], &[1.0, 3.0]));
    let y = x.layer_norm(g, b).unwrap().value();
    // mean 2, variance 1: (x - 2) / sqrt(1 + eps)
    let expect = 1.0 / (1.0 + LAYER_NORM_EPS).sqrt();
    assert!((y.data()[0] + expect).abs() < 1e-15);
    assert!((y.data()[1] - expect).abs() < 1e-15);
}

#[test]
fn layer_norm_gradient() {
    for seed in 0..10 {
        let mut rng = Xoshiro256::seed_from_u64(100 + seed);
        let inputs = [
            random(&[2, 4], &mut rng),
            random(&[4], &mut rng),
            random(&[4], &mut rng),
        ];
        let w = random(&[2, 4], &mut rng);
        let r = check(&inputs, FD_STEP, |tape, v| {
            Ok(v[0]
                .layer_norm(v[1], v[2])?
                .mul(tape.constant(w.clone()))?
                .sum())
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-5, "seed {seed}: {}", r.max_rel_err);
    }
}

#[test]
fn depthwise_conv_delta_kernels() {
    let mut rng = Xoshiro256::seed_from_u64(6);
    let x = random(&[5, 3], &mut rng);
    let tape = Tape::new();
    let xv = tape.constant(x.clone());
    let k1 = tape.constant(Tensor::full(&[1, 3], 1.0));
    for pad in [ConvPadding::Causal, ConvPadding::Same] {
        assert_eq!(
            xv.depthwise_conv1d(k1, pad).unwrap().value().data(),
            x.data()
        );
    }
    let centered = tape.constant(t(&[3, 3], &[0., 0., 0., 1., 1., 1., 0., 0., 0.]));
    assert_eq!(
        xv.depthwise_conv1d(centered, ConvPadding::Same)
            .unwrap()
            .value()
            .data(),
        x.data()
    );
    let even = tape.constant(Tensor::zeros(&[2, 3]));
    assert!(xv.depthwise_conv1d(even, ConvPadding::Same).is_err());
}

fn conv_oracle(x: &Tensor, k: &Tensor, left: isize) -> Vec<f64> {
    let (tl, d) = (x.shape()[0], x.shape()[1]);
    let kl = k.shape()[0];
    let mut out = vec![0.0; tl * d];
    for t in 0..tl {
        for c in 0..d {
            let mut s = 0.0;
            for j in 0..kl {
                let src = t as isize + j as isize - left;
                if (0..tl as isize).contains(&src) {
                    s += k.at2(j, c) * x.at2(src as usize, c);
                }
            }
            out[t * d + c] = s;
        }
    }
    out
}

#[test]
fn depthwise_conv_matches_nested_loops() {
    let mut rng = Xoshiro256::seed_from_u64(7);
    let x = random(&[5, 2], &mut rng);
    let k = random(&[3, 2], &mut rng);
    let tape = Tape::new();
    let (xv, kv) = (tape.constant(x.clone()), tape.constant(k.clone()));
    for (pad, left) in [(ConvPadding::Causal, 2), (ConvPadding::Same, 1)] {
        let got = xv.depthwise_conv1d(kv, pad).unwrap().value();
        for (a, b) in got.data().iter().zip(conv_oracle(&x, &k, left)) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}

#[test]
fn depthwise_conv_gradient() {
    let mut rng = Xoshiro256::seed_from_u64(8);
    let inputs = [random(&[5, 2], &mut rng), random(&[3, 2], &mut rng)];
    let w = random(&[5, 2], &mut rng);
    for pad in [ConvPadding::Causal, ConvPadding::Same] {
        let r = check(&inputs, FD_STEP, |tape, v| {
            Ok(v[0]
                .depthwise_conv1d(v[1], pad)?
                .mul(tape.constant(w.clone()))?
                .sum())
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-6);
    }
}

#[test]
fn backward_linear_and_quadratic() {
    let tape = Tape::new();
    let x = tape.leaf(t(&[3], &[1.0, -2.0, 0.5]), true);
    tape.backward(x.sum()).unwrap();
    assert_eq!(x.grad().unwrap().data(), &[1.0, 1.0, 1.0]);

    let tape = Tape::new();
    let x = tape.leaf(t(&[3], &[1.0, -2.0, 0.5]), true);
    tape.backward(x.mul(x).unwrap().sum()).unwrap();
    assert_eq!(x.grad().unwrap().data(), &[2.0, -4.0, 1.0]);
}

#[test]
fn backward_diamond_accumulates_both_branches() {
    let mut rng = Xoshiro256::seed_from_u64(9);
    let x = random(&[4], &mut rng);
    let r = check(&[x], FD_STEP, |_, v| {
        let f = v[0].tanh();
        let g = v[0].sigmoid().mul(v[0])?;
        Ok(f.add(g)?.sum())
    })
    .unwrap();
    assert!(r.max_rel_err < 1e-6);
}

#[test]
fn backward_errors() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[2]), true);
    assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    let s = x.sum();
    tape.backward(s).unwrap();
    assert!(matches!(tape.backward(s), Err(Error::State(_))));
    tape.reset_grads();
    tape.backward(s).unwrap();
    assert_eq!(x.grad().unwrap().data(), &[1.0, 1.0]);
}

#[test]
fn structural_op_gradients() {
    let mut rng = Xoshiro256::seed_from_u64(10);
    let inputs = [random(&[3, 4], &mut rng), random(&[2, 4], &mut rng)];
    let w = random(&[4, 5], &mut rng);
    let r = check(&inputs, FD_STEP, |tape, v| {
        let rows = tape.concat_rows(&[v[0], v[1]])?; // 5x4
        let cols = tape.concat_cols(&[rows.slice_cols(1, 2)?, rows])?; // 5x6
        let tr = cols.transpose()?.slice_rows(1, 4)?; // 4x5
        let rs = tr.reshape(&[5, 4])?.reverse_rows();
        let g = tape.gather(rs, &[0, 4, 4, 2])?; // 4x4
        let p = tape.pairwise_add(g, v[1])?; // 4x2x4
        let y = rs.transpose()?.mul(tape.constant(w.clone()))?;
        p.tanh().sum().add(y.sum())?.add(g.mean())
    })
    .unwrap();
    assert!(r.max_rel_err < 1e-6, "{}", r.max_rel_err);
}

#[test]
fn forward_is_deterministic() {
    let mut rng = Xoshiro256::seed_from_u64(11);
    let a = random(&[6, 5], &mut rng);
    let b = random(&[5, 3], &mut rng);
    let run = || {
        let tape = Tape::new();
        let x = tape.constant(a.clone());
        let y = tape.constant(b.clone());
        x.matmul(y).unwrap().softmax().value().data().to_vec()
    };
    assert_eq!(run(), run());
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn primitive_gradients_match_finite_differences(seed in 0u64..10_000) {
            let mut rng = Xoshiro256::seed_from_u64(seed);
            let inputs = [random(&[3, 4], &mut rng), random(&[4, 3], &mut rng), random(&[3], &mut rng)];
            let r = check(&inputs, FD_STEP, |_, v| {
                let h = v[0].matmul(v[1])?.add(v[2])?;
                let a = h.swish().mul(h.sigmoid())?;
                Ok(a.tanh().log_sum_exp(1)?.sum())
            }).unwrap();
            prop_assert!(r.max_rel_err < 1e-5, "{}", r.max_rel_err);
        }

        #[test]
        fn lse_never_overflows(a in -1e6f64..1e6, b in -1e6f64..1e6) {
            let tape = Tape::new();
            let v = tape.constant(t(&[2], &[a, b])).log_sum_exp(0).unwrap().value().item();
            prop_assert!(v.is_finite());
            prop_assert!(v >= a.max(b) && v <= a.max(b) + 2f64.ln() + 1e-9);
        }
    }
}
