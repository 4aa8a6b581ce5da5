use super::*;
use crate::activations::ActivationKind;
use crate::error::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.sample(StandardNormal)).collect(),
    )
    .unwrap()
}

/// Contracts a tensor against fixed random weights so every coordinate of the
/// output carries a distinct derivative.
fn weighted_sum(t: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = t.value(y).shape().to_vec();
    let w = t.constant(randn(&mut rng, &shape));
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

#[test]
fn matmul_small_cases() {
    let mut t = Tape::new();
    let i2 = t.constant(Tensor::eye(2));
    let m = t.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let y = t.matmul(i2, m).unwrap();
    assert_eq!(t.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

    let a = t.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
    let b = t.constant(Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap());
    let y = t.matmul(a, b).unwrap();
    assert_eq!(t.value(y).shape(), &[1, 1]);
    assert_eq!(t.value(y).data(), &[11.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(&[2, 3]));
    let b = t.constant(Tensor::zeros(&[2, 3]));
    match t.matmul(a, b) {
        Err(Error::Dimension { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected dimension error, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = randn(&mut rng, &[3, 3]);
    let b = randn(&mut rng, &[3, 3]);
    let err = grad_check_many(
        |t, v| {
            let y = t.matmul(v[0], v[1])?;
            Ok(t.sum(y))
        },
        &[a, b],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-5, "{err}");
}

#[test]
fn layer_norm_values() {
    let mut t = Tape::new();
    let g = t.constant(Tensor::full(&[3], 1.0));
    let b = t.constant(Tensor::zeros(&[3]));
    let x = t.constant(Tensor::from_rows(&[vec![1.0, 1.0, 1.0]]).unwrap());
    let y = t.layer_norm(x, g, b, 1e-5).unwrap();
    assert_eq!(t.value(y).data(), &[0.0, 0.0, 0.0]);

    let g = t.constant(Tensor::full(&[2], 1.0));
    let b = t.constant(Tensor::zeros(&[2]));
    let x = t.constant(Tensor::from_rows(&[vec![-1.0, 1.0]]).unwrap());
    let y = t.layer_norm(x, g, b, 1e-14).unwrap();
    for (got, want) in t.value(y).data().iter().zip([-1.0, 1.0]) {
        assert!((got - want).abs() < 1e-12);
    }

    let x = t.constant(Tensor::zeros(&[2, 0]));
    let e = t.constant(Tensor::zeros(&[0]));
    assert!(matches!(
        t.layer_norm(x, e, e, 1e-5),
        Err(Error::Dimension { .. })
    ));
}

#[test]
fn layer_norm_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = randn(&mut rng, &[2, 4]);
    let g = randn(&mut rng, &[4]);
    let b = randn(&mut rng, &[4]);
    let err = grad_check_many(
        |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            weighted_sum(t, y, 9)
        },
        &[x, g, b],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-5, "{err}");
}

#[test]
fn softmax_values_and_stability() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::vector(vec![0.0, 0.0, 0.0]));
    let y = t.softmax(x).unwrap();
    for v in t.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = t.constant(Tensor::vector(vec![1000.0, 0.0]));
    let y = t.softmax(x).unwrap();
    let d = t.value(y).data();
    assert!((d[0] - 1.0).abs() < 1e-12 && d[1] >= 0.0 && d[1] < 1e-300 + 1e-12);
    assert!(t.value(y).all_finite());
}

#[test]
fn softmax_and_log_softmax_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = randn(&mut rng, &[3, 5]);
    let err = grad_check(
        |t, v| {
            let y = t.softmax(v)?;
            weighted_sum(t, y, 5)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-5, "{err}");
    let err = grad_check(
        |t, v| {
            let y = t.log_softmax(v)?;
            weighted_sum(t, y, 6)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-5, "{err}");
}

#[test]
fn l2_normalize_values_and_errors() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::from_rows(&[vec![3.0, 4.0], vec![1.0, 0.0]]).unwrap());
    let y = t.l2_normalize(x).unwrap();
    assert_eq!(t.value(y).data(), &[0.6, 0.8, 1.0, 0.0]);
    let z = t.constant(Tensor::from_rows(&[vec![0.0, 1e-13]]).unwrap());
    assert!(matches!(t.l2_normalize(z), Err(Error::Degenerate(_))));
}

#[test]
fn l2_normalize_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = randn(&mut rng, &[3, 4]);
    let err = grad_check(
        |t, v| {
            let y = t.l2_normalize(v)?;
            weighted_sum(t, y, 7)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-5, "{err}");
}

#[test]
fn grad_check_trivial_functions() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = randn(&mut rng, &[4, 3]);
    let err = grad_check(
        |t, v| {
            let sq = t.mul(v, v)?;
            Ok(t.sum(sq))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
    let err = grad_check(|t, _| Ok(t.constant(Tensor::scalar(3.0))), &x, 1e-5).unwrap();
    assert_eq!(err, 0.0);
}

#[test]
fn attention_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let qkv = randn(&mut rng, &[2 * 3, 3 * 4]);
    let err = grad_check(
        |t, v| {
            let y = t.attention(v, 3, 2)?;
            weighted_sum(t, y, 10)
        },
        &qkv,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-5, "{err}");
}

#[test]
fn attention_rows_are_convex_combinations_of_values() {
    // With all-equal scores each output row is the mean of the value rows.
    let (seq, d) = (3, 2);
    let mut data = Vec::new();
    for i in 0..seq {
        data.extend([0.0, 0.0, 0.0, 0.0, i as f64, 10.0 * i as f64]);
    }
    let mut t = Tape::new();
    let qkv = t.constant(Tensor::new(vec![seq, 3 * d], data).unwrap());
    let y = t.attention(qkv, seq, 1).unwrap();
    for r in 0..seq {
        assert!((t.value(y).at(r, 0) - 1.0).abs() < 1e-12);
        assert!((t.value(y).at(r, 1) - 10.0).abs() < 1e-12);
    }
}

#[test]
fn structural_op_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let content = randn(&mut rng, &[2 * 2, 3]);
    let cls = randn(&mut rng, &[3]);
    let pos = randn(&mut rng, &[3, 3]);
    let err = grad_check_many(
        |t, v| {
            let y = t.assemble_tokens(v[0], v[1], v[2])?;
            let g = t.gather_rows(y, vec![0, 3, 3, 5])?;
            let c = t.concat_rows(&[g, y])?;
            weighted_sum(t, c, 13)
        },
        &[content, cls, pos],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn reduction_and_elementwise_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let a = randn(&mut rng, &[3, 4]);
    let b = randn(&mut rng, &[3, 4]);
    let bias = randn(&mut rng, &[4]);
    let w = randn(&mut rng, &[2, 4]);
    let err = grad_check_many(
        |t, v| {
            let s = t.sub(v[0], v[1])?;
            let m = t.mul(s, v[0])?;
            let e = t.exp(m);
            let p = t.add(e, v[1])?;
            let q = t.add_bias(p, v[2])?;
            let l = t.linear(q, v[3], None)?;
            let lt = t.transpose(l)?;
            let sq = t.mul(lt, lt)?;
            let pos = t.clamp_min(sq, 1e-3);
            let lg = t.log(pos)?;
            let rs = t.row_sum(lg)?;
            let cm = t.col_mean(e)?;
            let a1 = t.mean(rs)?;
            let a2 = t.sum(cm);
            let a2 = t.scale(a2, 0.3);
            t.add(a1, a2)
        },
        &[a, b, bias, w],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-5, "{err}");
}

#[test]
fn masked_log_sum_exp_gradient_and_errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x = randn(&mut rng, &[3, 3]);
    let mask: Vec<bool> = (0..9).map(|i| i % 4 != 0).collect();
    let err = grad_check(
        |t, v| {
            let y = t.masked_log_sum_exp(v, mask.clone())?;
            weighted_sum(t, y, 16)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-5, "{err}");
    let mut t = Tape::new();
    let v = t.constant(x);
    let mut empty_row = vec![true; 9];
    empty_row[3..6].iter_mut().for_each(|m| *m = false);
    assert!(matches!(
        t.masked_log_sum_exp(v, empty_row),
        Err(Error::Degenerate(_))
    ));
}

#[test]
fn shared_input_accumulates_gradients() {
    // y = x*x + 3x uses x three times; dy/dx = 2x + 3.
    let mut t = Tape::new();
    let x = t.leaf(Tensor::vector(vec![1.5, -2.0]), true);
    let sq = t.mul(x, x).unwrap();
    let lin = t.scale(x, 3.0);
    let y = t.add(sq, lin).unwrap();
    let s = t.sum(y);
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap().data(), &[6.0, -1.0]);
    // a second sweep starts from clean gradients
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap().data(), &[6.0, -1.0]);
}

#[test]
fn frozen_leaves_receive_no_gradient() {
    let mut t = Tape::new();
    let w = t.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
    let x = t.leaf(Tensor::from_rows(&[vec![0.5, 0.5]]).unwrap(), true);
    let y = t.linear(x, w, None).unwrap();
    let s = t.sum(y);
    t.backward(s).unwrap();
    assert!(t.grad(w).is_none());
    assert_eq!(t.grad(x).unwrap().data(), &[1.0, 2.0]);
}

#[test]
fn detach_blocks_gradient_flow() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::vector(vec![2.0]), true);
    let y = t.mul(x, x).unwrap();
    let yd = t.detach(y);
    let z = t.mul(yd, x).unwrap();
    let s = t.sum(z);
    t.backward(s).unwrap();
    // only the direct path contributes: d(4 * x)/dx = 4
    assert_eq!(t.grad(x).unwrap().data(), &[4.0]);
}

#[test]
fn backward_requires_scalar() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::vector(vec![1.0, 2.0]), true);
    assert!(t.backward(x).is_err());
}

#[test]
fn bias_is_the_only_broadcast() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(&[2, 3]));
    let b = t.constant(Tensor::zeros(&[3]));
    assert!(t.add(a, b).is_err());
    assert!(t.add_bias(a, b).is_ok());
    let bad = t.constant(Tensor::zeros(&[2]));
    assert!(t.add_bias(a, bad).is_err());
}

#[test]
fn ops_are_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut t = Tape::new();
        let x = t.leaf(randn(&mut rng, &[6, 12]), true);
        let a = t.attention(x, 3, 2).unwrap();
        let act = t.activation(a, ActivationKind::Gelu).unwrap();
        let s = t.softmax(act).unwrap();
        let l = t.sum(s);
        let w = weighted_sum(&mut t, act, 3).unwrap();
        let tot = t.add(l, w).unwrap();
        t.backward(tot).unwrap();
        (t.value(act).clone(), t.grad(x).unwrap())
    };
    let (a1, g1) = run();
    let (a2, g2) = run();
    assert_eq!(
        a1.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        a2.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
    assert_eq!(
        g1.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        g2.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn composite_gradients_match_finite_differences(seed in 0u64..1_000_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = randn(&mut rng, &[2, 4]);
        let w = randn(&mut rng, &[3, 4]);
        let g = randn(&mut rng, &[4]);
        let b = randn(&mut rng, &[4]);
        let err = grad_check_many(
            |t, v| {
                let n = t.layer_norm(v[0], v[2], v[3], 1e-5)?;
                let h = t.linear(n, v[1], None)?;
                let a = t.activation(h, ActivationKind::Tanh)?;
                let s = t.softmax(a)?;
                let z = t.l2_normalize(a)?;
                let zz = t.mul(z, s)?;
                weighted_sum(t, zz, seed ^ 0xabc)
            },
            &[x, w, g, b],
            1e-5,
        ).unwrap();
        prop_assert!(err < 1e-4, "seed {} err {}", seed, err);
    }
}
