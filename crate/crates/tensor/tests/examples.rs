use modnmt_tensor::{finite_difference_gradient, Adam, AdamConfig, Graph, Parameter, Tensor, TensorError};
use proptest::prelude::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn matmul_identity_and_hand_values() {
    let x = t(&[2, 3], &[1.0, -2.0, 3.5, 0.25, 7.0, -1.0]);
    assert_eq!(Tensor::eye(2).unwrap().matmul(&x).unwrap(), x);

    let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
    let b = t(&[2, 1], &[1.0, 1.0]);
    assert_eq!(a.matmul(&b).unwrap().data(), &[3.0, 7.0]);

    let z = Tensor::zeros([3, 4]).unwrap();
    let any = t(&[4, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
    assert_eq!(z.matmul(&any).unwrap(), Tensor::zeros([3, 2]).unwrap());
}

#[test]
fn gelu_hand_values() {
    let mut g = Graph::new();
    let x = g.input(&t(&[3], &[0.0, 1.0, -1.0])).unwrap();
    let y = g.gelu(x).unwrap();
    // 0.5 * x * (1 + tanh(sqrt(2 / pi) * (x + 0.044715 x^3)))
    let expect = [0.0, 0.841_191_990_608_276_8, -0.158_808_009_391_723_2];
    for (a, b) in g.value(y).iter().zip(expect) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let a = Tensor::zeros([2, 3]).unwrap();
    let b = Tensor::zeros([2, 3]).unwrap();
    match a.matmul(&b) {
        Err(TensorError::Shape { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
    let msg = a.matmul(&b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]"), "{msg}");
}

#[test]
fn softmax_examples() {
    let u = t(&[4], &[0.0; 4]).softmax(0).unwrap();
    assert_eq!(u.data(), &[0.25; 4]);

    let s = t(&[2], &[1f64.ln(), 3f64.ln()]).softmax(0).unwrap();
    assert!((s.data()[0] - 0.25).abs() < 1e-15);
    assert!((s.data()[1] - 0.75).abs() < 1e-15);

    let big = t(&[2], &[1000.0, 0.0]).softmax(0).unwrap();
    assert!(big.is_finite());
    assert!((big.data()[0] - 1.0).abs() < 1e-15);
    assert!(big.data()[1] < 1e-300);
}

#[test]
fn softmax_along_inner_axis() {
    let x = t(&[2, 2], &[0.0, 1f64.ln(), 0.0, 3f64.ln()]);
    let s = x.softmax(0).unwrap();
    assert_eq!(s.data()[0], 0.5);
    assert!((s.data()[1] - 0.25).abs() < 1e-15);
    assert!(matches!(x.softmax(2), Err(TensorError::InvalidAxis { .. })));
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant(
        rows in 1usize..6,
        vals in proptest::collection::vec(-30.0f64..30.0, 48),
        shift in -50.0f64..50.0,
    ) {
        let n = 8;
        let x = Tensor::new([rows, n], vals[..rows * n].to_vec()).unwrap();
        let s = x.softmax(1).unwrap();
        for r in s.data().chunks(n) {
            prop_assert!(r.iter().all(|&p| p >= 0.0));
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let shifted = Tensor::new([rows, n], x.data().iter().map(|v| v + shift).collect()).unwrap();
        let s2 = shifted.softmax(1).unwrap();
        for (a, b) in s.data().iter().zip(s2.data()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}

fn ce(logits: &[f64], shape: [usize; 2], targets: &[usize], pad: &[bool]) -> Result<f64, TensorError> {
    let mut g = Graph::new();
    let l = g.constant(shape, logits.to_vec())?;
    let loss = g.cross_entropy(l, targets, pad)?;
    Ok(g.scalar(loss))
}

#[test]
fn cross_entropy_examples() {
    let uniform = ce(&[0.0; 4], [1, 4], &[2], &[false]).unwrap();
    assert!((uniform - 4f64.ln()).abs() < 1e-12);
    assert!((uniform - 1.386294).abs() < 1e-6);

    let sure = ce(&[20.0, 0.0, 0.0, 0.0], [1, 4], &[0], &[false]).unwrap();
    assert!(sure < 1e-8);

    let hand = ce(&[3f64.ln(), 1f64.ln()], [1, 2], &[0], &[false]).unwrap();
    assert!((hand - (-(0.75f64).ln())).abs() < 1e-12);
    assert!((hand - 0.287682).abs() < 1e-6);
}

#[test]
fn cross_entropy_masking() {
    // The padded row has a wildly wrong target but must not contribute.
    let v = ce(&[0.0, 0.0, 50.0, -50.0], [2, 2], &[0, 1], &[false, true]).unwrap();
    assert!((v - 2f64.ln()).abs() < 1e-12);
    assert!(matches!(
        ce(&[0.0, 0.0], [1, 2], &[0], &[true]),
        Err(TensorError::DegenerateBatch { .. })
    ));
    assert!(matches!(
        ce(&[0.0, 0.0], [1, 2], &[5], &[false]),
        Err(TensorError::IndexOutOfRange { .. })
    ));
}

#[test]
fn backward_examples() {
    let mut g = Graph::new();
    let w = g.input(&t(&[3], &[0.5, -1.0, 2.0]).with_grad()).unwrap();
    let loss = g.sum(w).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(w).unwrap(), &[1.0, 1.0, 1.0]);

    // A frozen parameter enters as a constant: no gradient reaches it.
    let mut p = Parameter::new("w", t(&[2], &[1.0, 2.0]));
    p.set_frozen(true);
    let mut g = Graph::new();
    let pv = g.param(&p).unwrap();
    let free = g.input(&t(&[2], &[3.0, 4.0]).with_grad()).unwrap();
    let prod = g.mul(pv, free).unwrap();
    let loss = g.sum(prod).unwrap();
    let grads = g.backward(loss).unwrap();
    assert!(grads.get(pv).is_none());
    assert_eq!(grads.get(free).unwrap(), &[1.0, 2.0]);
    grads.accumulate_into(pv, &mut p).unwrap();
    assert_eq!(p.grad(), &[0.0, 0.0]);

    // Unreachable leaves keep no gradient.
    let mut g = Graph::new();
    let a = g.input(&t(&[1], &[1.0]).with_grad()).unwrap();
    let b = g.input(&t(&[1], &[1.0]).with_grad()).unwrap();
    let loss = g.scale(a, 2.0).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(a).unwrap(), &[2.0]);
    assert!(grads.get(b).is_none());
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::new();
    let w = g.input(&t(&[2], &[1.0, 2.0]).with_grad()).unwrap();
    assert!(matches!(g.backward(w), Err(TensorError::NonScalarLoss(_))));
}

#[test]
fn non_finite_values_are_errors() {
    let mut g = Graph::new();
    let x = g.constant([1], vec![-1.0]).unwrap();
    assert!(matches!(g.sqrt(x), Err(TensorError::NonFinite { op: "sqrt" })));
}

fn param(vals: &[f64]) -> Parameter {
    Parameter::new("p", t(&[vals.len()], vals))
}

#[test]
fn adam_zero_gradient_keeps_parameter() {
    let mut p = param(&[1.0, -2.0]);
    let mut adam = Adam::new(AdamConfig::default());
    adam.step(&mut [&mut p], 0.1).unwrap();
    assert_eq!(p.data(), &[1.0, -2.0]);
    assert_eq!(adam.step_count(), 1);
}

#[test]
fn adam_first_step_moves_by_learning_rate() {
    let lr = 1e-3;
    let mut p = param(&[1.0, -2.0, 0.5]);
    p.grad_mut().copy_from_slice(&[0.3, -7.0, 1e-2]);
    let before = p.data().to_vec();
    let mut adam = Adam::new(AdamConfig::default());
    adam.step(&mut [&mut p], lr).unwrap();
    for ((a, b), g) in p.data().iter().zip(&before).zip([0.3, -7.0, 1e-2]) {
        let delta = a - b;
        assert!(((delta.abs() - lr) / lr).abs() < 1e-6, "delta {delta}");
        assert_eq!(delta.signum(), -f64::signum(g));
    }
    assert!((adam.first_moment("p").unwrap()[0] - 0.03).abs() < 1e-15);
}

#[test]
fn adam_skips_frozen_and_zero_lr() {
    let mut frozen = param(&[1.0, 2.0]);
    frozen.grad_mut().copy_from_slice(&[5.0, 5.0]);
    frozen.set_frozen(true);
    let mut free = Parameter::new("q", t(&[2], &[0.1, 0.2]));
    free.grad_mut().copy_from_slice(&[1.0, -1.0]);
    let mut adam = Adam::new(AdamConfig::default());
    adam.step(&mut [&mut frozen, &mut free], 0.0).unwrap();
    assert_eq!(frozen.data(), &[1.0, 2.0]);
    assert_eq!(free.data(), &[0.1, 0.2]);
    assert!(adam.first_moment("p").is_none());
    adam.step(&mut [&mut frozen, &mut free], 0.5).unwrap();
    assert_eq!(frozen.data(), &[1.0, 2.0]);
    assert_ne!(free.data(), &[0.1, 0.2]);
}

#[test]
fn adam_rejects_non_finite_gradient_without_side_effects() {
    let mut a = Parameter::new("a", t(&[1], &[1.0]));
    a.grad_mut()[0] = 1.0;
    let mut b = Parameter::new("b", t(&[1], &[1.0]));
    b.grad_mut()[0] = f64::NAN;
    let mut adam = Adam::new(AdamConfig::default());
    let err = adam.step(&mut [&mut a, &mut b], 0.1).unwrap_err();
    assert_eq!(err, TensorError::NonFiniteGradient { name: "b".into() });
    assert_eq!(a.data(), &[1.0]);
    assert_eq!(adam.step_count(), 0);
}

#[test]
fn accumulated_step_matches_mean_gradient() {
    let mut a = param(&[1.0]);
    let mut b = param(&[1.0]);
    a.grad_mut()[0] = 0.6; // sum of three micro-batch gradients
    b.grad_mut()[0] = 0.2; // their mean
    let mut oa = Adam::new(AdamConfig::default());
    let mut ob = Adam::new(AdamConfig::default());
    oa.step_accumulated(&mut [&mut a], 0.01, 3).unwrap();
    ob.step(&mut [&mut b], 0.01).unwrap();
    oa.step_accumulated(&mut [&mut a], 0.01, 3).unwrap();
    ob.step(&mut [&mut b], 0.01).unwrap();
    assert!((a.data()[0] - b.data()[0]).abs() < 1e-15);
}

#[test]
fn finite_difference_examples() {
    let x = t(&[1], &[3.0]);
    let g = finite_difference_gradient(|v| v.data()[0] * v.data()[0], &x, 1e-4);
    assert!((g.data()[0] - 6.0).abs() < 1e-6);
    let c = finite_difference_gradient(|_| 42.0, &x, 1e-4);
    assert_eq!(c.data(), &[0.0]);
}
