use crate::tensor::Tensor;

/// Central-difference estimate of `d f / d x` for every coordinate of `x`.
///
/// `f` is evaluated at `x ± eps·e_i`; `eps` is expected in `[1e-5, 1e-3]`.
pub fn finite_difference_gradient<F>(mut f: F, x: &Tensor, eps: f64) -> Tensor
where
    F: FnMut(&Tensor) -> f64,
{
    let mut probe = x.clone();
    let mut grad = vec![0.0; x.numel()];
    for (i, g) in grad.iter_mut().enumerate() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        *g = (plus - minus) / (2.0 * eps);
    }
    Tensor::new(x.shape().to_vec(), grad).expect("same shape as input")
}

/// `|a - b| / max(|a|, |b|, floor)`: relative error that stays meaningful near zero.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
