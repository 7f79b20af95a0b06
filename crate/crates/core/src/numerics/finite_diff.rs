//! Central finite differences, the independent oracle for tape gradients.

use super::tensor::{Real, Tensor};

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate `i`.
pub fn finite_difference_grad<E: Real>(
    mut f: impl FnMut(&Tensor<E>) -> f64,
    x: &Tensor<E>,
    h: f64,
) -> Tensor<E> {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = E::from_f64(orig.to_f64() + h);
        let plus = f(&probe);
        probe.data_mut()[i] = E::from_f64(orig.to_f64() - h);
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = E::from_f64((plus - minus) / (2.0 * h));
    }
    out
}

/// Relative error of a single pair, `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Largest [`relative_error`] over corresponding entries.
pub fn max_relative_error<E: Real>(a: &Tensor<E>, b: &Tensor<E>, floor: f64) -> f64 {
    assert_eq!(a.shape(), b.shape(), "max_relative_error shape mismatch");
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| relative_error(x.to_f64(), y.to_f64(), floor))
        .fold(0.0, f64::max)
}
