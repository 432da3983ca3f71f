//! Central finite differences, used to validate the analytic gradients.

use crate::tensor::Matrix;

/// Denominator floor for [`relative_error`], so entries whose true gradient
/// is zero are compared absolutely.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// `(f(x + h e_k) - f(x - h e_k)) / 2h` for every entry `k` of `x`.
pub fn central_difference(x: &Matrix, h: f64, mut f: impl FnMut(&Matrix) -> f64) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for k in 0..x.len() {
        let orig = probe.data()[k];
        probe.data_mut()[k] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[k] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[k] = orig;
        out.data_mut()[k] = (plus - minus) / (2.0 * h);
    }
    out
}

/// Largest entry-wise `|a - b| / max(|a|, |b|, RELATIVE_FLOOR)`.
pub fn relative_error(analytic: &Matrix, numeric: &Matrix) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "relative_error: shape mismatch");
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(RELATIVE_FLOOR))
        .fold(0.0, f64::max)
}

/// `‖a - b‖ / max(‖a‖, ‖b‖, RELATIVE_FLOOR)` over the whole tensor; robust to
/// individual near-zero entries where the difference quotient is noise.
pub fn tensor_relative_error(analytic: &Matrix, numeric: &Matrix) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "tensor_relative_error: shape mismatch");
    let diff = analytic.sub(numeric).frobenius_norm();
    diff / analytic
        .frobenius_norm()
        .max(numeric.frobenius_norm())
        .max(RELATIVE_FLOOR)
}
