use super::Tensor;

/// Central-difference gradient of a scalar function:
/// `(f(x + εe_i) − f(x − εe_i)) / 2ε` for every coordinate `i`.
pub fn finite_diff_grad(f: impl Fn(&Tensor) -> f64, x: &Tensor, eps: f64) -> Tensor {
    assert!(eps > 0.0, "finite difference step must be positive");
    let mut probe = x.clone();
    let mut grad = vec![0.0; x.len()];
    for (i, g) in grad.iter_mut().enumerate() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        *g = (up - down) / (2.0 * eps);
    }
    Tensor::from_parts(x.shape().to_vec(), grad)
}

/// Absolute floor below which gradient entries are compared on an absolute basis.
pub const GRAD_ATOL: f64 = 1e-6;

/// Largest elementwise relative error `|a − b| / max(|a|, |b|, floor)`.
pub fn rel_error_with_floor(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    assert_eq!(a.shape(), b.shape(), "gradient shapes differ");
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// [`rel_error_with_floor`] at [`GRAD_ATOL`].
pub fn max_rel_error(a: &Tensor, b: &Tensor) -> f64 {
    rel_error_with_floor(a, b, GRAD_ATOL)
}

/// Compares an analytic gradient of `f` at `x` against central differences.
///
/// Central differences carry round-off of order `|f(x)|·ε_mach/ε`, so entries
/// below `max(GRAD_ATOL, 1e-6·|f(x)|)` are judged against that floor rather than
/// their own magnitude. Returns the largest relative error.
pub fn gradient_error(f: impl Fn(&Tensor) -> f64, x: &Tensor, analytic: &Tensor, eps: f64) -> f64 {
    let floor = GRAD_ATOL.max(1e-6 * f(x).abs());
    let numeric = finite_diff_grad(&f, x, eps);
    rel_error_with_floor(analytic, &numeric, floor)
}
