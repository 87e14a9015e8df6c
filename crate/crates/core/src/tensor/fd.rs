//! Central-difference gradient oracle.

/// Central finite differences of a scalar function: `(f(x+h·e_i) - f(x-h·e_i)) / 2h`.
///
/// This is the independent oracle the autodiff engine is validated against.
/// A degenerate step (zero or non-finite) is a hard error.
pub fn finite_difference_grad(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    assert!(h.is_finite() && h > 0.0, "finite_difference_grad: degenerate step h = {h}");
    let mut out = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = f(&probe);
        probe[i] = orig - h;
        let fm = f(&probe);
        probe[i] = orig;
        out[i] = (fp - fm) / (2.0 * h);
    }
    out
}
