//! Central finite-difference gradient checks in f64.

/// Relative-error floor: entries whose analytic and numeric gradients are
/// both below this magnitude are compared absolutely.
pub const REL_FLOOR: f64 = 1e-3;

/// Numerical gradient of `f` at `x` by central differences with step `h`.
pub fn numeric_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let fp = f(&probe);
            probe[i] = orig - h;
            let fm = f(&probe);
            probe[i] = orig;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR))
        .fold(0.0, f64::max)
}

/// Compares `analytic` against central differences of `f` at `x`; returns the
/// maximum relative error.
pub fn grad_check(f: impl FnMut(&[f64]) -> f64, analytic: &[f64], x: &[f64], h: f64) -> f64 {
    let numeric = numeric_grad(f, x, h);
    max_rel_error(analytic, &numeric)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_on_quadratic() {
        let x = [1.0, -2.0, 0.5];
        let f = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>();
        let analytic: Vec<f64> = x.iter().map(|a| 2.0 * a).collect();
        assert!(grad_check(f, &analytic, &x, 1e-5) < 1e-9);
    }

    #[test]
    fn flags_wrong_gradient() {
        let x = [1.0];
        assert!(grad_check(|v| v[0] * v[0], &[1.0], &x, 1e-5) > 0.4);
    }
}
