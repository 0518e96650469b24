//! Central finite-difference gradient checking in 64-bit precision.

use super::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Relative errors below this denominator are measured absolutely, so
/// entries whose true gradient is essentially zero do not dominate.
const DENOM_FLOOR: f64 = 1e-6;

/// Compares `analytic` against central differences of `f` around `x`.
///
/// The step for entry `i` is `1e-5 · max(1, |x_i|)`.
pub fn grad_check(
    f: impl Fn(&Tensor<f64>) -> f64,
    x: &Tensor<f64>,
    analytic: &Tensor<f64>,
    tolerance: f64,
) -> GradCheckReport {
    assert_eq!(x.shape(), analytic.shape(), "analytic gradient shape");
    let mut probe = x.clone();
    let mut max_rel_err = 0.0f64;
    let mut worst_index = 0;
    for i in 0..x.len() {
        let xi = x.data()[i];
        let h = 1e-5 * xi.abs().max(1.0);
        probe.data_mut()[i] = xi + h;
        let fp = f(&probe);
        probe.data_mut()[i] = xi - h;
        let fm = f(&probe);
        probe.data_mut()[i] = xi;
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(DENOM_FLOOR);
        if rel > max_rel_err || rel.is_nan() {
            max_rel_err = if rel.is_nan() { f64::INFINITY } else { rel };
            worst_index = i;
        }
    }
    GradCheckReport {
        max_rel_err,
        worst_index,
        tolerance,
        passed: max_rel_err < tolerance,
    }
}
