//! Central finite-difference gradient verification.
//!
//! Used by the test suites to check backpropagated gradients against an
//! independent numerical estimate. Only forward evaluations of the supplied
//! closure are used, so the check never depends on the backward pass it
//! verifies.

use crate::scalar::Scalar;

/// Tolerances for [`check_gradient`].
#[derive(Debug, Clone, Copy)]
pub struct FdSettings {
    /// Perturbation step.
    pub step: f64,
    /// Relative tolerance against max(|analytic|, |numeric|).
    pub rel_tol: f64,
    /// Absolute floor below which disagreement is ignored.
    pub abs_floor: f64,
}

impl Default for FdSettings {
    fn default() -> Self {
        FdSettings {
            step: 1e-5,
            rel_tol: 1e-4,
            abs_floor: 1e-7,
        }
    }
}

/// Compares `analytic` against `(f(x+h) - f(x-h)) / 2h` at the given
/// coordinates. Returns the worst relative error, or a description of the
/// first failing coordinate.
pub fn check_gradient<F: Scalar>(
    settings: FdSettings,
    mut loss: impl FnMut(&[F]) -> F,
    at: &[F],
    analytic: &[F],
    coords: &[usize],
) -> Result<f64, String> {
    assert_eq!(at.len(), analytic.len(), "gradient length mismatch");
    let h = F::from_f64_lit(settings.step);
    let mut theta = at.to_vec();
    let mut worst = 0.0f64;
    for &i in coords {
        let orig = theta[i];
        theta[i] = orig + h;
        let up = loss(&theta).to_f64().unwrap();
        theta[i] = orig - h;
        let down = loss(&theta).to_f64().unwrap();
        theta[i] = orig;

        let numeric = (up - down) / (2.0 * settings.step);
        let got = analytic[i].to_f64().unwrap();
        let denom = numeric.abs().max(got.abs());
        let err = (numeric - got).abs();
        if err > settings.abs_floor && denom > 0.0 {
            let rel = err / denom;
            worst = worst.max(rel);
            if rel > settings.rel_tol {
                return Err(format!(
                    "coordinate {i}: analytic {got:.9e} vs finite-difference {numeric:.9e} \
                     (rel err {rel:.3e} > {:.1e})",
                    settings.rel_tol
                ));
            }
        }
    }
    Ok(worst)
}

/// Deterministic subsample of coordinate indices: up to `max` spread evenly
/// over `[0, len)`.
pub fn spread_coords(len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        (0..len).collect()
    } else {
        (0..max).map(|i| i * len / max).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_passes() {
        // f(x) = sum x_i^2, grad = 2x.
        let at = [0.5_f64, -1.25, 2.0];
        let grad = [1.0, -2.5, 4.0];
        let f = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        let worst =
            check_gradient(FdSettings::default(), f, &at, &grad, &[0, 1, 2]).expect("fd ok");
        assert!(worst < 1e-6);
    }

    #[test]
    fn wrong_gradient_fails() {
        let at = [1.0_f64];
        let grad = [3.0]; // should be 2.0
        let f = |x: &[f64]| x[0] * x[0];
        assert!(check_gradient(FdSettings::default(), f, &at, &grad, &[0]).is_err());
    }

    #[test]
    fn spread_covers_range() {
        let c = spread_coords(1000, 10);
        assert_eq!(c.len(), 10);
        assert_eq!(c[0], 0);
        assert!(c[9] >= 900);
        assert_eq!(spread_coords(5, 10), vec![0, 1, 2, 3, 4]);
    }
}
