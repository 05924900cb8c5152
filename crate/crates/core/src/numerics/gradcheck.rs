//! Central finite-difference checking of hand-written adjoints.

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

/// Relative-error floor in the denominator.
pub const REL_FLOOR: f64 = 1e-8;
pub const DEFAULT_DELTA: f64 = 1e-5;
/// Rounding headroom, in units of `f64::EPSILON * |f|`, for a long forward pass.
pub const NOISE_ULPS: f64 = 100.0;

/// Smallest gradient difference a central difference of `f` can resolve.
///
/// Each evaluation carries rounding error proportional to `|f|`; dividing by
/// the step turns that into an absolute error on the estimate.
pub fn fd_resolution(up: f64, down: f64, delta: f64) -> f64 {
    NOISE_ULPS * f64::EPSILON * up.abs().max(down.abs()).max(1.0) / delta
}

/// Relative error of one coordinate, or zero when the analytic and numeric
/// values agree to within the finite-difference resolution.
pub fn coordinate_error(analytic: f64, numeric: f64, resolution: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff <= resolution {
        0.0
    } else {
        diff / numeric.abs().max(REL_FLOOR)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Largest `|analytic - numeric|` over all coordinates, before the resolution cut.
    pub max_abs_err: f64,
    /// `(input index, flat element index)` of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

impl Default for GradCheckReport {
    fn default() -> Self {
        Self::new()
    }
}

impl GradCheckReport {
    pub fn new() -> Self {
        GradCheckReport {
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            worst: (0, 0),
            analytic: 0.0,
            numeric: 0.0,
            coordinates: 0,
        }
    }

    /// Fold in one coordinate given the analytic value and the two evaluations of `f`.
    pub fn observe(
        &mut self,
        index: (usize, usize),
        analytic: f64,
        up: f64,
        down: f64,
        delta: f64,
    ) {
        let numeric = (up - down) / (2.0 * delta);
        let rel = coordinate_error(analytic, numeric, fd_resolution(up, down, delta));
        self.coordinates += 1;
        self.max_abs_err = self.max_abs_err.max((analytic - numeric).abs());
        if rel > self.max_rel_err {
            self.max_rel_err = rel;
            self.worst = index;
            self.analytic = analytic;
            self.numeric = numeric;
        }
    }

    pub fn ensure(&self, tol: f64) -> Result<()> {
        if self.max_rel_err <= tol {
            Ok(())
        } else {
            Err(Error::GradCheck(format!(
                "rel err {:.3e} > {tol:.1e} at input {} element {} (analytic {:.6e}, numeric {:.6e})",
                self.max_rel_err, self.worst.0, self.worst.1, self.analytic, self.numeric
            )))
        }
    }
}

/// Compare `analytic[i]` against `d f / d inputs[i]` estimated by central
/// differences with step `delta`, over every coordinate of every input.
pub fn grad_check<F>(
    mut f: F,
    inputs: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    delta: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor<f64>]) -> f64,
{
    if inputs.len() != analytic.len() {
        return Err(Error::GradCheck(format!(
            "{} inputs but {} analytic gradients",
            inputs.len(),
            analytic.len()
        )));
    }
    let mut work = inputs.to_vec();
    let mut report = GradCheckReport::new();
    for (ti, grad) in analytic.iter().enumerate() {
        if grad.shape() != inputs[ti].shape() {
            return Err(Error::dim("grad_check", inputs[ti].shape(), grad.shape()));
        }
        for j in 0..inputs[ti].len() {
            let x0 = inputs[ti].data()[j];
            work[ti].data_mut()[j] = x0 + delta;
            let up = f(&work);
            work[ti].data_mut()[j] = x0 - delta;
            let down = f(&work);
            work[ti].data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * delta);
            let a = grad.data()[j];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::NonFinite {
                    what: "gradient".into(),
                    location: format!("input {ti} element {j} (analytic {a}, numeric {numeric})"),
                });
            }
            report.observe((ti, j), a, up, down, delta);
        }
    }
    Ok(report)
}

/// Standard-normal tensor, a convenient random fixture.
pub fn random_like(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.normal())
}

/// Scalar objective `sum(y * proj)`; its gradient with respect to `y` is `proj`.
pub fn weighted_sum(y: &Tensor<f64>, proj: &Tensor<f64>) -> f64 {
    assert_eq!(y.shape(), proj.shape());
    y.dot(proj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ops::{linear, linear_backward};

    #[test]
    fn composition_of_linear_maps_is_exact() {
        let mut rng = Rng::new(1);
        let x = random_like(&[3, 4], &mut rng);
        let w1 = random_like(&[5, 4], &mut rng);
        let w2 = random_like(&[2, 5], &mut rng);
        let proj = random_like(&[3, 2], &mut rng);
        let h = linear(&x, &w1, None).unwrap();
        let g2 = linear_backward(&h, &w2, &proj).unwrap();
        let g1 = linear_backward(&x, &w1, &g2.dx).unwrap();
        let report = grad_check(
            |t| {
                let h = linear(&t[0], &t[1], None).unwrap();
                weighted_sum(&linear(&h, &t[2], None).unwrap(), &proj)
            },
            &[x, w1, w2],
            &[g1.dx, g1.dw, g2.dw],
            DEFAULT_DELTA,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-8, "{report:?}");
        assert_eq!(report.coordinates, 12 + 20 + 10);
    }

    #[test]
    fn corrupted_adjoint_is_caught() {
        let mut rng = Rng::new(2);
        let x = random_like(&[2, 3], &mut rng);
        let w = random_like(&[2, 3], &mut rng);
        let proj = random_like(&[2, 2], &mut rng);
        let g = linear_backward(&x, &w, &proj).unwrap();
        let mut bad = g.dw.clone();
        bad.data_mut()[4] += 1.0;
        let f = |t: &[Tensor<f64>]| weighted_sum(&linear(&t[0], &t[1], None).unwrap(), &proj);
        let report = grad_check(f, &[x, w], &[g.dx, bad], DEFAULT_DELTA).unwrap();
        assert!(report.max_rel_err > 1e-2);
        assert_eq!(report.worst, (1, 4));
        assert!(report.ensure(1e-6).is_err());
    }

    #[test]
    fn non_finite_gradient_reports_location() {
        let x = Tensor::<f64>::ones(&[2]);
        let mut bad = Tensor::zeros(&[2]);
        bad.data_mut()[1] = f64::NAN;
        let err = grad_check(|t| t[0].sum(), &[x], &[bad], DEFAULT_DELTA).unwrap_err();
        assert!(err.to_string().contains("element 1"), "{err}");
    }
}
