//! Device-local utility functions.
//!
//! A utility maps a device's writing frequency (Hz) to the benefit its owner
//! derives from it. Utilities are dense polynomials restricted to the interval
//! `[0, domain_max]`; only their concavity on that interval is enforced.
//! They live on the device and never appear in any wire message.

use crate::error::{Error, Result};

/// Grid spacing used by [`UtilityFunction::validate_concavity`].
pub const CONCAVITY_GRID_STEP: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct UtilityFunction {
    /// Constant term first.
    coefficients: Vec<f64>,
    domain_max: f64,
}

/// Outcome of a concavity scan.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ConcavityReport {
    Ok,
    /// First grid point where the second derivative is not strictly negative.
    Violation { x: f64, second_derivative: f64 },
}

impl ConcavityReport {
    pub fn is_ok(&self) -> bool {
        matches!(self, ConcavityReport::Ok)
    }
}

impl UtilityFunction {
    pub fn new(coefficients: Vec<f64>, domain_max: f64) -> Result<Self> {
        if coefficients.is_empty() {
            return Err(Error::InvalidInput("utility needs at least one coefficient".into()));
        }
        if let Some(c) = coefficients.iter().find(|c| !c.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite utility coefficient {c}")));
        }
        if !(domain_max.is_finite() && domain_max > 0.0) {
            return Err(Error::InvalidInput(format!(
                "domain_max must be positive and finite, got {domain_max}"
            )));
        }
        Ok(Self {
            coefficients,
            domain_max,
        })
    }

    /// Builds a utility and rejects it unless it is strictly concave on its domain.
    pub fn concave(coefficients: Vec<f64>, domain_max: f64) -> Result<Self> {
        let f = Self::new(coefficients, domain_max)?;
        match f.validate_concavity() {
            ConcavityReport::Ok => Ok(f),
            ConcavityReport::Violation {
                x,
                second_derivative,
            } => Err(Error::InvalidInput(format!(
                "utility is not strictly concave: f''({x}) = {second_derivative}"
            ))),
        }
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn domain_max(&self) -> f64 {
        self.domain_max
    }

    fn check_domain(&self, x: f64) -> Result<()> {
        if x.is_nan() || x < 0.0 || x > self.domain_max {
            return Err(Error::Domain {
                x,
                max: self.domain_max,
            });
        }
        Ok(())
    }

    pub fn eval(&self, x: f64) -> Result<f64> {
        self.check_domain(x)?;
        Ok(self.value_at(x))
    }

    pub fn derivative(&self, x: f64) -> Result<f64> {
        self.check_domain(x)?;
        Ok(self.slope_at(x))
    }

    pub fn second_derivative(&self, x: f64) -> Result<f64> {
        self.check_domain(x)?;
        Ok(self.curvature_at(x))
    }

    // Horner evaluations without the domain check, for callers that already
    // hold an in-domain point.

    pub(crate) fn value_at(&self, x: f64) -> f64 {
        self.coefficients.iter().rev().fold(0.0, |acc, &c| acc * x + c)
    }

    pub(crate) fn slope_at(&self, x: f64) -> f64 {
        self.coefficients
            .iter()
            .enumerate()
            .skip(1)
            .rev()
            .fold(0.0, |acc, (k, &c)| acc * x + k as f64 * c)
    }

    pub(crate) fn curvature_at(&self, x: f64) -> f64 {
        self.coefficients
            .iter()
            .enumerate()
            .skip(2)
            .rev()
            .fold(0.0, |acc, (k, &c)| acc * x + (k * (k - 1)) as f64 * c)
    }

    /// Scans `[0, domain_max]` on a 0.01 Hz grid (plus the right endpoint) and
    /// reports the first point where `f''` is not strictly negative.
    pub fn validate_concavity(&self) -> ConcavityReport {
        let steps = (self.domain_max / CONCAVITY_GRID_STEP).floor() as usize;
        let grid = (0..=steps)
            .map(|i| i as f64 * CONCAVITY_GRID_STEP)
            .chain(std::iter::once(self.domain_max));
        for x in grid {
            let f2 = self.curvature_at(x);
            if !(f2 < 0.0) {
                return ConcavityReport::Violation {
                    x,
                    second_derivative: f2,
                };
            }
        }
        ConcavityReport::Ok
    }
}

/// Default validity interval: no feasible rate can exceed `max(c, d / min a)`.
pub fn default_domain_max(c: f64, d: f64, sizes: &[f64]) -> f64 {
    let min_a = sizes.iter().copied().fold(f64::INFINITY, f64::min);
    let by_data = if min_a.is_finite() { d / min_a } else { 0.0 };
    c.max(by_data) + 1.0
}

#[cfg(test)]
mod tests {
    use super::*;

    // -(x+9)^2 - x^3 + 900
    fn f1() -> UtilityFunction {
        UtilityFunction::new(vec![819.0, -18.0, -1.0, -1.0], 10.0).unwrap()
    }
    // -(x-4)^2 + 500
    fn f2() -> UtilityFunction {
        UtilityFunction::new(vec![484.0, 8.0, -1.0], 10.0).unwrap()
    }
    // -(2x+3)^2 - x^3 + 110
    fn f3() -> UtilityFunction {
        UtilityFunction::new(vec![101.0, -12.0, -4.0, -1.0], 10.0).unwrap()
    }

    #[test]
    fn eval_matches_closed_forms() {
        let closed_f1 = |x: f64| -(x + 9.0).powi(2) - x.powi(3) + 900.0;
        let closed_f3 = |x: f64| -(2.0 * x + 3.0).powi(2) - x.powi(3) + 110.0;
        assert_eq!(f2().eval(4.0).unwrap(), 500.0);
        assert_eq!(closed_f1(1.0), 799.0);
        assert_eq!(f1().eval(1.0).unwrap(), 799.0);
        assert_eq!(closed_f3(1.0), 84.0);
        assert_eq!(f3().eval(1.0).unwrap(), 84.0);
    }

    #[test]
    fn derivative_examples() {
        assert_eq!(f2().derivative(4.0).unwrap(), 0.0);
        // -2(1+9) - 3
        assert_eq!(f1().derivative(1.0).unwrap(), -23.0);
        // -4(2*0+3)
        assert_eq!(f3().derivative(0.0).unwrap(), -12.0);
    }

    #[test]
    fn domain_is_enforced() {
        assert!(matches!(f1().eval(-0.1), Err(Error::Domain { .. })));
        assert!(matches!(f1().derivative(10.5), Err(Error::Domain { .. })));
        assert!(f1().eval(10.0).is_ok());
        assert!(f1().eval(f64::NAN).is_err());
    }

    #[test]
    fn concavity_scan() {
        assert!(f1().validate_concavity().is_ok());
        assert!(f3().validate_concavity().is_ok());
        let convex = UtilityFunction::new(vec![0.0, 0.0, 1.0], 10.0).unwrap();
        assert_eq!(
            convex.validate_concavity(),
            ConcavityReport::Violation {
                x: 0.0,
                second_derivative: 2.0
            }
        );
        // concave near zero, convex past x = 1
        let turning = UtilityFunction::new(vec![0.0, 0.0, -1.0, 1.0 / 3.0], 3.0).unwrap();
        match turning.validate_concavity() {
            ConcavityReport::Violation { x, .. } => assert!((x - 1.0).abs() < 1e-9),
            ConcavityReport::Ok => panic!("expected violation"),
        }
        // linear functions are not strictly concave
        assert!(!UtilityFunction::new(vec![1.0, 2.0], 1.0)
            .unwrap()
            .validate_concavity()
            .is_ok());
    }

    #[test]
    fn constructor_rejects_garbage() {
        assert!(UtilityFunction::new(vec![], 1.0).is_err());
        assert!(UtilityFunction::new(vec![f64::NAN], 1.0).is_err());
        assert!(UtilityFunction::new(vec![1.0], 0.0).is_err());
        assert!(UtilityFunction::concave(vec![0.0, 0.0, 1.0], 1.0).is_err());
    }

    #[test]
    fn default_domain() {
        assert_eq!(default_domain_max(10.0, 15.0, &[2.0, 3.0, 5.0]), 11.0);
        assert_eq!(default_domain_max(10.0, 150.0, &[2.0, 3.0]), 76.0);
    }
}
