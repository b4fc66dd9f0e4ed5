use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The shared resource polytope `{z : Σz ≤ c, Σ a·z ≤ d, z ≥ γ}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSet {
    c: f64,
    d: f64,
    a: Vec<f64>,
    gamma: Vec<f64>,
}

impl ConstraintSet {
    /// Fails with [`Error::Infeasible`] when the minimum rates alone already
    /// exceed either budget, and with [`Error::InvalidInput`] on bad parameters.
    pub fn new(c: f64, d: f64, a: Vec<f64>, gamma: Vec<f64>) -> Result<Self> {
        if a.is_empty() || a.len() != gamma.len() {
            return Err(Error::InvalidInput(format!(
                "need equal, non-zero numbers of sizes and minimum rates (got {} and {})",
                a.len(),
                gamma.len()
            )));
        }
        if !(c.is_finite() && c > 0.0) || !(d.is_finite() && d > 0.0) {
            return Err(Error::InvalidInput(format!("budgets must be positive (c={c}, d={d})")));
        }
        if let Some(ai) = a.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::InvalidInput(format!("data size {ai} must be positive")));
        }
        if let Some(g) = gamma.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::InvalidInput(format!("minimum rate {g} must be non-negative")));
        }
        let rate_floor: f64 = gamma.iter().sum();
        if rate_floor > c {
            return Err(Error::Infeasible(format!(
                "sum of minimum rates {rate_floor} exceeds writing budget c={c}"
            )));
        }
        let data_floor: f64 = a.iter().zip(&gamma).map(|(a, g)| a * g).sum();
        if data_floor > d {
            return Err(Error::Infeasible(format!(
                "minimum data volume {data_floor} exceeds data budget d={d}"
            )));
        }
        Ok(Self { c, d, a, gamma })
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn d(&self) -> f64 {
        self.d
    }

    pub fn sizes(&self) -> &[f64] {
        &self.a
    }

    pub fn min_rates(&self) -> &[f64] {
        &self.gamma
    }

    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    /// Largest violation of any constraint at `z` (zero when feasible).
    pub fn max_violation(&self, z: &[f64]) -> f64 {
        assert_eq!(z.len(), self.len(), "dimension mismatch");
        let rate: f64 = z.iter().sum();
        let data: f64 = z.iter().zip(&self.a).map(|(z, a)| z * a).sum();
        let floor = z
            .iter()
            .zip(&self.gamma)
            .map(|(z, g)| g - z)
            .fold(0.0, f64::max);
        (rate - self.c).max(data - self.d).max(floor).max(0.0)
    }

    pub fn contains(&self, z: &[f64], tol: f64) -> bool {
        self.max_violation(z) <= tol
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_empty_sets() {
        assert!(matches!(
            ConstraintSet::new(10.0, 15.0, vec![2.0, 3.0, 5.0, 1.0], vec![1.0, 1.0, 1.0, 10.0]),
            Err(Error::Infeasible(_))
        ));
        assert!(matches!(
            ConstraintSet::new(10.0, 4.9, vec![2.0, 3.0], vec![1.0, 1.0]),
            Err(Error::Infeasible(_))
        ));
        assert!(ConstraintSet::new(10.0, 5.0, vec![2.0, -3.0], vec![1.0, 1.0]).is_err());
        assert!(ConstraintSet::new(0.0, 5.0, vec![2.0], vec![1.0]).is_err());
        assert!(ConstraintSet::new(1.0, 5.0, vec![2.0], vec![]).is_err());
    }

    #[test]
    fn boundary_floor_is_feasible() {
        // Σγ = c exactly
        let set = ConstraintSet::new(2.0, 15.0, vec![1.0, 1.0], vec![1.0, 1.0]).unwrap();
        assert!(set.contains(&[1.0, 1.0], 0.0));
        assert_eq!(set.max_violation(&[2.0, 1.0]), 1.0);
    }
}
