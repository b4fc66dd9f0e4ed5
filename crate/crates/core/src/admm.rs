//! Scaled-dual consensus ADMM for separable concave utility maximization.
//!
//! Each iteration runs three steps:
//!
//! ```text
//! x_i ← argmax  f_i(x) − (ρ/2)(x − z_i + u_i)²     (per device, in parallel)
//! z   ← Π_C(x + u)                                  (coupling projection)
//! u_i ← u_i + x_i − z_i                             (per device)
//! ```
//!
//! The reported optimum is always the last `z`, which lies in the constraint
//! set, rather than `x`, which is feasible only in the limit.

use serde::{Deserialize, Serialize};

use crate::constraints::ConstraintSet;
use crate::error::{Error, Result};
use crate::projection::{Dykstra, Projector};
use crate::utility::UtilityFunction;

/// Absolute tolerance of the bisection in [`local_x_update`].
pub const X_UPDATE_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdmmIterate {
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    pub u: Vec<f64>,
    pub rho: f64,
    pub k: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
}

impl AdmmIterate {
    /// The starting point `x = z = γ`, `u = 0`.
    pub fn initial(set: &ConstraintSet, rho: f64) -> Self {
        let gamma = set.min_rates().to_vec();
        Self {
            x: gamma.clone(),
            u: vec![0.0; gamma.len()],
            z: gamma,
            rho,
            k: 0,
            primal_residual: f64::INFINITY,
            dual_residual: f64::INFINITY,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdmmSettings {
    pub rho: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for AdmmSettings {
    fn default() -> Self {
        Self {
            rho: 1.0,
            tol: 1e-4,
            max_iter: 1000,
        }
    }
}

impl AdmmSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho.is_finite() && self.rho > 0.0) {
            return Err(Error::InvalidInput(format!("rho must be positive, got {}", self.rho)));
        }
        if !(self.tol.is_finite() && self.tol > 0.0) {
            return Err(Error::InvalidInput(format!("tol must be positive, got {}", self.tol)));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidInput("max_iter must be at least 1".into()));
        }
        Ok(())
    }
}

/// Maximizer of `f(x) − (ρ/2)(x − (z − u))²` over `[0, f.domain_max()]`.
///
/// The penalized objective's derivative is strictly decreasing, so its root is
/// bracketed and found by bisection; when the derivative keeps one sign over
/// the whole interval the corresponding endpoint is returned.
pub fn local_x_update(f: &UtilityFunction, z: f64, u: f64, rho: f64) -> Result<f64> {
    if !(rho.is_finite() && rho > 0.0) {
        return Err(Error::InvalidInput(format!("rho must be positive, got {rho}")));
    }
    if !(z.is_finite() && u.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite consensus input z={z}, u={u}")));
    }
    let target = z - u;
    let slope = |x: f64| f.slope_at(x) - rho * (x - target);

    let (mut lo, mut hi) = (0.0, f.domain_max());
    if slope(lo) <= 0.0 {
        return Ok(lo);
    }
    if slope(hi) >= 0.0 {
        return Ok(hi);
    }
    while hi - lo > X_UPDATE_TOL {
        let mid = 0.5 * (lo + hi);
        if slope(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

pub fn dual_update(u: f64, x_next: f64, z_next: f64) -> f64 {
    u + x_next - z_next
}

/// `(‖x − z‖₂, ρ‖z − z_prev‖₂)` between two consecutive iterates.
pub fn residuals(prev: &AdmmIterate, next: &AdmmIterate) -> (f64, f64) {
    assert_eq!(prev.z.len(), next.z.len(), "iterate length mismatch");
    let primal = l2_distance(&next.x, &next.z);
    let dual = next.rho * l2_distance(&next.z, &prev.z);
    (primal, dual)
}

pub(crate) fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone)]
pub struct AdmmSolution {
    pub x_star: Vec<f64>,
    pub trace: Vec<AdmmIterate>,
}

impl AdmmSolution {
    pub fn iterations(&self) -> usize {
        self.trace.len()
    }

    pub fn last(&self) -> &AdmmIterate {
        self.trace.last().expect("trace holds at least one iterate")
    }
}

/// Runs ADMM in one process with the default Dykstra projection.
pub fn solve_centralized(
    fs: &[UtilityFunction],
    set: &ConstraintSet,
    settings: &AdmmSettings,
) -> Result<AdmmSolution> {
    solve_centralized_with(fs, set, settings, &Dykstra::default())
}

pub fn solve_centralized_with(
    fs: &[UtilityFunction],
    set: &ConstraintSet,
    settings: &AdmmSettings,
    projector: &dyn Projector,
) -> Result<AdmmSolution> {
    settings.validate()?;
    if fs.len() != set.len() {
        return Err(Error::InvalidInput(format!(
            "{} utilities for a {}-device constraint set",
            fs.len(),
            set.len()
        )));
    }
    let rho = settings.rho;
    let mut current = AdmmIterate::initial(set, rho);
    let mut trace = Vec::with_capacity(64);

    for k in 1..=settings.max_iter {
        let x = fs
            .iter()
            .zip(current.z.iter().zip(&current.u))
            .map(|(f, (&z, &u))| local_x_update(f, z, u, rho))
            .collect::<Result<Vec<_>>>()?;
        let masked: Vec<f64> = x.iter().zip(&current.u).map(|(x, u)| x + u).collect();
        let z = projector.project(&masked, set)?;
        let u = current
            .u
            .iter()
            .zip(x.iter().zip(&z))
            .map(|(&u, (&x, &z))| dual_update(u, x, z))
            .collect();
        let mut next = AdmmIterate {
            x,
            z,
            u,
            rho,
            k,
            primal_residual: 0.0,
            dual_residual: 0.0,
        };
        let (primal, dual) = residuals(&current, &next);
        next.primal_residual = primal;
        next.dual_residual = dual;
        trace.push(next.clone());
        current = next;
        if primal < settings.tol && dual < settings.tol {
            return Ok(AdmmSolution {
                x_star: current.z,
                trace,
            });
        }
    }
    Err(Error::NotConverged {
        iterations: settings.max_iter,
        trace,
    })
}

/// `Σ f_i(x_i)`.
pub fn total_utility(fs: &[UtilityFunction], x: &[f64]) -> Result<f64> {
    if fs.len() != x.len() {
        return Err(Error::InvalidInput(format!(
            "{} utilities evaluated at a {}-vector",
            fs.len(),
            x.len()
        )));
    }
    fs.iter().zip(x).map(|(f, &x)| f.eval(x)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn f1() -> UtilityFunction {
        UtilityFunction::new(vec![819.0, -18.0, -1.0, -1.0], 11.0).unwrap()
    }
    fn f2() -> UtilityFunction {
        UtilityFunction::new(vec![484.0, 8.0, -1.0], 11.0).unwrap()
    }
    fn f3() -> UtilityFunction {
        UtilityFunction::new(vec![101.0, -12.0, -4.0, -1.0], 11.0).unwrap()
    }

    #[test]
    fn x_update_examples() {
        assert!((local_x_update(&f2(), 4.0, 0.0, 1.0).unwrap() - 4.0).abs() < 1e-8);
        // −2(x−4) − x = 0
        assert!((local_x_update(&f2(), 0.0, 0.0, 1.0).unwrap() - 8.0 / 3.0).abs() < 1e-8);
        // −3x² − 3x − 18 + 24 = 0 → x = 1
        let disc: f64 = 9.0 + 4.0 * 3.0 * 6.0;
        let root = (-3.0 + disc.sqrt()) / 6.0;
        assert!((root - 1.0).abs() < 1e-15);
        assert!((local_x_update(&f1(), 24.0, 0.0, 1.0).unwrap() - root).abs() < 1e-8);
        assert_eq!(local_x_update(&f1(), 0.0, 0.0, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn x_update_clamps_to_domain_top() {
        let f = UtilityFunction::new(vec![0.0, 100.0, -0.01], 5.0).unwrap();
        assert_eq!(local_x_update(&f, 50.0, 0.0, 1.0).unwrap(), 5.0);
    }

    #[test]
    fn x_update_rejects_bad_rho() {
        assert!(local_x_update(&f2(), 1.0, 0.0, 0.0).is_err());
        assert!(local_x_update(&f2(), 1.0, 0.0, -1.0).is_err());
        assert!(local_x_update(&f2(), f64::NAN, 0.0, 1.0).is_err());
    }

    #[test]
    fn dual_update_examples() {
        assert_eq!(dual_update(0.0, 4.0, 4.0), 0.0);
        assert_eq!(dual_update(0.5, 3.0, 2.5), 1.0);
        assert!((dual_update(-0.2, 1.0, 1.3) - (-0.5)).abs() < 1e-15);
    }

    fn iterate(x: &[f64], z: &[f64]) -> AdmmIterate {
        AdmmIterate {
            x: x.to_vec(),
            z: z.to_vec(),
            u: vec![0.0; x.len()],
            rho: 1.0,
            k: 0,
            primal_residual: 0.0,
            dual_residual: 0.0,
        }
    }

    #[test]
    fn residual_examples() {
        let a = iterate(&[1.0, 4.0], &[1.0, 4.0]);
        assert_eq!(residuals(&a, &a), (0.0, 0.0));
        let prev = iterate(&[1.0, 3.0], &[1.0, 3.0]);
        assert_eq!(residuals(&prev, &a), (0.0, 1.0));
        let flat = iterate(&[2.0, 2.0], &[1.0, 1.0]);
        let (p, d) = residuals(&flat, &flat);
        assert!((p - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(d, 0.0);
    }

    #[test]
    fn scenario_a() {
        let set = ConstraintSet::new(10.0, 15.0, vec![2.0, 3.0], vec![1.0, 1.0]).unwrap();
        let sol = solve_centralized(&[f1(), f2()], &set, &AdmmSettings::default()).unwrap();
        assert!((sol.x_star[0] - 1.0).abs() < 1e-3);
        assert!((sol.x_star[1] - 4.0).abs() < 1e-3);
        assert!(sol.last().primal_residual < 1e-4);
        assert!(set.contains(&sol.x_star, 1e-9));
    }

    #[test]
    fn scenario_b() {
        let set = ConstraintSet::new(10.0, 15.0, vec![2.0, 3.0, 5.0], vec![1.0; 3]).unwrap();
        let fs = [f1(), f2(), f3()];
        let sol = solve_centralized(&fs, &set, &AdmmSettings::default()).unwrap();
        for (x, want) in sol.x_star.iter().zip([1.0, 8.0 / 3.0, 1.0]) {
            assert!((x - want).abs() < 1e-3, "{:?}", sol.x_star);
        }
        let u = total_utility(&fs, &sol.x_star).unwrap();
        assert!((u - 1381.22).abs() < 0.01, "{u}");
    }

    #[test]
    fn single_device_unconstrained_optimum() {
        let set = ConstraintSet::new(10.0, 15.0, vec![3.0], vec![1.0]).unwrap();
        // grid search over the feasible interval [1, 5]
        let f = f2();
        let grid_best = (0..=40_000)
            .map(|i| 1.0 + i as f64 * 1e-4)
            .max_by(|a, b| f.value_at(*a).total_cmp(&f.value_at(*b)))
            .unwrap();
        let sol = solve_centralized(&[f], &set, &AdmmSettings::default()).unwrap();
        assert!((sol.x_star[0] - grid_best).abs() < 1e-3);
        assert!((sol.x_star[0] - 4.0).abs() < 1e-3);
    }

    #[test]
    fn iteration_cap_reports_trace() {
        let set = ConstraintSet::new(10.0, 15.0, vec![2.0, 3.0], vec![1.0, 1.0]).unwrap();
        let settings = AdmmSettings {
            max_iter: 2,
            ..AdmmSettings::default()
        };
        match solve_centralized(&[f1(), f2()], &set, &settings) {
            Err(Error::NotConverged { iterations, trace }) => {
                assert_eq!(iterations, 2);
                assert_eq!(trace.len(), 2);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn total_utility_table_values() {
        let fs = [f1(), f2(), f3()];
        let admm = total_utility(&fs, &[1.0, 8.0 / 3.0, 1.0]).unwrap();
        assert!((admm - 1381.2222).abs() < 1e-3);
        assert!((total_utility(&fs, &[2.0, 3.0, 5.0]).unwrap() - 1086.0).abs() < 1e-9);
        // closed-form arithmetic at x = 10/3 for each term
        let x: f64 = 10.0 / 3.0;
        let expected = (-(x + 9.0).powi(2) - x.powi(3) + 900.0)
            + (-(x - 4.0).powi(2) + 500.0)
            + (-(2.0 * x + 3.0).powi(2) - x.powi(3) + 110.0);
        let avg = total_utility(&fs, &[x; 3]).unwrap();
        assert!((avg - expected).abs() < 1e-9);
        assert!((avg - 1189.93).abs() < 0.005);
        assert!(total_utility(&fs, &[1.0, 2.0]).is_err());
        assert!(total_utility(&fs, &[1.0, 2.0, 12.0]).is_err());
    }
}
