//! Whole-problem solvers selectable by name.

use std::sync::Arc;

use crate::admm::{solve_centralized_with, AdmmSettings};
use crate::constraints::ConstraintSet;
use crate::error::Result;
use crate::oracle::solve_oracle;
use crate::projection::Projector;
use crate::registry::{Named, Registry};
use crate::utility::UtilityFunction;

pub trait RateSolver: Named + Send + Sync {
    /// Optimal rate vector for the given utilities and budget.
    fn solve(&self, fs: &[UtilityFunction], set: &ConstraintSet) -> Result<Vec<f64>>;
}

pub struct Admm {
    pub settings: AdmmSettings,
    pub projector: Arc<dyn Projector>,
}

impl Named for Admm {
    fn name(&self) -> &'static str {
        "admm"
    }
}

impl RateSolver for Admm {
    fn solve(&self, fs: &[UtilityFunction], set: &ConstraintSet) -> Result<Vec<f64>> {
        solve_centralized_with(fs, set, &self.settings, self.projector.as_ref()).map(|s| s.x_star)
    }
}

pub struct Oracle;

impl Named for Oracle {
    fn name(&self) -> &'static str {
        "oracle"
    }
}

impl RateSolver for Oracle {
    fn solve(&self, fs: &[UtilityFunction], set: &ConstraintSet) -> Result<Vec<f64>> {
        solve_oracle(fs, set)
    }
}

pub fn registry(settings: AdmmSettings, projector: Arc<dyn Projector>) -> Registry<dyn RateSolver> {
    let mut reg: Registry<dyn RateSolver> = Registry::empty("solver");
    reg.register(Arc::new(Admm { settings, projector }));
    reg.register(Arc::new(Oracle));
    reg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projection::Dykstra;

    #[test]
    fn both_solvers_agree_on_two_devices() {
        let reg = registry(AdmmSettings::default(), Arc::new(Dykstra::default()));
        let fs = vec![
            UtilityFunction::new(vec![819.0, -18.0, -1.0, -1.0], 11.0).unwrap(),
            UtilityFunction::new(vec![484.0, 8.0, -1.0], 11.0).unwrap(),
        ];
        let set = ConstraintSet::new(10.0, 15.0, vec![2.0, 3.0], vec![1.0, 1.0]).unwrap();
        let a = reg.get("admm").unwrap().solve(&fs, &set).unwrap();
        let b = reg.get("oracle").unwrap().solve(&fs, &set).unwrap();
        assert!(a.iter().zip(&b).all(|(a, b)| (a - b).abs() < 1e-3));
    }
}
