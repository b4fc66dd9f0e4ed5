//! Euclidean projection onto the resource polytope.
//!
//! Two interchangeable routes are provided:
//!
//! - [`Dykstra`]: alternating projections over the rate halfspace and the
//!   data halfspace, each intersected with the minimum-rate box (those two
//!   sub-projections are exact), with Dykstra's correction terms so the limit
//!   is the exact projection rather than just a feasible point.
//! - [`DualBisection`]: bisection on the data-budget multiplier around the
//!   exact rate-and-box sub-projection. Exact and `O(N log N)` per step, with
//!   no dependence on the angle between the two halfspaces.
//! - [`ActiveSet`]: enumerates every combination of active constraints and
//!   solves the resulting equality-constrained least-squares problem in closed
//!   form. Exponential in `N`, intended for small instances and as a
//!   cross-check for Dykstra.

use std::sync::Arc;

use crate::constraints::ConstraintSet;
use crate::error::{Error, Result};
use crate::registry::{Named, Registry};

/// Projection strategy, selectable by name.
pub trait Projector: Named + Send + Sync {
    fn project(&self, v: &[f64], set: &ConstraintSet) -> Result<Vec<f64>>;
}

pub fn registry() -> Registry<dyn Projector> {
    let mut reg: Registry<dyn Projector> = Registry::empty("projection");
    reg.register(Arc::new(Dykstra::default()));
    reg.register(Arc::new(DualBisection));
    reg.register(Arc::new(ActiveSet));
    reg
}

/// Projects `v` with the default (Dykstra) strategy.
pub fn project_onto_c(v: &[f64], set: &ConstraintSet) -> Result<Vec<f64>> {
    Dykstra::default().project(v, set)
}

fn check_dim(v: &[f64], set: &ConstraintSet) -> Result<()> {
    if v.len() != set.len() {
        return Err(Error::InvalidInput(format!(
            "vector of length {} projected onto {}-device constraint set",
            v.len(),
            set.len()
        )));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("non-finite projection input".into()));
    }
    Ok(())
}

/// Exact projection of `w` onto `{y : normal·y ≤ bound, y ≥ floor}`, in place.
///
/// The solution is `max(w − λ·normal, floor)` for the smallest `λ ≥ 0` that
/// satisfies the halfspace; `normal·y(λ)` is piecewise linear in `λ` with one
/// breakpoint per coordinate, so the root is found by walking the sorted
/// breakpoints. `normal` must be strictly positive; `None` means all ones.
fn project_halfspace_box(w: &mut [f64], normal: Option<&[f64]>, bound: f64, floor: &[f64]) {
    let n_at = |i: usize| normal.map_or(1.0, |n| n[i]);
    let clamped: f64 = (0..w.len()).map(|i| n_at(i) * w[i].max(floor[i])).sum();
    if clamped <= bound {
        for (w, f) in w.iter_mut().zip(floor) {
            *w = w.max(*f);
        }
        return;
    }
    // g(λ) = free_dot − λ·free_norm_sq + floored_dot − bound, decreasing in λ
    let mut free_dot = 0.0;
    let mut free_norm_sq = 0.0;
    let mut floored_dot = 0.0;
    let mut breakpoints = Vec::with_capacity(w.len());
    for i in 0..w.len() {
        let ni = n_at(i);
        if w[i] > floor[i] {
            free_dot += ni * w[i];
            free_norm_sq += ni * ni;
            breakpoints.push(((w[i] - floor[i]) / ni, i));
        } else {
            floored_dot += ni * floor[i];
        }
    }
    breakpoints.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut lambda = 0.0;
    for &(at, i) in &breakpoints {
        let root = (free_dot + floored_dot - bound) / free_norm_sq;
        if root <= at {
            lambda = root;
            break;
        }
        let ni = n_at(i);
        free_dot -= ni * w[i];
        free_norm_sq -= ni * ni;
        floored_dot += ni * floor[i];
        lambda = at;
    }
    for i in 0..w.len() {
        w[i] = (w[i] - lambda * n_at(i)).max(floor[i]);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Dykstra {
    /// Stop once no sub-projection in a cycle moves the iterate by more than
    /// this (max-norm), or once the iterate stalls at a certified projection.
    pub tol: f64,
    pub max_cycles: usize,
}

impl Default for Dykstra {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_cycles: 10_000,
        }
    }
}

impl Named for Dykstra {
    fn name(&self) -> &'static str {
        "dykstra"
    }
}

impl Projector for Dykstra {
    fn project(&self, v: &[f64], set: &ConstraintSet) -> Result<Vec<f64>> {
        check_dim(v, set)?;
        let n = v.len();
        let gamma = set.min_rates();
        let mut x = v.to_vec();
        // one correction vector per set
        let mut p_rate = vec![0.0; n];
        let mut p_data = vec![0.0; n];
        let mut w = vec![0.0; n];
        let mut prev = vec![0.0; n];

        for _ in 0..self.max_cycles {
            prev.copy_from_slice(&x);
            // largest move made by a single sub-projection in this cycle
            let mut step: f64 = 0.0;
            for (p, normal, bound) in [
                (&mut p_rate, None, set.c()),
                (&mut p_data, Some(set.sizes()), set.d()),
            ] {
                for i in 0..n {
                    w[i] = x[i] + p[i];
                }
                project_halfspace_box(&mut w, normal, bound, gamma);
                for i in 0..n {
                    step = step.max((w[i] - x[i]).abs());
                    p[i] += x[i] - w[i];
                    x[i] = w[i];
                }
            }
            // Every sub-projection fixing the iterate means each correction
            // lies in its set's normal cone there, which certifies optimality.
            if step < self.tol {
                return Ok(x);
            }
            // The iterate can also return to the same point every cycle while
            // a stale correction unwinds slowly; the point may or may not be
            // the projection, so accept it only with a multiplier certificate.
            let stall = x
                .iter()
                .zip(&prev)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            if stall < self.tol && is_projection(v, &x, set, self.tol) {
                return Ok(x);
            }
        }
        Err(Error::ProjectionDiverged {
            cycles: self.max_cycles,
            last: x,
        })
    }
}

/// Projection via the data-budget multiplier `λ`: for fixed `λ ≥ 0` the point
/// `P_{rate ∩ box}(v − λ·a)` is exact, and its data volume is non-increasing
/// in `λ`, so the complementary `λ` is found by bisection.
#[derive(Debug, Clone, Copy, Default)]
pub struct DualBisection;

impl Named for DualBisection {
    fn name(&self) -> &'static str {
        "dual-bisection"
    }
}

impl Projector for DualBisection {
    fn project(&self, v: &[f64], set: &ConstraintSet) -> Result<Vec<f64>> {
        check_dim(v, set)?;
        let a = set.sizes();
        let inner = |lambda: f64| -> Vec<f64> {
            let mut w: Vec<f64> = v.iter().zip(a).map(|(v, a)| v - lambda * a).collect();
            project_halfspace_box(&mut w, None, set.c(), set.min_rates());
            w
        };
        let excess = |z: &[f64]| z.iter().zip(a).map(|(z, a)| z * a).sum::<f64>() - set.d();

        let start = inner(0.0);
        if excess(&start) <= 0.0 {
            return Ok(start);
        }
        let (mut lo, mut hi) = (0.0, 1.0);
        while excess(&inner(hi)) > 0.0 {
            lo = hi;
            hi *= 2.0;
            if hi > 1e300 {
                return Err(Error::Infeasible("data budget unreachable".into()));
            }
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if excess(&inner(mid)) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(inner(hi))
    }
}

/// Checks the optimality conditions of `z` as the projection of `v`:
/// feasibility, `v − z = λ_r·1 + λ_d·a` on coordinates above their floor,
/// `λ ≥ 0` with complementary slackness, and `v_i − λ_r − λ_d a_i ≤ γ_i` on
/// coordinates held at their floor.
fn is_projection(v: &[f64], z: &[f64], set: &ConstraintSet, tol: f64) -> bool {
    let scale = 1.0 + v.iter().map(|x| x.abs()).fold(set.c().max(set.d()), f64::max);
    let eps = tol * scale;
    if set.max_violation(z) > eps {
        return false;
    }
    let a = set.sizes();
    let gamma = set.min_rates();
    let rate_tight = set.c() - z.iter().sum::<f64>() <= eps;
    let data_tight = set.d() - z.iter().zip(a).map(|(z, a)| z * a).sum::<f64>() <= eps;
    let free: Vec<usize> = (0..z.len()).filter(|&i| z[i] > gamma[i] + eps).collect();

    let holds = |lr: f64, ld: f64| -> bool {
        if lr < -eps || ld < -eps || (!rate_tight && lr > eps) || (!data_tight && ld > eps) {
            return false;
        }
        (0..z.len()).all(|i| {
            let shifted = v[i] - lr - ld * a[i];
            if free.contains(&i) {
                (shifted - z[i]).abs() <= 10.0 * eps
            } else {
                shifted <= gamma[i] + 10.0 * eps
            }
        })
    };

    // least-squares multipliers over the free coordinates
    let (mut s11, mut s12, mut s22, mut r1, mut r2) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &i in &free {
        let r = v[i] - z[i];
        s11 += 1.0;
        s12 += a[i];
        s22 += a[i] * a[i];
        r1 += r;
        r2 += a[i] * r;
    }
    let mut candidates = vec![(0.0, 0.0)];
    if s11 > 0.0 {
        candidates.push((r1 / s11, 0.0));
        candidates.push((0.0, r2 / s22));
        let det = s11 * s22 - s12 * s12;
        if det.abs() > 1e-12 * s11 * s22 {
            candidates.push(((r1 * s22 - s12 * r2) / det, (s11 * r2 - s12 * r1) / det));
        }
    }
    candidates.into_iter().any(|(lr, ld)| holds(lr, ld))
}

/// Closed-form projection by active-set enumeration.
#[derive(Debug, Clone, Copy, Default)]
pub struct ActiveSet;

impl Named for ActiveSet {
    fn name(&self) -> &'static str {
        "active-set"
    }
}

impl Projector for ActiveSet {
    fn project(&self, v: &[f64], set: &ConstraintSet) -> Result<Vec<f64>> {
        kkt_projection(v, set).map(|k| k.z)
    }
}

/// Largest instance [`kkt_projection`] accepts; the enumeration visits
/// `4 · 2^N` active sets.
pub const ACTIVE_SET_MAX_DEVICES: usize = 16;

/// A projection together with its Lagrange multipliers for the objective
/// `‖z − v‖²`.
#[derive(Debug, Clone, PartialEq)]
pub struct KktPoint {
    pub z: Vec<f64>,
    /// Multiplier of `Σz ≤ c`.
    pub lambda_rate: f64,
    /// Multiplier of `Σ a·z ≤ d`.
    pub lambda_data: f64,
    /// Multipliers of `z_i ≥ γ_i`.
    pub mu: Vec<f64>,
}

pub fn kkt_projection(v: &[f64], set: &ConstraintSet) -> Result<KktPoint> {
    check_dim(v, set)?;
    let n = v.len();
    if n > ACTIVE_SET_MAX_DEVICES {
        return Err(Error::InvalidInput(format!(
            "active-set projection limited to {ACTIVE_SET_MAX_DEVICES} devices, got {n}"
        )));
    }
    let gamma = set.min_rates();
    let ones = vec![1.0; n];
    let rows: [(&[f64], f64); 2] = [(&ones, set.c()), (set.sizes(), set.d())];
    let scale = 1.0 + v.iter().map(|x| x.abs()).fold(0.0, f64::max);
    let feas_tol = 1e-9 * scale.max(set.c()).max(set.d());

    let mut best: Option<(f64, KktPoint)> = None;
    for halfspaces in 0u32..4 {
        let active: Vec<usize> = (0..2).filter(|j| halfspaces & (1 << j) != 0).collect();
        for fixed_mask in 0u32..(1 << n) {
            let fixed = |i: usize| fixed_mask & (1 << i) != 0;

            // Gram system over the free coordinates: G λ = rhs.
            let m = active.len();
            let mut g = [[0.0; 2]; 2];
            let mut rhs = [0.0; 2];
            for (r, &j) in active.iter().enumerate() {
                let (row_j, b_j) = rows[j];
                rhs[r] = -b_j;
                for i in 0..n {
                    if fixed(i) {
                        rhs[r] += row_j[i] * gamma[i];
                    } else {
                        rhs[r] += row_j[i] * v[i];
                    }
                }
                for (s, &k) in active.iter().enumerate() {
                    let row_k = rows[k].0;
                    g[r][s] = (0..n).filter(|&i| !fixed(i)).map(|i| row_j[i] * row_k[i]).sum();
                }
            }
            let lam_active = match m {
                0 => [0.0, 0.0],
                1 => {
                    if g[0][0] <= 1e-14 {
                        continue;
                    }
                    [rhs[0] / g[0][0], 0.0]
                }
                _ => {
                    let det = g[0][0] * g[1][1] - g[0][1] * g[1][0];
                    if det.abs() <= 1e-12 * (g[0][0] * g[1][1]).max(1e-300) {
                        continue;
                    }
                    [
                        (rhs[0] * g[1][1] - g[0][1] * rhs[1]) / det,
                        (g[0][0] * rhs[1] - g[1][0] * rhs[0]) / det,
                    ]
                }
            };
            // Multipliers of the unhalved objective are twice the Gram solution.
            let mut lam = [0.0; 2];
            for (r, &j) in active.iter().enumerate() {
                lam[j] = lam_active[r];
            }
            let z: Vec<f64> = (0..n)
                .map(|i| {
                    if fixed(i) {
                        gamma[i]
                    } else {
                        v[i] - lam[0] - lam[1] * rows[1].0[i]
                    }
                })
                .collect();
            if set.max_violation(&z) > feas_tol {
                continue;
            }
            let dist: f64 = z.iter().zip(v).map(|(z, v)| (z - v) * (z - v)).sum();
            if best.as_ref().is_some_and(|(d, _)| *d <= dist) {
                continue;
            }
            let mu = (0..n)
                .map(|i| {
                    if fixed(i) {
                        2.0 * (gamma[i] - v[i] + lam[0] + lam[1] * rows[1].0[i])
                    } else {
                        0.0
                    }
                })
                .collect();
            best = Some((
                dist,
                KktPoint {
                    z,
                    lambda_rate: 2.0 * lam[0],
                    lambda_data: 2.0 * lam[1],
                    mu,
                },
            ));
        }
    }
    // The true projection is always one of the enumerated candidates, and no
    // feasible candidate can be closer than it.
    best.map(|(_, k)| k)
        .ok_or_else(|| Error::Infeasible("no feasible active set found".into()))
}
