//! Brute-force reference solver for small instances.
//!
//! Shares no code path with ADMM or Dykstra: starting points are projected
//! with the active-set enumeration, ascent is plain projected gradient, and
//! the answer is polished by solving the KKT conditions of every candidate
//! active set directly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::constraints::ConstraintSet;
use crate::error::{Error, Result};
use crate::projection::kkt_projection;
use crate::utility::UtilityFunction;

pub const ORACLE_MAX_DEVICES: usize = 6;

const STARTS: usize = 8;
const ASCENT_STEPS: usize = 400;
const KKT_TOL: f64 = 1e-9;

pub fn solve_oracle(fs: &[UtilityFunction], set: &ConstraintSet) -> Result<Vec<f64>> {
    let n = fs.len();
    if n == 0 || n != set.len() {
        return Err(Error::InvalidInput(format!(
            "{n} utilities for a {}-device constraint set",
            set.len()
        )));
    }
    if n > ORACLE_MAX_DEVICES {
        return Err(Error::InvalidInput(format!(
            "oracle limited to {ORACLE_MAX_DEVICES} devices, got {n}"
        )));
    }
    let objective = |x: &[f64]| -> f64 { fs.iter().zip(x).map(|(f, &x)| f.value_at(x)).sum() };
    for (f, g) in fs.iter().zip(set.min_rates()) {
        if *g > f.domain_max() {
            return Err(Error::InvalidInput(format!(
                "minimum rate {g} lies outside utility domain [0, {}]",
                f.domain_max()
            )));
        }
    }

    let mut best = ascend(fs, set, &mut ChaCha8Rng::seed_from_u64(0x5eed))?;
    let mut best_value = objective(&best);
    for candidate in kkt_candidates(fs, set) {
        let value = objective(&candidate);
        if value > best_value {
            best = candidate;
            best_value = value;
        }
    }
    Ok(best)
}

fn clamp_to_domains(fs: &[UtilityFunction], x: &mut [f64]) {
    for (f, x) in fs.iter().zip(x.iter_mut()) {
        *x = x.clamp(0.0, f.domain_max());
    }
}

/// Projected gradient ascent with step `h / (1 + t/50)` from random feasible
/// starts, where `h` is the inverse of the largest curvature on the domain.
fn ascend(fs: &[UtilityFunction], set: &ConstraintSet, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let n = fs.len();
    let objective = |x: &[f64]| -> f64 { fs.iter().zip(x).map(|(f, &x)| f.value_at(x)).sum() };
    let curvature = fs
        .iter()
        .map(|f| {
            let steps = 200;
            (0..=steps)
                .map(|i| f.curvature_at(f.domain_max() * i as f64 / steps as f64).abs())
                .fold(0.0, f64::max)
        })
        .fold(1e-6, f64::max);
    let base_step = 1.0 / curvature;
    let spread = set.c().max(set.d() / set.sizes().iter().copied().fold(f64::INFINITY, f64::min));

    let mut best: Option<(f64, Vec<f64>)> = None;
    for _ in 0..STARTS {
        let raw: Vec<f64> = set
            .min_rates()
            .iter()
            .map(|g| g + rng.gen::<f64>() * spread)
            .collect();
        let mut x = kkt_projection(&raw, set)?.z;
        clamp_to_domains(fs, &mut x);
        for t in 0..ASCENT_STEPS {
            let step = base_step / (1.0 + t as f64 / 50.0);
            let moved: Vec<f64> = (0..n).map(|i| x[i] + step * fs[i].slope_at(x[i])).collect();
            let mut next = kkt_projection(&moved, set)?.z;
            clamp_to_domains(fs, &mut next);
            let change = next
                .iter()
                .zip(&x)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            x = next;
            if change < 1e-13 {
                break;
            }
        }
        let value = objective(&x);
        if best.as_ref().is_none_or(|(v, _)| value > *v) {
            best = Some((value, x));
        }
    }
    Ok(best.expect("at least one start").1)
}

/// Root of `f'(x) = price` on the domain, clamped to the endpoints.
fn inverse_slope(f: &UtilityFunction, price: f64) -> f64 {
    let (mut lo, mut hi) = (0.0, f.domain_max());
    if f.slope_at(lo) <= price {
        return lo;
    }
    if f.slope_at(hi) >= price {
        return hi;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f.slope_at(mid) > price {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-14 {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Every point satisfying the KKT conditions for some active set.
fn kkt_candidates(fs: &[UtilityFunction], set: &ConstraintSet) -> Vec<Vec<f64>> {
    let n = fs.len();
    let gamma = set.min_rates();
    let sizes = set.sizes();
    let mut out = Vec::new();

    for fixed_mask in 0u32..(1 << n) {
        let fixed = |i: usize| fixed_mask & (1 << i) != 0;
        // free coordinates respond to prices (λ_rate, λ_data)
        let point = |lr: f64, ld: f64| -> Vec<f64> {
            (0..n)
                .map(|i| {
                    if fixed(i) {
                        gamma[i]
                    } else {
                        inverse_slope(&fs[i], lr + ld * sizes[i])
                    }
                })
                .collect()
        };
        let rate_gap = |x: &[f64]| x.iter().sum::<f64>() - set.c();
        let data_gap = |x: &[f64]| x.iter().zip(sizes).map(|(x, a)| x * a).sum::<f64>() - set.d();

        for halfspaces in 0u32..4 {
            let rate_active = halfspaces & 1 != 0;
            let data_active = halfspaces & 2 != 0;
            let solved = match (rate_active, data_active) {
                (false, false) => Some((0.0, 0.0)),
                (true, false) => solve_price(|l| rate_gap(&point(l, 0.0))).map(|l| (l, 0.0)),
                (false, true) => solve_price(|l| data_gap(&point(0.0, l))).map(|l| (0.0, l)),
                (true, true) => solve_two_prices(fs, set, fixed_mask, &point),
            };
            let Some((lr, ld)) = solved else { continue };
            if lr < -KKT_TOL || ld < -KKT_TOL {
                continue;
            }
            let x = point(lr, ld);
            let scale = 1.0 + set.c().max(set.d());
            if set.max_violation(&x) > KKT_TOL * scale {
                continue;
            }
            if rate_active && rate_gap(&x).abs() > 1e-7 * scale {
                continue;
            }
            if data_active && data_gap(&x).abs() > 1e-7 * scale {
                continue;
            }
            // box multipliers μ_i = λ_r + λ_d a_i − f_i'(γ_i) must be non-negative
            let box_ok = (0..n)
                .filter(|&i| fixed(i))
                .all(|i| lr + ld * sizes[i] - fs[i].slope_at(gamma[i]) >= -1e-7);
            if box_ok {
                out.push(x);
            }
        }
    }
    out
}

/// Root of a non-increasing scalar function by bracket expansion and bisection.
fn solve_price(gap: impl Fn(f64) -> f64) -> Option<f64> {
    let (mut lo, mut hi) = (-1.0, 1.0);
    let mut expansions = 0;
    while gap(lo) < 0.0 {
        lo *= 2.0;
        expansions += 1;
        if expansions > 80 {
            return None;
        }
    }
    while gap(hi) > 0.0 {
        hi *= 2.0;
        expansions += 1;
        if expansions > 160 {
            return None;
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if gap(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-13 * (1.0 + hi.abs()) {
            break;
        }
    }
    Some(0.5 * (lo + hi))
}

/// Both halfspaces active: damped Newton on the two price equations.
fn solve_two_prices(
    fs: &[UtilityFunction],
    set: &ConstraintSet,
    fixed_mask: u32,
    point: &impl Fn(f64, f64) -> Vec<f64>,
) -> Option<(f64, f64)> {
    let sizes = set.sizes();
    let residual = |lr: f64, ld: f64| -> (Vec<f64>, [f64; 2]) {
        let x = point(lr, ld);
        let r0 = x.iter().sum::<f64>() - set.c();
        let r1 = x.iter().zip(sizes).map(|(x, a)| x * a).sum::<f64>() - set.d();
        (x, [r0, r1])
    };
    let (mut lr, mut ld) = (0.0, 0.0);
    let (mut x, mut r) = residual(lr, ld);
    for _ in 0..100 {
        let norm = r[0].abs().max(r[1].abs());
        if norm < 1e-12 {
            return Some((lr, ld));
        }
        // dx_i/dλ_k = A_ki / f_i''(x_i) for free, interior coordinates
        let mut jac = nalgebra::Matrix2::<f64>::zeros();
        for (i, f) in fs.iter().enumerate() {
            if fixed_mask & (1 << i) != 0 {
                continue;
            }
            let curv = f.curvature_at(x[i]);
            if curv >= 0.0 || x[i] <= 0.0 || x[i] >= f.domain_max() {
                continue;
            }
            let row = [1.0, sizes[i]];
            for j in 0..2 {
                for k in 0..2 {
                    jac[(j, k)] += row[j] * row[k] / curv;
                }
            }
        }
        let step = jac.try_inverse()? * nalgebra::Vector2::new(r[0], r[1]);
        let mut t = 1.0;
        loop {
            let (nlr, nld) = (lr - t * step[0], ld - t * step[1]);
            let (nx, nr) = residual(nlr, nld);
            if nr[0].abs().max(nr[1].abs()) < norm || t < 1e-6 {
                lr = nlr;
                ld = nld;
                x = nx;
                r = nr;
                break;
            }
            t *= 0.5;
        }
    }
    (r[0].abs().max(r[1].abs()) < 1e-9).then_some((lr, ld))
}
