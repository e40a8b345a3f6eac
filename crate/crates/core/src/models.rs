//! Two worked instances with closed-form answers.
//!
//! [`TwoStateSpec`] is a two-state game where the population drifts into an
//! absorbing state; with discount `rho = 1 / (2 + eps)` the equilibrium control
//! is `u = v[2]` and the value is explicit. [`ComparisonSpec`] is a one-period
//! game that contrasts the equilibrium of a model with endogenous (fixed)
//! kernels against the robust model: the endogenous strategy admits a
//! profitable deviation once the adversary may pick kernels.

use std::sync::Arc;

use crate::domain::{Domain, ValueTable};
use crate::error::{invalid, Error, Result};
use crate::mfg::{GameSpec, RewardSpec};
use crate::policy::{ActionGrid, Policy, RelaxedControl};
use crate::simplex::{Dist, SimplexGrid};
use crate::uncertainty::{inner_inf_family, BallSpec, InnerConfig, KernelFamily, SupportPoint};

/// The solvable two-state game with radius `eps` on the first state.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TwoStateSpec {
    epsilon: f64,
}

impl TwoStateSpec {
    pub fn new(epsilon: f64) -> Result<TwoStateSpec> {
        if !(epsilon > 0.0 && epsilon <= 0.5) {
            return invalid(format!("epsilon = {epsilon} must lie in (0, 0.5]"));
        }
        Ok(TwoStateSpec { epsilon })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// The discount factor is tied to the radius: `rho (2 + eps) = 1`.
    pub fn rho(&self) -> f64 {
        1.0 / (2.0 + self.epsilon)
    }

    pub fn ball(&self) -> BallSpec {
        BallSpec::linear_absorbing(self.epsilon).expect("radius validated at construction")
    }

    pub fn reward(&self) -> RewardSpec {
        RewardSpec::quadratic_mass(1)
    }

    /// Game on a grid of spacing `h` with actions spaced by `action_spacing`.
    pub fn game(&self, h: f64, action_spacing: f64, inner: InnerConfig) -> Result<GameSpec> {
        GameSpec::new(
            ActionGrid::with_spacing(action_spacing)?,
            self.rho(),
            self.reward(),
            self.ball(),
            Domain::mean_field(SimplexGrid::build(2, h)?),
            inner,
        )
    }

    /// Equilibrium value; it does not depend on the agent's own state.
    pub fn closed_form_value(&self, v2: f64) -> f64 {
        let (eps, rho) = (self.epsilon, self.rho());
        if v2 <= eps {
            v2 * v2 / (2.0 * (1.0 - rho))
        } else {
            -eps / (2.0 * (1.0 - rho)) + v2 / (2.0 * rho)
        }
    }

    pub fn closed_form_table(&self, domain: &Arc<Domain>) -> ValueTable {
        ValueTable::from_fn(domain, |_, _, v| self.closed_form_value(v[1]))
    }

    /// The policy `u = v[2]` on any domain. Off-grid targets are represented by
    /// the mean-preserving mixture of the two neighbouring grid actions.
    pub fn closed_form_policy(&self, domain: &Arc<Domain>, actions: &Arc<ActionGrid>) -> Policy {
        Policy::from_fn(domain, actions, |_, _, v| RelaxedControl::mean_preserving(actions, v[1]))
    }

    /// Worst-case probability of moving from the first to the second state.
    pub fn worst_case_move(&self, u: f64) -> f64 {
        (u - self.epsilon).max(0.0)
    }

    /// The adversary's kernel family on `support`.
    pub fn worst_case_family(&self, v: &Dist, support: Vec<SupportPoint>) -> Result<KernelFamily> {
        let rows = support
            .iter()
            .map(|p| {
                if p.state == 0 {
                    let q = self.worst_case_move(p.action);
                    Dist::normalized(vec![1.0 - q, q])
                } else {
                    Dist::point(2, 1)
                }
            })
            .collect();
        KernelFamily::new(&self.ball(), v.clone(), support, rows)
    }
}

/// The one-period comparison game: population mass `v2` already in the
/// absorbing state, terminal reward `v[2]^2 / 2` for agents still in the
/// first state.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ComparisonSpec {
    pub epsilon: f64,
    pub rho: f64,
    pub v2: f64,
}

impl ComparisonSpec {
    pub fn new(epsilon: f64, rho: f64, v2: f64) -> Result<ComparisonSpec> {
        if !(0.0..0.5).contains(&epsilon) {
            return invalid(format!("epsilon = {epsilon} must lie in [0, 0.5)"));
        }
        if !(rho > 0.0 && rho < 1.0) {
            return invalid(format!("rho = {rho} must lie strictly inside (0, 1)"));
        }
        if !(v2 >= epsilon && v2 <= 1.0 - epsilon) {
            return invalid(format!("v[2] = {v2} must lie in [epsilon, 1 - epsilon]"));
        }
        Ok(ComparisonSpec { epsilon, rho, v2 })
    }

    /// The published instance: `eps = 0.2`, `rho = 0.9`, `v[2] = 0.3`.
    pub fn reference() -> ComparisonSpec {
        ComparisonSpec {
            epsilon: 0.2,
            rho: 0.9,
            v2: 0.3,
        }
    }

    fn reward(&self, u: f64) -> f64 {
        self.v2 * u - 0.5 * u * u
    }
}

/// Population mass in the absorbing state after one period and the
/// endogenous equilibrium control, from
/// `z = v2 + (1 - v2)(v2 - rho z^2 / 2 + eps)` solved by bisection.
pub fn endogenous_fixed_point(spec: &ComparisonSpec, tol: f64) -> Result<(f64, f64)> {
    let (v2, rho, eps) = (spec.v2, spec.rho, spec.epsilon);
    let phi = |z: f64| v2 + (1.0 - v2) * (v2 - 0.5 * rho * z * z + eps) - z;
    let (mut lo, mut hi) = (v2 + (1.0 - v2) * eps, 1.0);
    if !(phi(lo) > 0.0 && phi(hi) < 0.0) {
        return Err(Error::InfeasibleSet(format!(
            "fixed-point map does not change sign on ({lo}, {hi})"
        )));
    }
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if phi(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let z = 0.5 * (lo + hi);
    Ok((z, v2 - 0.5 * rho * z * z))
}

/// Robust one-period value of playing `u_i` while the population plays `u_tilde`.
#[derive(Clone, Debug, PartialEq)]
pub struct DeviationValue {
    pub value: f64,
    /// Minimum of `(1 - P(u_i)) (v2 + (1 - v2) P(u_tilde))^2`.
    pub inner_value: f64,
    /// `P(u_tilde) - u_tilde` at the minimizer.
    pub delta_star: f64,
    pub p_dev: f64,
    pub p_pop: f64,
    /// Range of `delta` on which the coupling binds.
    pub delta_range: (f64, f64),
    /// Inner objective at both ends of that range.
    pub boundary_values: (f64, f64),
}

/// Exact inner minimization for the comparison game. The adversary wants
/// `P(u_i)` high and `P(u_tilde)` low, so the coupling binds as
/// `P(u_i) = P(u_tilde) + |u_i - u_tilde|` until `P(u_i)` reaches its ball edge.
pub fn robust_deviation_value(spec: &ComparisonSpec, u_i: f64, u_tilde: f64) -> Result<DeviationValue> {
    if !(0.0..=1.0).contains(&u_i) || !(0.0..=1.0).contains(&u_tilde) {
        return invalid("actions must lie in [0, 1]");
    }
    let (a, b, eps) = (spec.v2, 1.0 - spec.v2, spec.epsilon);
    let c = (u_i - u_tilde).abs();
    let (lo_i, hi_i) = ((u_i - eps).max(0.0), (u_i + eps).min(1.0));
    let (lo_u, hi_u) = ((u_tilde - eps).max(0.0), (u_tilde + eps).min(1.0));
    let j_lo = lo_u.max(lo_i - c);
    let j_hi = hi_u.min(hi_i + c);
    if j_lo > j_hi + 1e-15 {
        return Err(Error::InfeasibleSet(format!(
            "no admissible kernels for u_i = {u_i}, u_tilde = {u_tilde}"
        )));
    }
    let objective = |p_i: f64, p_u: f64| (1.0 - p_i) * (a + b * p_u).powi(2);
    let cubic = |p_u: f64| objective(p_u + c, p_u);
    let bind_hi = j_hi.min(hi_i - c);
    let (p_pop, p_dev, inner, range, ends) = if bind_hi >= j_lo {
        let mut best = (j_lo, cubic(j_lo));
        let mut cands = vec![bind_hi];
        if b > 0.0 {
            cands.push(-a / b);
            cands.push((2.0 * b * (1.0 - c) - a) / (3.0 * b));
        }
        for p in cands {
            if p >= j_lo && p <= bind_hi {
                let g = cubic(p);
                if g < best.1 {
                    best = (p, g);
                }
            }
        }
        (
            best.0,
            best.0 + c,
            best.1,
            (j_lo - u_tilde, bind_hi - u_tilde),
            (cubic(j_lo), cubic(bind_hi)),
        )
    } else {
        let g = objective(hi_i, j_lo);
        (j_lo, hi_i, g, (j_lo - u_tilde, j_lo - u_tilde), (g, g))
    };
    Ok(DeviationValue {
        value: spec.reward(u_i) + 0.5 * spec.rho * inner,
        inner_value: inner,
        delta_star: p_pop - u_tilde,
        p_dev,
        p_pop,
        delta_range: range,
        boundary_values: ends,
    })
}

/// Same inner problem solved by the generic uncertainty-set search.
pub fn deviation_value_by_search(spec: &ComparisonSpec, u_i: f64, u_tilde: f64, cfg: &InnerConfig) -> Result<f64> {
    let ball = BallSpec::linear_absorbing(spec.epsilon)?;
    let v = Dist::new(vec![1.0 - spec.v2, spec.v2])?;
    let (a, b) = (spec.v2, 1.0 - spec.v2);
    let same = (u_i - u_tilde).abs() <= 1e-15;
    let support = if same {
        vec![SupportPoint::new(0, u_tilde)]
    } else {
        vec![SupportPoint::new(0, u_i), SupportPoint::new(0, u_tilde)]
    };
    let pop = if same { 0 } else { 1 };
    let (_, inner) = inner_inf_family(
        &ball,
        &v,
        &support,
        |f| (1.0 - f.rows()[0][1]) * (a + b * f.rows()[pop][1]).powi(2),
        cfg,
    )?;
    Ok(spec.reward(u_i) + 0.5 * spec.rho * inner)
}

/// Best robust deviation over an action grid against the population control
/// `u_tilde`; ties go to the smaller action.
pub fn comparison_best_response(spec: &ComparisonSpec, u_tilde: f64, actions: &ActionGrid) -> Result<(f64, f64)> {
    let mut best = (actions.point(0), f64::NEG_INFINITY);
    for &u in actions.points() {
        let val = robust_deviation_value(spec, u, u_tilde)?.value;
        if val > best.1 {
            best = (u, val);
        }
    }
    Ok(best)
}

/// Everything reported for the comparison game.
#[derive(Clone, Debug)]
pub struct ComparisonReport {
    pub z: f64,
    pub u_tilde: f64,
    pub endogenous: DeviationValue,
    pub u_dev: f64,
    pub deviation: DeviationValue,
    pub gain: f64,
    pub deviation_by_search: f64,
    pub best_action: f64,
    pub best_value: f64,
}

pub fn comparison_report(spec: &ComparisonSpec, u_dev: f64, tol: f64, cfg: &InnerConfig) -> Result<ComparisonReport> {
    let (z, u_tilde) = endogenous_fixed_point(spec, tol)?;
    let endogenous = robust_deviation_value(spec, u_tilde, u_tilde)?;
    let deviation = robust_deviation_value(spec, u_dev, u_tilde)?;
    let deviation_by_search = deviation_value_by_search(spec, u_dev, u_tilde, cfg)?;
    let (best_action, best_value) = comparison_best_response(spec, u_tilde, &ActionGrid::uniform(101)?)?;
    Ok(ComparisonReport {
        z,
        u_tilde,
        gain: deviation.value - endogenous.value,
        endogenous,
        u_dev,
        deviation,
        deviation_by_search,
        best_action,
        best_value,
    })
}
