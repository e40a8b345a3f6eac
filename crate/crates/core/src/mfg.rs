//! The mean-field game: deterministic population flow, the robust Bellman
//! operator on a simplex grid, value iteration, best responses and
//! equilibrium verification.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::domain::{Domain, ValueTable};
use crate::dpp::{Flow, Stage};
use crate::error::{invalid, Result};
use crate::policy::{ActionGrid, Policy, RelaxedControl, Strategy};
use crate::simplex::{Dist, Kernel};
use crate::uncertainty::{random_dist, BallSpec, InnerConfig, KernelFamily};

pub use crate::dpp::BestResponse;

pub type RewardFn = dyn Fn(usize, f64, &Dist, usize) -> f64 + Send + Sync;

/// One-period reward `r(x, u, v, y)` with its declared sup bound and
/// Lipschitz constant in `(u, v)`.
#[derive(Clone)]
pub struct RewardSpec {
    f: Arc<RewardFn>,
    bound: f64,
    lipschitz: f64,
}

impl fmt::Debug for RewardSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RewardSpec")
            .field("bound", &self.bound)
            .field("lipschitz", &self.lipschitz)
            .finish_non_exhaustive()
    }
}

impl RewardSpec {
    pub fn new(f: Arc<RewardFn>, bound: f64, lipschitz: f64) -> Result<RewardSpec> {
        if !(bound >= 0.0 && bound.is_finite()) || !(lipschitz >= 0.0 && lipschitz.is_finite()) {
            return invalid("reward bound and Lipschitz constant must be finite and nonnegative");
        }
        Ok(RewardSpec { f, bound, lipschitz })
    }

    /// `r = v[target] * u - u^2 / 2`.
    pub fn quadratic_mass(target: usize) -> RewardSpec {
        RewardSpec {
            f: Arc::new(move |_, u, v, _| v[target] * u - 0.5 * u * u),
            bound: 0.5,
            lipschitz: 1.0,
        }
    }

    pub fn constant(c: f64) -> RewardSpec {
        RewardSpec {
            f: Arc::new(move |_, _, _, _| c),
            bound: c.abs(),
            lipschitz: 0.0,
        }
    }

    pub fn eval(&self, x: usize, u: f64, v: &Dist, y: usize) -> f64 {
        (self.f)(x, u, v, y)
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    /// Checks the bound and the Lipschitz constant on random inputs.
    pub fn check_sampled(&self, d: usize, samples: usize, seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..samples {
            let (x, y) = (rng.gen_range(0..d), rng.gen_range(0..d));
            let (u1, u2): (f64, f64) = (rng.gen(), rng.gen());
            let (v1, v2) = (random_dist(&mut rng, d), random_dist(&mut rng, d));
            let (a, b) = (self.eval(x, u1, &v1, y), self.eval(x, u2, &v2, y));
            if a.abs() > self.bound + 1e-12 {
                return invalid(format!("|r| = {} exceeds the declared bound {}", a.abs(), self.bound));
            }
            let dv = crate::simplex::half_l1(v1.weights(), v2.weights());
            if (a - b).abs() > self.lipschitz * ((u1 - u2).abs() + dv) + 1e-12 {
                return invalid(format!("reward breaks its Lipschitz constant {}", self.lipschitz));
            }
        }
        Ok(())
    }
}

/// A complete game on a simplex grid.
#[derive(Clone, Debug)]
pub struct GameSpec {
    pub(crate) actions: Arc<ActionGrid>,
    pub(crate) rho: f64,
    pub(crate) reward: RewardSpec,
    pub(crate) ball: BallSpec,
    pub(crate) domain: Arc<Domain>,
    pub(crate) inner: InnerConfig,
}

impl GameSpec {
    pub fn new(
        actions: ActionGrid,
        rho: f64,
        reward: RewardSpec,
        ball: BallSpec,
        domain: Arc<Domain>,
        inner: InnerConfig,
    ) -> Result<GameSpec> {
        if !(rho > 0.0 && rho < 1.0) {
            return invalid(format!("discount factor rho = {rho} must lie strictly inside (0, 1)"));
        }
        if domain.agents_count().is_some() {
            return invalid("a game is defined on a mean-field grid");
        }
        if ball.dim() != domain.dim() {
            return invalid(format!(
                "ball has {} states but the grid has {}",
                ball.dim(),
                domain.dim()
            ));
        }
        Ok(GameSpec {
            actions: Arc::new(actions),
            rho,
            reward,
            ball,
            domain,
            inner,
        })
    }

    pub fn d(&self) -> usize {
        self.domain.dim()
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn actions(&self) -> &Arc<ActionGrid> {
        &self.actions
    }

    pub fn reward(&self) -> &RewardSpec {
        &self.reward
    }

    pub fn ball(&self) -> &BallSpec {
        &self.ball
    }

    pub fn domain(&self) -> &Arc<Domain> {
        &self.domain
    }

    pub fn inner(&self) -> &InnerConfig {
        &self.inner
    }

    pub fn with_inner(mut self, inner: InnerConfig) -> GameSpec {
        self.inner = inner;
        self
    }

    /// Same model on another simplex grid.
    pub fn with_domain(mut self, domain: Arc<Domain>) -> Result<GameSpec> {
        if domain.dim() != self.d() || domain.agents_count().is_some() {
            return invalid("replacement grid must be a mean-field grid with the same states");
        }
        self.domain = domain;
        Ok(self)
    }

    /// Sup bound on any value: `C_r / (1 - rho)`.
    pub fn value_bound(&self) -> f64 {
        self.reward.bound / (1.0 - self.rho)
    }

    pub(crate) fn stage<'a>(&'a self, flow: &'a Flow, domain: &'a Arc<Domain>, base: &'a Policy) -> Stage<'a> {
        Stage {
            spec: self,
            flow,
            domain,
            base,
        }
    }

    fn check_policy(&self, p: &Policy) -> Result<()> {
        if **p.domain() != *self.domain || **p.actions() != *self.actions {
            return invalid("policy does not live on the game's grid and action set");
        }
        Ok(())
    }
}

/// Transition matrix of a controlled chain: row `x` mixes the family's rows
/// at state `x` with the weights of `controls[x]`.
pub fn transition_matrix(family: &KernelFamily, controls: &[RelaxedControl], actions: &ActionGrid) -> Result<Kernel> {
    let d = family.ball().dim();
    if controls.len() != d {
        return invalid(format!("need {d} controls, got {}", controls.len()));
    }
    let mut rows = Vec::with_capacity(d);
    for (x, c) in controls.iter().enumerate() {
        rows.push(mixed_row(family, x, c, actions)?);
    }
    Kernel::new(rows)
}

pub(crate) fn mixed_row(family: &KernelFamily, x: usize, c: &RelaxedControl, actions: &ActionGrid) -> Result<Dist> {
    let d = family.ball().dim();
    let mut row = vec![0.0; d];
    for &(a, w) in c.entries() {
        let u = actions.point(a);
        let r = family
            .row(x, u)
            .ok_or_else(|| crate::Error::InvalidArgument(format!("family has no row at state {}, action {u}", x + 1)))?;
        for y in 0..d {
            row[y] += w * r[y];
        }
    }
    Ok(Dist::normalized(row))
}

/// Next population law `v * Phi` under `policy` and `family`.
pub fn population_step(v: &Dist, policy: &Policy, family: &KernelFamily) -> Result<Dist> {
    let d = v.dim();
    let mut mu = vec![0.0; d];
    for x in 0..d {
        if v[x] <= 0.0 {
            continue;
        }
        let row = mixed_row(family, x, policy.eval(x, v)?, policy.actions())?;
        for y in 0..d {
            mu[y] += v[x] * row[y];
        }
    }
    Ok(Dist::normalized(mu))
}

/// One application of the robust operator for deviation `dev` against `base`.
pub fn bellman(table: &ValueTable, dev: &Policy, base: &Policy, spec: &GameSpec) -> Result<ValueTable> {
    spec.check_policy(dev)?;
    spec.check_policy(base)?;
    let flow = Flow::MeanField;
    spec.stage(&flow, &spec.domain, base).sweep(table, dev, &spec.inner)
}

/// Robust value of `dev` against `base` to sup-norm accuracy `tol`.
pub fn robust_value(dev: &Strategy, base: &Policy, spec: &GameSpec, tol: f64) -> Result<ValueTable> {
    Ok(robust_value_from(None, dev, base, spec, tol)?.0)
}

/// As [`robust_value`] from a chosen starting table; also returns the sweep count.
pub fn robust_value_from(
    init: Option<ValueTable>,
    dev: &Strategy,
    base: &Policy,
    spec: &GameSpec,
    tol: f64,
) -> Result<(ValueTable, usize)> {
    spec.check_policy(base)?;
    spec.check_policy(dev.tail())?;
    for h in dev.heads() {
        spec.check_policy(h)?;
    }
    let flow = Flow::MeanField;
    spec.stage(&flow, &spec.domain, base).value(dev, tol, init)
}

/// Best point-mass deviation at `(x, v)` against `base` whose value is `value`.
pub fn best_response(base: &Policy, x: usize, v: &Dist, value: &ValueTable, spec: &GameSpec) -> Result<BestResponse> {
    spec.check_policy(base)?;
    let node = spec.domain.locate(x, v)?;
    let flow = Flow::MeanField;
    let all: Vec<usize> = (0..spec.actions.len()).collect();
    spec.stage(&flow, &spec.domain, base)
        .best_response(value, node, x, &all, Some(base.control(node, x)))
}

/// Outcome of an equilibrium check.
#[derive(Clone, Debug)]
pub struct EquilibriumReport {
    /// Largest one-shot gain over all pairs: best deviation value minus the
    /// base control's value, both continuing with the base value table.
    pub epsilon: f64,
    pub worst_state: usize,
    pub worst_node: usize,
    /// `2 epsilon / (1 - rho)`: the policy is a stationary equilibrium up to
    /// this gain (plus discretization error).
    pub full_bound: f64,
    /// Value of the base policy against itself.
    pub value: ValueTable,
    /// Best-response controls.
    pub responses: Policy,
    /// Best-response values.
    pub response_values: ValueTable,
}

/// Solves for the base value then checks every grid pair for profitable
/// one-shot deviations.
pub fn verify_equilibrium(base: &Policy, spec: &GameSpec, tol: f64) -> Result<EquilibriumReport> {
    let value = robust_value(&Strategy::from(base.clone()), base, spec, tol)?;
    verify_with_value(base, value, spec)
}

/// As [`verify_equilibrium`] with the base value already computed.
pub fn verify_with_value(base: &Policy, value: ValueTable, spec: &GameSpec) -> Result<EquilibriumReport> {
    spec.check_policy(base)?;
    let flow = Flow::MeanField;
    let all: Vec<usize> = (0..spec.actions.len()).collect();
    let ver = spec.stage(&flow, &spec.domain, base).verify(&value, &all)?;
    Ok(report(ver, value, &spec.domain, &spec.actions, spec.rho))
}

pub(crate) fn report(
    ver: crate::dpp::Verification,
    value: ValueTable,
    domain: &Arc<Domain>,
    actions: &Arc<ActionGrid>,
    rho: f64,
) -> EquilibriumReport {
    let mut responses = Policy::constant(domain, actions, RelaxedControl::point(0));
    let mut response_values = ValueTable::constant(domain, 0.0);
    for (&(node, x), br) in ver.pairs.iter().zip(&ver.responses) {
        responses.set(node, x, br.control.clone());
        response_values.set(node, x, br.value);
    }
    EquilibriumReport {
        epsilon: ver.epsilon,
        worst_state: ver.worst.1,
        worst_node: ver.worst.0,
        full_bound: 2.0 * ver.epsilon.max(0.0) / (1.0 - rho),
        value,
        responses,
        response_values,
    }
}

/// Minimizing kernel family at `(x, node)` when the agent follows `base`.
pub fn worst_case_family(base: &Policy, value: &ValueTable, x: usize, node: usize, spec: &GameSpec) -> Result<KernelFamily> {
    spec.check_policy(base)?;
    let flow = Flow::MeanField;
    let stage = spec.stage(&flow, &spec.domain, base);
    let (sol, lay) = stage.solve_node(value, node, x, base.control(node, x), &spec.inner, None)?;
    Ok(sol.family(&spec.ball, spec.domain.node(node), &lay.support))
}

/// Best values of k-period point-mass deviations followed by `base`:
/// `W_0 = value`, `W_j = max_a T(a, base) W_{j-1}` pointwise over the listed
/// actions. Returns `W_1, ..., W_k`.
pub fn k_period_values(
    base: &Policy,
    value: &ValueTable,
    spec: &GameSpec,
    head_actions: &[usize],
    k: usize,
) -> Result<Vec<ValueTable>> {
    spec.check_policy(base)?;
    let flow = Flow::MeanField;
    let stage = spec.stage(&flow, &spec.domain, base);
    let pairs = spec.domain.pairs();
    let mut out = Vec::with_capacity(k);
    let mut cur = value.clone();
    for _ in 0..k {
        let vals = pairs
            .par_iter()
            .map(|&(node, x)| stage.best_response(&cur, node, x, head_actions, None).map(|b| b.value))
            .collect::<Result<Vec<_>>>()?;
        let mut next = ValueTable::constant(&spec.domain, 0.0);
        for (&(node, x), v) in pairs.iter().zip(vals) {
            next.set(node, x, v);
        }
        out.push(next.clone());
        cur = next;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simplex::SimplexGrid;
    use crate::uncertainty::SupportPoint;

    fn two_state(h: f64, n_actions: usize) -> GameSpec {
        GameSpec::new(
            ActionGrid::uniform(n_actions).unwrap(),
            1.0 / 2.2,
            RewardSpec::quadratic_mass(1),
            BallSpec::linear_absorbing(0.2).unwrap(),
            Domain::mean_field(SimplexGrid::build(2, h).unwrap()),
            InnerConfig::default(),
        )
        .unwrap()
    }

    #[test]
    fn rho_validation() {
        let s = two_state(0.5, 3);
        let r = GameSpec::new(
            (*s.actions).clone(),
            1.0,
            s.reward.clone(),
            s.ball.clone(),
            s.domain.clone(),
            InnerConfig::default(),
        );
        assert!(r.is_err());
    }

    #[test]
    fn matrix_examples() {
        let ball = BallSpec::linear_absorbing(0.2).unwrap();
        let acts = ActionGrid::uniform(101).unwrap();
        let v = Dist::uniform(2);
        let support = vec![SupportPoint::new(0, 0.5), SupportPoint::new(1, 0.5)];
        let fam = KernelFamily::new(
            &ball,
            v.clone(),
            support,
            vec![Dist::new(vec![0.7, 0.3]).unwrap(), Dist::point(2, 1)],
        )
        .unwrap();
        let k = transition_matrix(&fam, &[RelaxedControl::point(50), RelaxedControl::point(50)], &acts).unwrap();
        assert!((k.row(0)[1] - 0.3).abs() < 1e-15);
        assert!(transition_matrix(&fam, &[RelaxedControl::point(10), RelaxedControl::point(50)], &acts).is_err());

        let support = vec![SupportPoint::new(0, 0.0), SupportPoint::new(0, 1.0), SupportPoint::new(1, 0.0)];
        let fam = KernelFamily::center(&ball, &v, support).unwrap();
        let mix = RelaxedControl::new(vec![(0, 0.5), (100, 0.5)]).unwrap();
        let k = transition_matrix(&fam, &[mix, RelaxedControl::point(0)], &acts).unwrap();
        assert_eq!(k.row(0).weights(), &[0.5, 0.5]);
    }

    #[test]
    fn constant_game_fixed_point() {
        let s = GameSpec::new(
            ActionGrid::uniform(3).unwrap(),
            0.6,
            RewardSpec::constant(0.25),
            BallSpec::linear_absorbing(0.0).unwrap(),
            Domain::mean_field(SimplexGrid::build(2, 0.25).unwrap()),
            InnerConfig::default(),
        )
        .unwrap();
        let p = Policy::constant(&s.domain, &s.actions, RelaxedControl::point(1));
        let fixed = ValueTable::constant(&s.domain, 0.25 / 0.4);
        let out = bellman(&fixed, &p, &p, &s).unwrap();
        assert!(out.sup_diff(&fixed) < 1e-12);
    }

    #[test]
    fn zero_reward_is_zero() {
        let s = GameSpec::new(
            ActionGrid::uniform(5).unwrap(),
            0.9,
            RewardSpec::constant(0.0),
            BallSpec::linear_absorbing(0.1).unwrap(),
            Domain::mean_field(SimplexGrid::build(2, 0.25).unwrap()),
            InnerConfig::default(),
        )
        .unwrap();
        let p = Policy::constant(&s.domain, &s.actions, RelaxedControl::point(2));
        let (v, iters) = robust_value_from(None, &Strategy::from(p.clone()), &p, &s, 1e-6).unwrap();
        assert_eq!(iters, 1);
        assert_eq!(v.sup_norm(), 0.0);
        let rep = verify_equilibrium(&p, &s, 1e-6).unwrap();
        assert_eq!(rep.epsilon, 0.0);
    }

    #[test]
    fn pure_cost_best_response() {
        let s = GameSpec::new(
            ActionGrid::uniform(11).unwrap(),
            0.5,
            RewardSpec::new(Arc::new(|_, u, _, _| -u * u), 1.0, 2.0).unwrap(),
            BallSpec::linear_absorbing(0.0).unwrap(),
            Domain::mean_field(SimplexGrid::build(2, 0.25).unwrap()),
            InnerConfig::default(),
        )
        .unwrap();
        let p = Policy::constant(&s.domain, &s.actions, RelaxedControl::point(5));
        let v = robust_value(&Strategy::from(p.clone()), &p, &s, 1e-8).unwrap();
        let br = best_response(&p, 0, &Dist::uniform(2), &v, &s).unwrap();
        assert_eq!(br.control, RelaxedControl::point(0));
    }

    #[test]
    fn closed_form_node_values() {
        let s = two_state(0.01, 101);
        let rho: f64 = 1.0 / 2.2;
        let vstar = |v2: f64| {
            if v2 <= 0.2 {
                v2 * v2 / (2.0 * (1.0 - rho))
            } else {
                -0.2 / (2.0 * (1.0 - rho)) + v2 / (2.0 * rho)
            }
        };
        let table = ValueTable::from_fn(&s.domain, |_, _, v| vstar(v[1]));
        let pi = Policy::from_fn(&s.domain, &s.actions, |_, _, v| RelaxedControl::mean_preserving(&s.actions, v[1]));
        let out = bellman(&table, &pi, &pi, &s).unwrap();
        for (v2, want) in [(0.1, 0.0091667), (0.5, 0.3666667)] {
            let node = s.domain.locate(0, &Dist::new(vec![1.0 - v2, v2]).unwrap()).unwrap();
            assert!((out.get(node, 0) - want).abs() < 1e-4, "{} vs {want}", out.get(node, 0));
            assert!((out.get(node, 1) - want).abs() < 1e-4);
        }
    }
}
