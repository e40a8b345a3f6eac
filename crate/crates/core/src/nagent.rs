//! The game with finitely many agents. The population law is the empirical
//! distribution of `N` agents, so the continuation is an expectation over the
//! other agents' independent transitions: exact by convolving their
//! multinomial counts when that is small enough, Monte Carlo otherwise.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::domain::{Domain, ValueTable};
use crate::dpp::{AgentFlow, Flow};
use crate::error::{invalid, Error, Result};
use crate::mfg::{mixed_row, report, EquilibriumReport, GameSpec};
use crate::policy::{Policy, RelaxedControl, Strategy};
use crate::simplex::{round_counts, Dist};
use crate::uncertainty::KernelFamily;

/// The feasible pairs: empirical laws of `N` agents with the queried state occupied.
#[derive(Clone, Debug)]
pub struct FeasibleSet {
    domain: Arc<Domain>,
    pairs: Vec<(usize, usize)>,
}

impl FeasibleSet {
    pub fn n(&self) -> usize {
        self.domain.agents_count().expect("agent domain")
    }

    pub fn domain(&self) -> &Arc<Domain> {
        &self.domain
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// `(state, law)` in table order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, &Dist)> + '_ {
        self.pairs.iter().map(|&(node, x)| (x, self.domain.node(node)))
    }

    /// `(node, state)` indices in table order.
    pub fn indices(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn contains(&self, x: usize, v: &Dist) -> bool {
        self.domain.locate(x, v).is_ok()
    }
}

pub fn feasible_enumerate(n: usize, d: usize) -> Result<FeasibleSet> {
    if n == 0 || d < 2 {
        return invalid(format!("need at least one agent and two states, got N = {n}, d = {d}"));
    }
    let domain = Domain::agents(n, d)?;
    let pairs = domain.pairs();
    Ok(FeasibleSet { domain, pairs })
}

/// States of all agents.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AgentConfig {
    states: Vec<usize>,
    d: usize,
}

impl AgentConfig {
    pub fn new(states: Vec<usize>, d: usize) -> Result<AgentConfig> {
        if states.is_empty() {
            return invalid("an agent configuration needs at least one agent");
        }
        if let Some(&s) = states.iter().find(|&&s| s >= d) {
            return invalid(format!("agent state {} outside 1..={d}", s + 1));
        }
        Ok(AgentConfig { states, d })
    }

    /// Agents laid out state by state to match `counts`.
    pub fn from_counts(counts: &[u32]) -> Result<AgentConfig> {
        let states = counts
            .iter()
            .enumerate()
            .flat_map(|(x, &c)| std::iter::repeat_n(x, c as usize))
            .collect();
        AgentConfig::new(states, counts.len())
    }

    pub fn states(&self) -> &[usize] {
        &self.states
    }

    pub fn n(&self) -> usize {
        self.states.len()
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn counts(&self) -> Vec<u32> {
        let mut c = vec![0u32; self.d];
        for &s in &self.states {
            c[s] += 1;
        }
        c
    }

    pub fn empirical(&self) -> Dist {
        Dist::from_counts(&self.counts())
    }
}

/// Limits and seeds for the continuation expectation.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentSettings {
    /// Largest outcome count handled exactly.
    pub exact_cap: f64,
    pub mc_samples: usize,
    pub seed: u64,
}

impl Default for AgentSettings {
    fn default() -> Self {
        AgentSettings {
            exact_cap: 2e5,
            mc_samples: 10_000,
            seed: 0,
        }
    }
}

/// A policy tabulated on the feasible pairs of `domain`: kept as is when it
/// already lives there, otherwise re-tabulated by nearest-node lookup.
pub fn on_agents(policy: &Policy, domain: &Arc<Domain>) -> Result<Policy> {
    if domain.agents_count().is_none() {
        return invalid("target is not an agent domain");
    }
    if **policy.domain() == **domain {
        Ok(policy.clone())
    } else {
        policy.restrict(domain)
    }
}

fn on_agents_strategy(s: &Strategy, domain: &Arc<Domain>) -> Result<Strategy> {
    let tail = on_agents(s.tail(), domain)?;
    Ok(match s {
        Strategy::Stationary(_) => Strategy::Stationary(tail),
        Strategy::Perturbed { heads, .. } => Strategy::Perturbed {
            heads: heads.iter().map(|h| on_agents(h, domain)).collect::<Result<_>>()?,
            tail,
        },
    })
}

fn check_actions(p: &Policy, spec: &GameSpec) -> Result<()> {
    if **p.actions() != **spec.actions() {
        return invalid("policy uses a different action grid than the game");
    }
    Ok(())
}

struct Setup {
    domain: Arc<Domain>,
    flow: Flow,
}

fn setup(n: usize, spec: &GameSpec, settings: &AgentSettings) -> Result<Setup> {
    let domain = Domain::agents(n, spec.d())?;
    let flow = Flow::Agents(AgentFlow::new(&domain, settings.exact_cap, settings.mc_samples, settings.seed)?);
    Ok(Setup { domain, flow })
}

/// Next-state laws of the other agents, one row per state.
fn other_laws(
    x: usize,
    v: &Dist,
    family: &KernelFamily,
    base: &Policy,
    table: &ValueTable,
) -> Result<(AgentFlow, Vec<u32>, usize, Vec<f64>)> {
    let domain = table.domain();
    if domain.agents_count().is_none() {
        return invalid("continuation needs a table on an agent domain");
    }
    let node = domain.locate(x, v)?;
    let base = on_agents(base, domain)?;
    let d = domain.dim();
    let mut others = domain.counts(node).to_vec();
    others[x] -= 1;
    let mut q = vec![0.0; d * d];
    for s in 0..d {
        if others[s] == 0 {
            continue;
        }
        let row = mixed_row(family, s, base.control(node, s), base.actions())?;
        q[s * d..(s + 1) * d].copy_from_slice(row.weights());
    }
    Ok((AgentFlow::new(domain, f64::INFINITY, 0, 0)?, others, node, q))
}

/// Exact `E V(y, next empirical law)` when the agent at `x` lands in `y` and the
/// others follow `base` under `family`. Fails with a budget error when the
/// number of joint outcomes exceeds `cap`; use [`continuation_mc`] then.
pub fn continuation_exact(
    y: usize,
    x: usize,
    v: &Dist,
    family: &KernelFamily,
    base: &Policy,
    table: &ValueTable,
    cap: f64,
) -> Result<f64> {
    let (af, others, _, q) = other_laws(x, v, family, base, table)?;
    let count = af.outcome_count(&others);
    if count > cap {
        return Err(Error::Budget {
            count,
            cap,
        });
    }
    let mut out = vec![0.0; af.d];
    af.continuation_exact(&others, &q, table, &mut out);
    Ok(out[y])
}

/// Sample mean of the same expectation over `samples` draws, with its
/// standard error. Reproducible for a fixed seed.
#[allow(clippy::too_many_arguments)]
pub fn continuation_mc(
    y: usize,
    x: usize,
    v: &Dist,
    family: &KernelFamily,
    base: &Policy,
    table: &ValueTable,
    seed: u64,
    samples: usize,
) -> Result<(f64, f64)> {
    if samples == 0 {
        return invalid("need at least one sample");
    }
    let (af, others, node, q) = other_laws(x, v, family, base, table)?;
    let u = af.uniforms(node, x, samples, seed);
    let mut out = vec![0.0; af.d];
    let mut se = vec![0.0; af.d];
    af.continuation_sampled(&others, &q, table, &u, &mut out, Some(&mut se));
    Ok((out[y], se[y]))
}

/// One application of the robust operator on the feasible pairs.
pub fn nagent_bellman(
    table: &ValueTable,
    dev: &Policy,
    base: &Policy,
    n: usize,
    spec: &GameSpec,
    settings: &AgentSettings,
) -> Result<ValueTable> {
    let s = setup(n, spec, settings)?;
    if **table.domain() != *s.domain {
        return invalid("table does not live on the feasible pairs of this N");
    }
    let (dev, base) = (on_agents(dev, &s.domain)?, on_agents(base, &s.domain)?);
    check_actions(&base, spec)?;
    check_actions(&dev, spec)?;
    spec.stage(&s.flow, &s.domain, &base).sweep(table, &dev, spec.inner())
}

/// Robust value of `dev` against `base` with `n` agents.
pub fn nagent_value(
    dev: &Strategy,
    base: &Policy,
    n: usize,
    spec: &GameSpec,
    tol: f64,
    settings: &AgentSettings,
) -> Result<ValueTable> {
    Ok(nagent_value_from(None, dev, base, n, spec, tol, settings)?.0)
}

/// As [`nagent_value`] from a chosen starting table; also returns the sweep count.
pub fn nagent_value_from(
    init: Option<ValueTable>,
    dev: &Strategy,
    base: &Policy,
    n: usize,
    spec: &GameSpec,
    tol: f64,
    settings: &AgentSettings,
) -> Result<(ValueTable, usize)> {
    let s = setup(n, spec, settings)?;
    let base = on_agents(base, &s.domain)?;
    let dev = on_agents_strategy(dev, &s.domain)?;
    check_actions(&base, spec)?;
    check_actions(dev.tail(), spec)?;
    if let Some(t) = &init {
        if **t.domain() != *s.domain {
            return invalid("starting table does not live on the feasible pairs of this N");
        }
    }
    spec.stage(&s.flow, &s.domain, &base).value(&dev, tol, init)
}

/// Largest one-shot gain of any point-mass deviation against `base`.
pub fn nagent_verify(
    base: &Policy,
    n: usize,
    spec: &GameSpec,
    tol: f64,
    settings: &AgentSettings,
) -> Result<EquilibriumReport> {
    let value = nagent_value(&Strategy::from(base.clone()), base, n, spec, tol, settings)?;
    nagent_verify_with_value(base, value, spec, settings)
}

/// As [`nagent_verify`] with the base value already computed.
pub fn nagent_verify_with_value(
    base: &Policy,
    value: ValueTable,
    spec: &GameSpec,
    settings: &AgentSettings,
) -> Result<EquilibriumReport> {
    let n = value
        .domain()
        .agents_count()
        .ok_or_else(|| Error::InvalidArgument("value table is not on an agent domain".into()))?;
    let s = setup(n, spec, settings)?;
    let base = on_agents(base, &s.domain)?;
    check_actions(&base, spec)?;
    let all: Vec<usize> = (0..spec.actions().len()).collect();
    let ver = spec.stage(&s.flow, &s.domain, &base).verify(&value, &all)?;
    Ok(report(ver, value, &s.domain, spec.actions(), spec.rho()))
}

/// Settings of the damped best-response search.
#[derive(Clone, Debug, PartialEq)]
pub struct DampedConfig {
    /// Weight of the best response in each update.
    pub alpha: f64,
    /// Target one-shot gain.
    pub tol: f64,
    pub max_iters: usize,
    /// Seed of the random initial policy.
    pub seed: u64,
    /// Mixture weights below this are dropped.
    pub prune: f64,
    /// Accuracy of each value solve.
    pub value_tol: f64,
}

impl Default for DampedConfig {
    fn default() -> Self {
        DampedConfig {
            alpha: 0.5,
            tol: 1e-3,
            max_iters: 200,
            seed: 0,
            prune: 1e-6,
            value_tol: 1e-7,
        }
    }
}

/// Outcome of the damped best-response search.
#[derive(Clone, Debug)]
pub struct EquilibriumSearch {
    /// Policy with the smallest verified gain seen.
    pub policy: Policy,
    pub epsilon: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Verified gain of every iterate.
    pub history: Vec<f64>,
    pub report: EquilibriumReport,
}

/// Damped best-response iteration `pi <- (1 - alpha) pi + alpha BR(pi)`,
/// accepted only through the verified gain of each iterate.
pub fn nagent_equilibrium(
    n: usize,
    spec: &GameSpec,
    cfg: &DampedConfig,
    init: Option<&Policy>,
    settings: &AgentSettings,
) -> Result<EquilibriumSearch> {
    if !(cfg.alpha > 0.0 && cfg.alpha <= 1.0) {
        return invalid(format!("damping alpha = {} must lie in (0, 1]", cfg.alpha));
    }
    if cfg.max_iters == 0 {
        return invalid("need at least one iteration");
    }
    let s = setup(n, spec, settings)?;
    let actions = spec.actions();
    let mut pi = match init {
        Some(p) => on_agents(p, &s.domain)?,
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut p = Policy::constant(&s.domain, actions, RelaxedControl::point(0));
            for (node, x) in s.domain.pairs() {
                p.set(node, x, RelaxedControl::point(rng.gen_range(0..actions.len())));
            }
            p
        }
    };
    check_actions(&pi, spec)?;
    let all: Vec<usize> = (0..actions.len()).collect();
    let mut value: Option<ValueTable> = None;
    let mut history = Vec::new();
    let mut best: Option<(Policy, EquilibriumReport)> = None;
    let mut converged = false;
    for _ in 0..cfg.max_iters {
        let stage = spec.stage(&s.flow, &s.domain, &pi);
        let (v, _) = stage.value(&Strategy::from(pi.clone()), cfg.value_tol, value.take())?;
        let ver = stage.verify(&v, &all)?;
        let rep = report(ver, v.clone(), &s.domain, actions, spec.rho());
        history.push(rep.epsilon);
        value = Some(v);
        let improved = best.as_ref().is_none_or(|(_, b)| rep.epsilon < b.epsilon);
        let done = rep.epsilon <= cfg.tol;
        let next = pi.mix(&rep.responses, cfg.alpha, cfg.prune)?;
        if improved {
            best = Some((pi.clone(), rep));
        }
        if done {
            converged = true;
            break;
        }
        pi = next;
    }
    let (policy, report) = best.expect("at least one iteration ran");
    Ok(EquilibriumSearch {
        policy,
        epsilon: report.epsilon,
        converged,
        iterations: history.len(),
        history,
        report,
    })
}

/// How the adversary picks kernels during a simulation.
#[derive(Clone, Debug)]
pub enum Adversary {
    /// Centers of the balls.
    Center,
    /// Inner minimizers for each agent's state at each step, continuing with
    /// the given value table on the feasible pairs.
    WorstCase(ValueTable),
    /// Fixed rows indexed by `[state][action index]`.
    Tabulated(Vec<Vec<Dist>>),
}

/// Per-(step, agent) random stream derived from the master seed.
pub fn agent_rng(seed: u64, step: usize, agent: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((step as u64) << 32) | agent as u64);
    rng
}

fn sample_index(weights: impl Iterator<Item = (usize, f64)>, u: f64) -> Option<usize> {
    let mut acc = 0.0;
    let mut last = None;
    for (i, w) in weights {
        if w <= 0.0 {
            continue;
        }
        acc += w;
        last = Some(i);
        if u < acc {
            return Some(i);
        }
    }
    last
}

/// `steps + 1` configurations starting from `initial`: each step every agent
/// samples an action from its control and then its next state from the
/// adversary's row. Results do not depend on the worker count.
#[allow(clippy::too_many_arguments)]
pub fn simulate(
    policy: &Policy,
    adversary: &Adversary,
    spec: &GameSpec,
    initial: &AgentConfig,
    steps: usize,
    seed: u64,
    settings: &AgentSettings,
) -> Result<Vec<AgentConfig>> {
    let n = initial.n();
    let d = spec.d();
    if initial.dim() != d {
        return invalid(format!("configuration has {} states, the game {d}", initial.dim()));
    }
    let s = setup(n, spec, settings)?;
    let policy = on_agents(policy, &s.domain)?;
    check_actions(&policy, spec)?;
    let actions = spec.actions();
    let na = actions.len();
    if let Adversary::Tabulated(rows) = adversary {
        if rows.len() != d || rows.iter().any(|r| r.len() != na || r.iter().any(|q| q.dim() != d)) {
            return invalid(format!("tabulated adversary needs {d} x {na} rows of dimension {d}"));
        }
    }
    if let Adversary::WorstCase(t) = adversary {
        if **t.domain() != *s.domain {
            return invalid("worst-case value table does not live on the feasible pairs of this N");
        }
    }
    let mut path = vec![initial.clone()];
    for t in 0..steps {
        let cur = path.last().expect("nonempty path");
        let counts = cur.counts();
        let v = Dist::from_counts(&counts);
        let node = s.domain.grid().index_of(&counts).expect("counts lie on the grid");
        // rows[x * na + a] for every charged (state, action)
        let mut rows: Vec<Option<Dist>> = vec![None; d * na];
        for x in (0..d).filter(|&x| counts[x] > 0) {
            let control = policy.control(node, x);
            let family = match adversary {
                Adversary::WorstCase(table) => {
                    let stage = spec.stage(&s.flow, &s.domain, &policy);
                    let (sol, lay) = stage.solve_node(table, node, x, control, spec.inner(), None)?;
                    Some(sol.family(spec.ball(), &v, &lay.support))
                }
                _ => None,
            };
            for &(a, _) in control.entries() {
                let u = actions.point(a);
                rows[x * na + a] = Some(match adversary {
                    Adversary::Center => spec.ball().center(x, u, &v),
                    Adversary::Tabulated(tab) => tab[x][a].clone(),
                    Adversary::WorstCase(_) => family
                        .as_ref()
                        .and_then(|f| f.row(x, u))
                        .cloned()
                        .expect("minimizer covers the charged actions"),
                });
            }
        }
        let next: Vec<usize> = cur
            .states()
            .par_iter()
            .enumerate()
            .map(|(i, &x)| {
                let mut rng = agent_rng(seed, t, i);
                let (ua, uy): (f64, f64) = (rng.gen(), rng.gen());
                let control = policy.control(node, x);
                let a = sample_index(control.entries().iter().copied(), ua).expect("control has mass");
                let row = rows[x * na + a].as_ref().expect("row prepared for charged action");
                sample_index(row.weights().iter().copied().enumerate(), uy).expect("row has mass")
            })
            .collect();
        path.push(AgentConfig::new(next, d)?);
    }
    Ok(path)
}

/// A feasible law near `v` for an agent at `x`: one agent at `x` plus the
/// L1-nearest empirical law of the other `N - 1` agents.
pub fn approximate_state(x: usize, v: &Dist, n: usize) -> Result<Dist> {
    let d = v.dim();
    if n < 2 {
        return invalid(format!("need N >= 2, got {n}"));
    }
    if x >= d {
        return invalid(format!("state {} outside 1..={d}", x + 1));
    }
    let mut counts = round_counts(v.weights(), n - 1);
    counts[x] += 1;
    Ok(Dist::from_counts(&counts))
}
