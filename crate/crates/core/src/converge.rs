//! Convergence studies over a ladder of agent counts: value gaps and
//! one-shot gains of the mean-field policy in the N-agent game, and distances
//! from N-agent equilibria to the mean-field policy.

use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;

use crate::domain::Domain;
use crate::error::{invalid, Error, Result};
use crate::io::{fmt_num, write_rows};
use crate::mfg::{robust_value, GameSpec};
use crate::nagent::{nagent_equilibrium, nagent_value, nagent_verify_with_value, on_agents, AgentSettings, DampedConfig};
use crate::policy::{Policy, RelaxedControl, Strategy};
use crate::simplex::Dist;

pub type ReferenceFn = dyn Fn(usize, &Dist) -> RelaxedControl + Send + Sync;

/// The mean-field policy the ladder is compared against.
#[derive(Clone)]
pub enum Reference {
    /// Tabulated on the game's grid; other laws use the nearest node.
    Grid(Policy),
    /// Defined at every law.
    Function(Arc<ReferenceFn>),
}

impl std::fmt::Debug for Reference {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Reference::Grid(_) => f.write_str("Reference::Grid"),
            Reference::Function(_) => f.write_str("Reference::Function"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct StudySpec {
    pub game: GameSpec,
    pub ladder: Vec<usize>,
    pub reference: Reference,
    pub value_tol: f64,
    pub settings: AgentSettings,
    pub damped: DampedConfig,
}

impl StudySpec {
    pub fn new(game: GameSpec, ladder: Vec<usize>, reference: Reference) -> Result<StudySpec> {
        if ladder.is_empty() || ladder[0] < 2 || ladder.windows(2).any(|w| w[1] <= w[0]) {
            return invalid(format!("ladder {ladder:?} must be strictly increasing with every N >= 2"));
        }
        if let Reference::Grid(p) = &reference {
            if **p.domain() != **game.domain() || **p.actions() != **game.actions() {
                return invalid("reference policy does not live on the game's grid and action set");
            }
        }
        Ok(StudySpec {
            game,
            ladder,
            reference,
            value_tol: 1e-8,
            settings: AgentSettings::default(),
            damped: DampedConfig::default(),
        })
    }

    /// The reference policy tabulated on `domain`.
    pub fn reference_on(&self, domain: &Arc<Domain>) -> Result<Policy> {
        match &self.reference {
            Reference::Function(f) => Ok(Policy::from_fn(domain, self.game.actions(), |x, _, v| f(x, v))),
            Reference::Grid(p) if domain.agents_count().is_some() => on_agents(p, domain),
            Reference::Grid(p) if **p.domain() == **domain => Ok(p.clone()),
            Reference::Grid(p) => p.restrict(domain),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GapRow {
    pub n: usize,
    pub gap: f64,
    pub worst_state: usize,
    pub worst_counts: Vec<u32>,
}

/// `sup |V^N - V|` over the feasible pairs, with `V` the mean-field value
/// interpolated at the empirical laws.
pub fn value_gap_study(spec: &StudySpec) -> Result<Vec<GapRow>> {
    let game = &spec.game;
    let pi = spec.reference_on(game.domain())?;
    let mf = robust_value(&Strategy::from(pi.clone()), &pi, game, spec.value_tol)?;
    spec.ladder
        .par_iter()
        .map(|&n| {
            let dom = Domain::agents(n, game.d())?;
            let pn = spec.reference_on(&dom)?;
            let vn = nagent_value(&Strategy::from(pn.clone()), &pn, n, game, spec.value_tol, &spec.settings)?;
            let mut row = GapRow {
                n,
                gap: 0.0,
                worst_state: 0,
                worst_counts: dom.counts(0).to_vec(),
            };
            for (node, x) in dom.pairs() {
                let g = (vn.get(node, x) - mf.interp(x, dom.node(node).weights())).abs();
                if g > row.gap {
                    row.gap = g;
                    row.worst_state = x;
                    row.worst_counts = dom.counts(node).to_vec();
                }
            }
            Ok(row)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpsRow {
    pub n: usize,
    pub epsilon: f64,
    pub worst_state: usize,
    pub worst_counts: Vec<u32>,
}

/// One-shot gain of the reference policy in each N-agent game.
pub fn eps_nash_study(spec: &StudySpec) -> Result<Vec<EpsRow>> {
    let game = &spec.game;
    spec.ladder
        .par_iter()
        .map(|&n| {
            let dom = Domain::agents(n, game.d())?;
            let pn = spec.reference_on(&dom)?;
            let vn = nagent_value(&Strategy::from(pn.clone()), &pn, n, game, spec.value_tol, &spec.settings)?;
            let rep = nagent_verify_with_value(&pn, vn, game, &spec.settings)?;
            Ok(EpsRow {
                n,
                epsilon: rep.epsilon,
                worst_state: rep.worst_state,
                worst_counts: dom.counts(rep.worst_node).to_vec(),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LimitRow {
    pub n: usize,
    /// Largest W1 distance between the N-agent equilibrium and the reference.
    pub distance: f64,
    /// Empirical modulus of continuity of the N-agent equilibrium.
    pub modulus: f64,
    pub epsilon: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Damped best-response equilibria along the ladder and their distance to
/// the reference. Rows whose search did not converge are flagged and the
/// study continues.
pub fn limit_policy_study(spec: &StudySpec) -> Result<Vec<LimitRow>> {
    let game = &spec.game;
    spec.ladder
        .par_iter()
        .map(|&n| {
            let dom = Domain::agents(n, game.d())?;
            let pn = spec.reference_on(&dom)?;
            let res = nagent_equilibrium(n, game, &spec.damped, None, &spec.settings)?;
            Ok(LimitRow {
                n,
                distance: res.policy.sup_w1(&pn)?,
                modulus: res.policy.modulus(),
                epsilon: res.epsilon,
                converged: res.converged,
                iterations: res.iterations,
            })
        })
        .collect()
}

/// Whether `values` never increase.
pub fn nonincreasing(values: &[f64]) -> bool {
    values.windows(2).all(|w| w[1] <= w[0])
}

fn counts_field(c: &[u32]) -> String {
    c.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(":")
}

pub fn write_gap_csv(rows: &[GapRow], out: impl Write) -> Result<()> {
    let recs: Vec<Vec<String>> = rows
        .iter()
        .map(|r| vec![r.n.to_string(), fmt_num(r.gap), (r.worst_state + 1).to_string(), counts_field(&r.worst_counts)])
        .collect();
    write_rows(&["n", "gap", "worst_state", "worst_counts"], &recs, out)
}

pub fn write_eps_csv(rows: &[EpsRow], out: impl Write) -> Result<()> {
    let recs: Vec<Vec<String>> = rows
        .iter()
        .map(|r| vec![r.n.to_string(), fmt_num(r.epsilon), (r.worst_state + 1).to_string(), counts_field(&r.worst_counts)])
        .collect();
    write_rows(&["n", "epsilon", "worst_state", "worst_counts"], &recs, out)
}

pub fn write_limit_csv(rows: &[LimitRow], out: impl Write) -> Result<()> {
    let recs: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.n.to_string(),
                fmt_num(r.distance),
                fmt_num(r.modulus),
                fmt_num(r.epsilon),
                r.converged.to_string(),
                r.iterations.to_string(),
            ]
        })
        .collect();
    write_rows(&["n", "distance", "modulus", "epsilon", "converged", "iterations"], &recs, out)
}

/// Fails with a non-convergence error naming the first unconverged rung.
pub fn require_converged(rows: &[LimitRow]) -> Result<()> {
    match rows.iter().find(|r| !r.converged) {
        None => Ok(()),
        Some(r) => Err(Error::NonConvergence {
            what: format!("damped best response at N = {}", r.n),
            iterations: r.iterations,
            best: r.epsilon,
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mfg::RewardSpec;
    use crate::policy::ActionGrid;
    use crate::simplex::SimplexGrid;
    use crate::uncertainty::{BallSpec, InnerConfig};

    fn single_action() -> StudySpec {
        let game = GameSpec::new(
            ActionGrid::single(0.5).unwrap(),
            0.7,
            RewardSpec::quadratic_mass(1),
            BallSpec::linear_absorbing(0.0).unwrap(),
            Domain::mean_field(SimplexGrid::build(2, 0.125).unwrap()),
            InnerConfig::default(),
        )
        .unwrap();
        let pi = Policy::constant(game.domain(), game.actions(), RelaxedControl::point(0));
        StudySpec::new(game, vec![2, 4, 8], Reference::Grid(pi)).unwrap()
    }

    #[test]
    fn ladder_validation() {
        let s = single_action();
        assert!(StudySpec::new(s.game.clone(), vec![4, 2], s.reference.clone()).is_err());
        assert!(StudySpec::new(s.game.clone(), vec![1, 2], s.reference.clone()).is_err());
    }

    #[test]
    fn single_action_ladders() {
        let s = single_action();
        for r in eps_nash_study(&s).unwrap() {
            assert_eq!(r.epsilon, 0.0);
        }
        for r in limit_policy_study(&s).unwrap() {
            assert_eq!(r.distance, 0.0);
            assert!(r.converged);
        }
        let bound = 2.0 * s.game.value_bound();
        for r in value_gap_study(&s).unwrap() {
            assert!(r.gap <= bound);
        }
        assert!(nonincreasing(&[3.0, 2.0, 2.0]));
        assert!(!nonincreasing(&[1.0, 2.0]));
    }
}
