//! Turns a validated [`RunConfig`] into games, policies and study specs.

use std::sync::Arc;

use anyhow::{bail, Context, Result};
use rmfg::converge::{Reference, StudySpec};
use rmfg::domain::Domain;
use rmfg::mfg::{GameSpec, RewardSpec};
use rmfg::models::{ComparisonSpec, TwoStateSpec};
use rmfg::nagent::{AgentSettings, DampedConfig};
use rmfg::policy::{ActionGrid, Policy, RelaxedControl};
use rmfg::simplex::{Dist, SimplexGrid};
use rmfg::uncertainty::{BallSpec, InnerConfig};

use crate::config::{BallConfig, RewardConfig, RunConfig};

pub struct Assembled {
    pub game: GameSpec,
    /// Present for the solvable two-state game.
    pub two_state: Option<TwoStateSpec>,
}

pub fn inner(cfg: &RunConfig) -> InnerConfig {
    let i = &cfg.inner;
    InnerConfig {
        grid: i.grid,
        refine_depth: i.refine_depth,
        starts: i.starts,
        budget: i.budget,
        max_evals: i.max_evals,
    }
}

pub fn settings(cfg: &RunConfig) -> AgentSettings {
    AgentSettings {
        exact_cap: cfg.nagent.exact_cap,
        mc_samples: cfg.nagent.mc_samples,
        seed: cfg.nagent.seed,
    }
}

pub fn damped(cfg: &RunConfig) -> DampedConfig {
    let n = &cfg.nagent;
    DampedConfig {
        alpha: n.alpha,
        tol: n.tol,
        max_iters: n.max_iters,
        seed: n.seed,
        prune: n.prune,
        value_tol: n.value_tol,
    }
}

pub fn comparison(cfg: &RunConfig) -> Result<ComparisonSpec> {
    let m = &cfg.model;
    ComparisonSpec::new(m.epsilon, m.rho.unwrap_or(0.9), m.v2).context("model: comparison-one-period game")
}

/// The game on the configured simplex grid and action grid.
pub fn game(cfg: &RunConfig) -> Result<Assembled> {
    let m = &cfg.model;
    let (h, spacing) = (cfg.grid.h, cfg.grid.action_spacing);
    match m.builtin.as_str() {
        "two-state-solvable" => {
            let spec = TwoStateSpec::new(m.epsilon).context("model.epsilon")?;
            if let Some(rho) = m.rho {
                if (rho - spec.rho()).abs() > 1e-12 {
                    bail!(
                        "model.rho: the two-state-solvable game forces rho = 1/(2 + epsilon) = {}, got {rho}",
                        spec.rho()
                    );
                }
            }
            let game = spec.game(h, spacing, inner(cfg)).context("grid")?;
            Ok(Assembled {
                game,
                two_state: Some(spec),
            })
        }
        "custom" => {
            let d = m.d.context("model.d: custom models need a state count")?;
            if d < 2 {
                bail!("model.d: need at least two states, got {d}");
            }
            let rho = m.rho.context("model.rho: custom models need a discount factor")?;
            let ball = ball(m.ball.as_ref().context("model.ball: custom models need a ball")?, d)?;
            let reward = reward(m.reward.as_ref().context("model.reward: custom models need a reward")?, d)?;
            let grid = SimplexGrid::build(d, h).context("grid.h")?;
            let actions = ActionGrid::with_spacing(spacing).context("grid.action_spacing")?;
            let game = GameSpec::new(actions, rho, reward, ball, Domain::mean_field(grid), inner(cfg)).context("model")?;
            Ok(Assembled { game, two_state: None })
        }
        other => bail!("model.builtin: '{other}' is not a dynamic game; use example-comparison"),
    }
}

fn ball(b: &BallConfig, d: usize) -> Result<BallSpec> {
    match b.kind.as_str() {
        "linear-absorbing" => {
            if d != 2 {
                bail!("model.ball.kind: linear-absorbing needs d = 2, got {d}");
            }
            BallSpec::linear_absorbing(b.epsilon).context("model.ball.epsilon")
        }
        "tabulated" => {
            if b.centers.len() != d {
                bail!("model.ball.centers: expected {d} states, got {}", b.centers.len());
            }
            let mut centers = Vec::with_capacity(d);
            for (x, row) in b.centers.iter().enumerate() {
                let row = row
                    .iter()
                    .enumerate()
                    .map(|(k, w)| {
                        Dist::new(w.clone()).with_context(|| format!("model.ball.centers[{x}][{k}]"))
                    })
                    .collect::<Result<Vec<_>>>()?;
                centers.push(row);
            }
            BallSpec::tabulated(&b.center_actions, centers, b.radii.clone(), b.lipschitz).context("model.ball")
        }
        other => bail!("model.ball.kind: unknown ball '{other}'"),
    }
}

fn reward(r: &RewardConfig, d: usize) -> Result<RewardSpec> {
    match r.kind.as_str() {
        "quadratic-mass" => {
            if r.target < 1 || r.target > d {
                bail!("model.reward.target: state {} outside 1..={d}", r.target);
            }
            Ok(RewardSpec::quadratic_mass(r.target - 1))
        }
        "constant" => Ok(RewardSpec::constant(r.value)),
        "table" => {
            if r.table.len() != d || r.table.iter().any(|row| row.len() != d) {
                bail!("model.reward.table: expected a {d} x {d} table");
            }
            if !(r.cost >= 0.0) {
                bail!("model.reward.cost: must be nonnegative, got {}", r.cost);
            }
            let bound = r.table.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs())) + 0.5 * r.cost;
            let (table, cost) = (r.table.clone(), r.cost);
            RewardSpec::new(Arc::new(move |x, u, _, y| table[x][y] - 0.5 * cost * u * u), bound, cost)
                .context("model.reward")
        }
        other => bail!("model.reward.kind: unknown reward '{other}'"),
    }
}

/// The configured policy on `domain`.
pub fn policy(cfg: &RunConfig, a: &Assembled, domain: &Arc<Domain>) -> Result<Policy> {
    let actions = a.game.actions();
    match cfg.solve.policy.as_str() {
        "closed-form" => match &a.two_state {
            Some(s) => Ok(s.closed_form_policy(domain, actions)),
            None => bail!("solve.policy: closed-form is only available for model.builtin = two-state-solvable"),
        },
        "constant" => {
            let u = cfg.solve.action;
            if !(0.0..=1.0).contains(&u) {
                bail!("solve.action: {u} is outside [0, 1]");
            }
            Ok(Policy::constant(domain, actions, RelaxedControl::mean_preserving(actions, u)))
        }
        "file" => {
            let path = cfg.solve.policy_file.as_ref().context("solve.policy_file: required when solve.policy = file")?;
            let f = std::fs::File::open(path).with_context(|| format!("solve.policy_file: opening {}", path.display()))?;
            let p = Policy::read_table(std::io::BufReader::new(f))
                .with_context(|| format!("solve.policy_file: reading {}", path.display()))?;
            if **p.actions() != **actions {
                bail!("solve.policy_file: action grid differs from grid.action_spacing");
            }
            if **p.domain() == **domain {
                Ok(p)
            } else if domain.agents_count().is_some() {
                Ok(rmfg::nagent::on_agents(&p, domain)?)
            } else {
                Ok(p.restrict(domain)?)
            }
        }
        other => bail!("solve.policy: unknown source '{other}'"),
    }
}

pub fn study(cfg: &RunConfig, a: &Assembled) -> Result<StudySpec> {
    let reference = match (&a.two_state, cfg.solve.policy.as_str()) {
        (Some(_), "closed-form") => {
            let actions = a.game.actions().clone();
            Reference::Function(Arc::new(move |_, v: &Dist| RelaxedControl::mean_preserving(&actions, v[1])))
        }
        _ => Reference::Grid(policy(cfg, a, a.game.domain())?),
    };
    let mut spec = StudySpec::new(a.game.clone(), cfg.study.ladder.clone(), reference).context("study.ladder")?;
    spec.value_tol = cfg.solve.tol;
    spec.settings = settings(cfg);
    spec.damped = damped(cfg);
    Ok(spec)
}

pub fn agent_domain(n: usize, a: &Assembled) -> Result<Arc<Domain>> {
    Domain::agents(n, a.game.d()).context("nagent.n")
}
