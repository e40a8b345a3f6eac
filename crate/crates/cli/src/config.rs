//! Run configuration: one TOML document, optionally overridden by
//! `--set dotted.key=value` flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub grid: GridConfig,
    pub inner: InnerSection,
    pub solve: SolveConfig,
    pub nagent: NagentConfig,
    pub simulate: SimulateConfig,
    pub study: StudyConfig,
    pub output: OutputConfig,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// "two-state-solvable", "comparison-one-period" or "custom".
    pub builtin: String,
    pub epsilon: f64,
    /// Custom models and the comparison game.
    pub rho: Option<f64>,
    /// Comparison game: population mass in the absorbing state.
    pub v2: f64,
    /// Comparison game: action of the deviating agent.
    pub deviation: f64,
    /// Custom models: number of states.
    pub d: Option<usize>,
    pub ball: Option<BallConfig>,
    pub reward: Option<RewardConfig>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            builtin: "two-state-solvable".into(),
            epsilon: 0.2,
            rho: None,
            v2: 0.3,
            deviation: 0.26,
            d: None,
            ball: None,
            reward: None,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct BallConfig {
    /// "linear-absorbing" or "tabulated".
    pub kind: String,
    #[serde(default)]
    pub epsilon: f64,
    #[serde(default = "one")]
    pub lipschitz: f64,
    /// Tabulated: action points where centers are given.
    #[serde(default)]
    pub center_actions: Vec<f64>,
    /// Tabulated: `centers[state][point]` is a law over the states.
    #[serde(default)]
    pub centers: Vec<Vec<Vec<f64>>>,
    #[serde(default)]
    pub radii: Vec<f64>,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RewardConfig {
    /// "quadratic-mass", "constant" or "table".
    pub kind: String,
    /// Quadratic mass: 1-based state whose mass multiplies the action.
    #[serde(default = "two")]
    pub target: usize,
    #[serde(default)]
    pub value: f64,
    /// Table: `table[x][y]` plus `-cost * u^2 / 2`.
    #[serde(default)]
    pub table: Vec<Vec<f64>>,
    #[serde(default)]
    pub cost: f64,
}

fn two() -> usize {
    2
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub h: f64,
    pub action_spacing: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            h: 0.005,
            action_spacing: 0.01,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct InnerSection {
    pub grid: usize,
    pub refine_depth: usize,
    pub starts: usize,
    pub budget: usize,
    pub max_evals: usize,
}

impl Default for InnerSection {
    fn default() -> Self {
        let d = rmfg::uncertainty::InnerConfig::default();
        InnerSection {
            grid: d.grid,
            refine_depth: d.refine_depth,
            starts: d.starts,
            budget: d.budget,
            max_evals: d.max_evals,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolveConfig {
    pub tol: f64,
    /// "closed-form", "constant" or "file".
    pub policy: String,
    pub action: f64,
    pub policy_file: Option<PathBuf>,
    /// Comparison game: bisection tolerance.
    pub bisection_tol: f64,
}

impl Default for SolveConfig {
    fn default() -> Self {
        SolveConfig {
            tol: 1e-8,
            policy: "closed-form".into(),
            action: 0.0,
            policy_file: None,
            bisection_tol: 1e-10,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct NagentConfig {
    pub n: usize,
    pub exact_cap: f64,
    pub mc_samples: usize,
    pub seed: u64,
    pub alpha: f64,
    pub tol: f64,
    pub max_iters: usize,
    pub prune: f64,
    pub value_tol: f64,
}

impl Default for NagentConfig {
    fn default() -> Self {
        NagentConfig {
            n: 4,
            exact_cap: 2e5,
            mc_samples: 10_000,
            seed: 0,
            alpha: 0.5,
            tol: 1e-3,
            max_iters: 200,
            prune: 1e-6,
            value_tol: 1e-7,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateConfig {
    pub n: usize,
    pub steps: usize,
    pub seed: u64,
    /// "center", "worst-case" or "tabulated".
    pub adversary: String,
    /// Tabulated adversary: `rows[state][action index]`.
    pub rows: Vec<Vec<Vec<f64>>>,
    /// Initial agent counts per state; all agents in state 1 when empty.
    pub initial: Vec<u32>,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            n: 100,
            steps: 20,
            seed: 1,
            adversary: "center".into(),
            rows: Vec::new(),
            initial: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudyConfig {
    pub ladder: Vec<usize>,
    /// Any of "value-gap", "eps-nash", "limit-policy".
    pub checks: Vec<String>,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            ladder: vec![2, 4, 8, 16],
            checks: vec!["value-gap".into(), "eps-nash".into(), "limit-policy".into()],
        }
    }
}

#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: Option<PathBuf>,
}

/// Reads a TOML config, or the `config` object of a JSON run manifest.
pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<(RunConfig, toml::Table)> {
    let mut table = match path {
        None => toml::Table::new(),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            if p.extension().is_some_and(|e| e == "json") {
                let manifest: serde_json::Value =
                    serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", p.display()))?;
                let cfg = manifest
                    .get("config")
                    .with_context(|| format!("manifest {} has no 'config' object", p.display()))?;
                let cfg: RunConfig = serde_json::from_value(cfg.clone()).context("manifest config")?;
                toml::Table::try_from(cfg).context("re-encoding manifest config")?
            } else {
                text.parse::<toml::Table>()
                    .with_context(|| format!("parsing config {}", p.display()))?
            }
        }
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let cfg: RunConfig = toml::Value::Table(table.clone())
        .try_into()
        .context("config does not match the schema")?;
    Ok((cfg, table))
}

fn apply_override(table: &mut toml::Table, item: &str) -> Result<()> {
    let Some((key, raw)) = item.split_once('=') else {
        bail!("override '{item}' is not of the form dotted.key=value");
    };
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("override key '{key}' has an empty segment");
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .with_context(|| format!("override key '{key}': '{p}' is not a table"))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Checks every constraint that does not need model assembly, naming the key.
    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if !["two-state-solvable", "comparison-one-period", "custom"].contains(&m.builtin.as_str()) {
            bail!("model.builtin: unknown model '{}'", m.builtin);
        }
        if let Some(rho) = m.rho {
            if !(rho > 0.0 && rho < 1.0) {
                bail!("model.rho: discount factor must satisfy 0 < rho < 1, got {rho}");
            }
        }
        let g = &self.grid;
        if !(g.h > 0.0 && g.h <= 1.0) || ((1.0 / g.h).round() - 1.0 / g.h).abs() > 1e-9 * (1.0 / g.h) {
            bail!("grid.h: spacing must be 1/m for a positive integer m, got {}", g.h);
        }
        if !(g.action_spacing > 0.0 && g.action_spacing <= 1.0) {
            bail!("grid.action_spacing: must lie in (0, 1], got {}", g.action_spacing);
        }
        if !(self.solve.tol > 0.0) {
            bail!("solve.tol: must be positive, got {}", self.solve.tol);
        }
        let n = &self.nagent;
        if n.n < 1 {
            bail!("nagent.n: need at least one agent");
        }
        if !(n.alpha > 0.0 && n.alpha <= 1.0) {
            bail!("nagent.alpha: damping must lie in (0, 1], got {}", n.alpha);
        }
        if n.mc_samples == 0 {
            bail!("nagent.mc_samples: need at least one sample");
        }
        let l = &self.study.ladder;
        if l.is_empty() || l[0] < 2 || l.windows(2).any(|w| w[1] <= w[0]) {
            bail!("study.ladder: must be strictly increasing with every N >= 2, got {l:?}");
        }
        for c in &self.study.checks {
            if !["value-gap", "eps-nash", "limit-policy"].contains(&c.as_str()) {
                bail!("study.checks: unknown check '{c}'");
            }
        }
        if !["center", "worst-case", "tabulated"].contains(&self.simulate.adversary.as_str()) {
            bail!("simulate.adversary: unknown rule '{}'", self.simulate.adversary);
        }
        if !["closed-form", "constant", "file"].contains(&self.solve.policy.as_str()) {
            bail!("solve.policy: unknown source '{}'", self.solve.policy);
        }
        Ok(())
    }
}
