use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rmfg::converge::{
    eps_nash_study, limit_policy_study, nonincreasing, require_converged, value_gap_study, write_eps_csv,
    write_gap_csv, write_limit_csv,
};
use rmfg::domain::ValueTable;
use rmfg::io::{fmt_num, write_policy_summary, write_rows, write_trajectory, write_value_table};
use rmfg::mfg::{robust_value_from, verify_with_value, worst_case_family, EquilibriumReport};
use rmfg::models::comparison_report;
use rmfg::nagent::{
    nagent_equilibrium, nagent_value, nagent_value_from, nagent_verify_with_value, simulate, Adversary, AgentConfig,
};
use rmfg::policy::{Policy, Strategy};
use rmfg::simplex::Dist;
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::model;

/// A self-check against golden values failed.
#[derive(Debug)]
pub struct GoldenFailure(pub String);

impl std::fmt::Display for GoldenFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "golden check failed: {}", self.0)
    }
}

impl std::error::Error for GoldenFailure {}

pub struct Run {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub subcommand: String,
}

impl Run {
    fn create(&self, name: &str) -> Result<BufWriter<File>> {
        let p = self.out.join(name);
        Ok(BufWriter::new(File::create(&p).with_context(|| format!("creating {}", p.display()))?))
    }

    fn write_json(&self, name: &str, v: &Value) -> Result<()> {
        let mut w = self.create(name)?;
        serde_json::to_writer_pretty(&mut w, v)?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }

    /// Config echo and run manifest; re-running with `--config manifest.json`
    /// reproduces the run.
    pub fn write_manifest(&self) -> Result<()> {
        std::fs::create_dir_all(&self.out).with_context(|| format!("creating output directory {}", self.out.display()))?;
        let echo = toml::to_string(&self.cfg).context("encoding config echo")?;
        std::fs::write(self.out.join("config.toml"), echo)?;
        self.write_json(
            "manifest.json",
            &json!({
                "tool": "rmfg",
                "version": env!("CARGO_PKG_VERSION"),
                "subcommand": self.subcommand,
                "seeds": {
                    "nagent": self.cfg.nagent.seed,
                    "simulate": self.cfg.simulate.seed,
                },
                "config": serde_json::to_value(&self.cfg)?,
            }),
        )
    }
}

fn write_with(run: &Run, name: &str, f: impl FnOnce(&mut BufWriter<File>) -> rmfg::Result<()>) -> Result<()> {
    let mut w = run.create(name)?;
    f(&mut w).with_context(|| format!("writing {name}"))?;
    w.flush()?;
    Ok(())
}

fn write_responses(run: &Run, rep: &EquilibriumReport) -> Result<()> {
    let dom = rep.responses.domain();
    let acts = rep.responses.actions();
    let d = dom.dim();
    let mut header: Vec<String> = vec!["state".into(), "node".into()];
    header.extend((1..=d).map(|i| format!("v{i}")));
    header.extend(["response_action", "support", "response_value", "base_value"].map(String::from));
    let rows: Vec<Vec<String>> = dom
        .pairs()
        .into_iter()
        .map(|(node, x)| {
            let c = rep.responses.control(node, x);
            let mut r = vec![(x + 1).to_string(), node.to_string()];
            r.extend(dom.node(node).weights().iter().map(|&p| fmt_num(p)));
            r.push(fmt_num(c.mean(acts)));
            r.push(c.entries().len().to_string());
            r.push(fmt_num(rep.response_values.get(node, x)));
            r.push(fmt_num(rep.value.get(node, x)));
            r
        })
        .collect();
    let h: Vec<&str> = header.iter().map(String::as_str).collect();
    write_with(run, "best_responses.csv", |w| write_rows(&h, &rows, w))
}

fn report_json(rep: &EquilibriumReport) -> Value {
    json!({
        "epsilon": rep.epsilon,
        "worst_state": rep.worst_state + 1,
        "worst_node": rep.worst_node,
        "worst_counts": rep.value.domain().counts(rep.worst_node),
        "full_bound": rep.full_bound,
    })
}

/// Best-response checks that only make sense for the solvable game.
fn two_state_checks(
    run: &Run,
    a: &model::Assembled,
    pi: &Policy,
    rep: &EquilibriumReport,
    worst_case: bool,
) -> Result<Option<Value>> {
    let Some(s) = &a.two_state else { return Ok(None) };
    let game = &a.game;
    let dom = game.domain();
    let acts = game.actions();
    let gap = rep.value.sup_diff(&s.closed_form_table(dom));
    let mut mixed = 0usize;
    let mut br_far = 0.0f64;
    for (node, x) in dom.pairs() {
        let v2 = dom.node(node)[1];
        match rep.responses.control(node, x).as_point() {
            Some(i) => br_far = br_far.max((acts.point(i) - v2).abs()),
            None => mixed += 1,
        }
    }
    let mut out = json!({
        "closed_form_gap": gap,
        "responses_not_point_masses": mixed,
        "response_max_distance_to_v2": br_far,
        "action_step": acts.spacing(),
    });
    if worst_case {
        let mut err = 0.0f64;
        let mut rows = Vec::new();
        for (node, x) in dom.pairs().into_iter().filter(|&(_, x)| x == 0) {
            let fam = worst_case_family(pi, &rep.value, x, node, game)?;
            let c = pi.control(node, x);
            let mut p = 0.0;
            for &(i, w) in c.entries() {
                let u = acts.point(i);
                let row = fam.row(x, u).context("worst-case family misses a charged action")?;
                p += w * row[1];
            }
            let target = s.worst_case_move(c.mean(acts));
            err = err.max((p - target).abs());
            rows.push(vec![
                node.to_string(),
                fmt_num(dom.node(node)[1]),
                fmt_num(c.mean(acts)),
                fmt_num(p),
                fmt_num(target),
            ]);
        }
        write_with(run, "worst_case_move.csv", |w| {
            write_rows(&["node", "v2", "action", "move_probability", "closed_form"], &rows, w)
        })?;
        out["worst_case_max_error"] = json!(err);
    }
    Ok(Some(out))
}

/// Writes every kernel row the adversary picks at each admissible pair.
fn write_worst_case(run: &Run, a: &model::Assembled, pi: &Policy, value: &ValueTable) -> Result<()> {
    let game = &a.game;
    let dom = game.domain();
    let d = dom.dim();
    let mut header: Vec<String> = vec!["state".into(), "node".into()];
    header.extend((1..=d).map(|i| format!("v{i}")));
    header.extend(["row_state".into(), "row_action".into()]);
    header.extend((1..=d).map(|i| format!("p{i}")));
    let mut rows = Vec::new();
    for (node, x) in dom.pairs() {
        let fam = worst_case_family(pi, value, x, node, game)?;
        for (pt, row) in fam.support().iter().zip(fam.rows()) {
            let mut r = vec![(x + 1).to_string(), node.to_string()];
            r.extend(dom.node(node).weights().iter().map(|&p| fmt_num(p)));
            r.push((pt.state + 1).to_string());
            r.push(fmt_num(pt.action));
            r.extend(row.weights().iter().map(|&p| fmt_num(p)));
            rows.push(r);
        }
    }
    let h: Vec<&str> = header.iter().map(String::as_str).collect();
    write_with(run, "worst_case.csv", |w| write_rows(&h, &rows, w))
}

pub fn solve_mfg(run: &Run, verify_only: bool) -> Result<()> {
    let a = model::game(&run.cfg)?;
    let game = &a.game;
    let pi = model::policy(&run.cfg, &a, game.domain())?;
    let tol = run.cfg.solve.tol;
    let (value, iterations) = robust_value_from(None, &Strategy::from(pi.clone()), &pi, game, tol)?;
    let rep = verify_with_value(&pi, value, game)?;
    write_with(run, "value.csv", |w| write_value_table(&rep.value, w))?;
    write_responses(run, &rep)?;
    if !verify_only {
        write_with(run, "policy.txt", |w| pi.write_table(w))?;
        write_with(run, "policy_summary.csv", |w| write_policy_summary(&pi, w))?;
        write_worst_case(run, &a, &pi, &rep.value)?;
    }
    let checks = two_state_checks(run, &a, &pi, &rep, !verify_only)?;
    run.write_json(
        "summary.json",
        &json!({
            "iterations": iterations,
            "tol": tol,
            "value_sup_norm": rep.value.sup_norm(),
            "verification": report_json(&rep),
            "two_state": checks,
        }),
    )
}

pub fn solve_nagent(run: &Run) -> Result<()> {
    let cfg = &run.cfg;
    let a = model::game(cfg)?;
    let n = cfg.nagent.n;
    let dom = model::agent_domain(n, &a)?;
    let pn = model::policy(cfg, &a, &dom)?;
    let settings = model::settings(cfg);
    let (value, iterations) =
        nagent_value_from(None, &Strategy::from(pn.clone()), &pn, n, &a.game, cfg.solve.tol, &settings)?;
    let rep = nagent_verify_with_value(&pn, value, &a.game, &settings)?;
    write_with(run, "value.csv", |w| write_value_table(&rep.value, w))?;
    write_responses(run, &rep)?;
    run.write_json(
        "summary.json",
        &json!({
            "n": n,
            "iterations": iterations,
            "tol": cfg.solve.tol,
            "verification": report_json(&rep),
        }),
    )
}

pub fn equilibrium_nagent(run: &Run) -> Result<()> {
    let cfg = &run.cfg;
    let a = model::game(cfg)?;
    let n = cfg.nagent.n;
    let res = nagent_equilibrium(n, &a.game, &model::damped(cfg), None, &model::settings(cfg))?;
    write_with(run, "policy.txt", |w| res.policy.write_table(w))?;
    write_with(run, "policy_summary.csv", |w| write_policy_summary(&res.policy, w))?;
    write_with(run, "value.csv", |w| write_value_table(&res.report.value, w))?;
    let hist: Vec<Vec<String>> = res
        .history
        .iter()
        .enumerate()
        .map(|(i, e)| vec![(i + 1).to_string(), fmt_num(*e)])
        .collect();
    write_with(run, "history.csv", |w| write_rows(&["iteration", "epsilon"], &hist, w))?;
    let distance = match &a.two_state {
        Some(s) => Some(res.policy.sup_w1(&s.closed_form_policy(res.policy.domain(), a.game.actions()))?),
        None => None,
    };
    run.write_json(
        "summary.json",
        &json!({
            "n": n,
            "converged": res.converged,
            "iterations": res.iterations,
            "epsilon": res.epsilon,
            "modulus": res.policy.modulus(),
            "distance_to_closed_form": distance,
            "verification": report_json(&res.report),
        }),
    )?;
    if !res.converged {
        return Err(rmfg::Error::NonConvergence {
            what: format!("damped best response at N = {n}"),
            iterations: res.iterations,
            best: res.epsilon,
        }
        .into());
    }
    Ok(())
}

pub fn simulate_cmd(run: &Run) -> Result<()> {
    let cfg = &run.cfg;
    let sim = &cfg.simulate;
    let a = model::game(cfg)?;
    let game = &a.game;
    let d = game.d();
    let n = sim.n;
    if n < 1 {
        bail!("simulate.n: need at least one agent");
    }
    let initial = if sim.initial.is_empty() {
        let mut c = vec![0u32; d];
        c[0] = n as u32;
        c
    } else {
        if sim.initial.len() != d || sim.initial.iter().map(|&c| c as usize).sum::<usize>() != n {
            bail!("simulate.initial: need {d} counts summing to simulate.n = {n}");
        }
        sim.initial.clone()
    };
    let initial = AgentConfig::from_counts(&initial).context("simulate.initial")?;
    let dom = model::agent_domain(n, &a)?;
    let pn = model::policy(cfg, &a, &dom)?;
    let settings = model::settings(cfg);
    let adversary = match sim.adversary.as_str() {
        "center" => Adversary::Center,
        "worst-case" => Adversary::WorstCase(nagent_value(
            &Strategy::from(pn.clone()),
            &pn,
            n,
            game,
            cfg.solve.tol,
            &settings,
        )?),
        "tabulated" => {
            let mut rows = Vec::new();
            for (x, r) in sim.rows.iter().enumerate() {
                let r = r
                    .iter()
                    .enumerate()
                    .map(|(k, w)| Dist::new(w.clone()).with_context(|| format!("simulate.rows[{x}][{k}]")))
                    .collect::<Result<Vec<_>>>()?;
                rows.push(r);
            }
            Adversary::Tabulated(rows)
        }
        other => bail!("simulate.adversary: unknown rule '{other}'"),
    };
    let path = simulate(&pn, &adversary, game, &initial, sim.steps, sim.seed, &settings).context("simulate")?;
    write_with(run, "trajectory.csv", |w| write_trajectory(&path, w))?;
    let last = path.last().expect("nonempty path");
    run.write_json(
        "summary.json",
        &json!({
            "n": n,
            "steps": sim.steps,
            "seed": sim.seed,
            "adversary": sim.adversary,
            "final_counts": last.counts(),
        }),
    )
}

pub fn example_two_state(run: &Run) -> Result<()> {
    let a = model::game(&run.cfg)?;
    let s = a.two_state.context("model.builtin: example-two-state needs two-state-solvable")?;
    let game = &a.game;
    let dom = game.domain();
    let pi = s.closed_form_policy(dom, game.actions());
    let tol = run.cfg.solve.tol;
    let (value, iterations) = robust_value_from(None, &Strategy::from(pi.clone()), &pi, game, tol)?;
    let rep = verify_with_value(&pi, value, game)?;
    let mut gap = 0.0f64;
    let rows: Vec<Vec<String>> = dom
        .pairs()
        .into_iter()
        .map(|(node, x)| {
            let v = dom.node(node);
            let (num, cf) = (rep.value.get(node, x), s.closed_form_value(v[1]));
            gap = gap.max((num - cf).abs());
            vec![
                (x + 1).to_string(),
                node.to_string(),
                fmt_num(v[0]),
                fmt_num(v[1]),
                fmt_num(num),
                fmt_num(cf),
                fmt_num((num - cf).abs()),
            ]
        })
        .collect();
    write_with(run, "value.csv", |w| {
        write_rows(&["state", "node", "v1", "v2", "value", "closed_form", "abs_error"], &rows, w)
    })?;
    let (gap_ok, eps_ok) = (gap <= 1e-3, rep.epsilon <= 2e-3);
    run.write_json(
        "summary.json",
        &json!({
            "epsilon_radius": s.epsilon(),
            "rho": s.rho(),
            "iterations": iterations,
            "closed_form_gap": gap,
            "verification": report_json(&rep),
            "checks": {
                "closed_form_gap_le_1e-3": gap_ok,
                "epsilon_le_2e-3": eps_ok,
            },
        }),
    )?;
    if !(gap_ok && eps_ok) {
        return Err(GoldenFailure(format!("closed-form gap {gap}, one-shot gain {}", rep.epsilon)).into());
    }
    Ok(())
}

struct Golden {
    name: &'static str,
    value: f64,
    expected: f64,
    tol: f64,
}

pub fn example_comparison(run: &Run) -> Result<()> {
    let cfg = &run.cfg;
    let spec = model::comparison(cfg)?;
    let u_dev = cfg.model.deviation;
    if !(0.0..=1.0).contains(&u_dev) {
        bail!("model.deviation: {u_dev} is outside [0, 1]");
    }
    let rep = comparison_report(&spec, u_dev, cfg.solve.bisection_tol, &model::inner(cfg))
        .context("model: comparison-one-period game")?;
    let reference = spec == rmfg::models::ComparisonSpec::reference() && u_dev == 0.26;
    let goldens = if reference {
        vec![
            Golden { name: "mu1_2", value: rep.z, expected: 0.5535, tol: 5e-4 },
            Golden { name: "u_tilde", value: rep.u_tilde, expected: 0.1621, tol: 5e-4 },
            Golden { name: "endogenous_value", value: rep.endogenous.value, expected: 0.0760, tol: 5e-4 },
            Golden { name: "deviation_value", value: rep.deviation.value, expected: 0.0807, tol: 5e-4 },
            Golden { name: "delta_star", value: rep.deviation.delta_star, expected: -0.1621, tol: 1e-3 },
            Golden { name: "inner_value", value: rep.deviation.inner_value, expected: 0.0812, tol: 5e-4 },
            Golden { name: "h_lower", value: rep.endogenous.boundary_values.0, expected: 0.09, tol: 5e-4 },
            Golden { name: "h_upper", value: rep.endogenous.boundary_values.1, expected: 0.1954, tol: 5e-4 },
            Golden { name: "search_vs_exact", value: rep.deviation_by_search - rep.deviation.value, expected: 0.0, tol: 1e-4 },
        ]
    } else {
        Vec::new()
    };
    let rows: Vec<Vec<String>> = goldens
        .iter()
        .map(|g| {
            vec![
                g.name.to_string(),
                fmt_num(g.value),
                fmt_num(g.expected),
                fmt_num(g.tol),
                ((g.value - g.expected).abs() <= g.tol).to_string(),
            ]
        })
        .collect();
    write_with(run, "comparison.csv", |w| write_rows(&["quantity", "value", "expected", "tolerance", "pass"], &rows, w))?;
    let failed: Vec<&str> = goldens
        .iter()
        .filter(|g| (g.value - g.expected).abs() > g.tol)
        .map(|g| g.name)
        .collect();
    let dv = |d: &rmfg::models::DeviationValue| {
        json!({
            "value": d.value,
            "inner_value": d.inner_value,
            "delta_star": d.delta_star,
            "p_dev": d.p_dev,
            "p_pop": d.p_pop,
            "delta_range": [d.delta_range.0, d.delta_range.1],
            "boundary_values": [d.boundary_values.0, d.boundary_values.1],
        })
    };
    run.write_json(
        "comparison.json",
        &json!({
            "epsilon": spec.epsilon,
            "rho": spec.rho,
            "v2": spec.v2,
            "mu1_2": rep.z,
            "u_tilde": rep.u_tilde,
            "endogenous": dv(&rep.endogenous),
            "u_dev": rep.u_dev,
            "deviation": dv(&rep.deviation),
            "gain": rep.gain,
            "deviation_by_search": rep.deviation_by_search,
            "best_action": rep.best_action,
            "best_value": rep.best_value,
            "golden_checked": reference,
            "golden_failures": failed,
        }),
    )?;
    if !failed.is_empty() {
        return Err(GoldenFailure(failed.join(", ")).into());
    }
    Ok(())
}

pub fn study_convergence(run: &Run) -> Result<()> {
    let cfg = &run.cfg;
    let a = model::game(cfg)?;
    let spec = model::study(cfg, &a)?;
    let checks = &cfg.study.checks;
    let mut summary = json!({ "ladder": cfg.study.ladder });
    let halves = |v: &[f64]| v.last().copied().unwrap_or(0.0) < 0.5 * v.first().copied().unwrap_or(0.0);
    if checks.iter().any(|c| c == "value-gap") {
        let rows = value_gap_study(&spec)?;
        write_with(run, "gap.csv", |w| write_gap_csv(&rows, w))?;
        let g: Vec<f64> = rows.iter().map(|r| r.gap).collect();
        summary["value_gap"] = json!({ "gaps": g, "nonincreasing": nonincreasing(&g), "final_below_half_initial": halves(&g) });
    }
    if checks.iter().any(|c| c == "eps-nash") {
        let rows = eps_nash_study(&spec)?;
        write_with(run, "eps.csv", |w| write_eps_csv(&rows, w))?;
        let e: Vec<f64> = rows.iter().map(|r| r.epsilon).collect();
        summary["eps_nash"] = json!({ "epsilons": e, "nonincreasing": nonincreasing(&e), "final_below_half_initial": halves(&e) });
    }
    let mut limit = None;
    if checks.iter().any(|c| c == "limit-policy") {
        let rows = limit_policy_study(&spec)?;
        write_with(run, "limit.csv", |w| write_limit_csv(&rows, w))?;
        let dist: Vec<f64> = rows.iter().map(|r| r.distance).collect();
        summary["limit_policy"] = json!({
            "distances": dist,
            "moduli": rows.iter().map(|r| r.modulus).collect::<Vec<_>>(),
            "converged": rows.iter().map(|r| r.converged).collect::<Vec<_>>(),
            "nonincreasing": nonincreasing(&dist),
        });
        limit = Some(rows);
    }
    run.write_json("summary.json", &summary)?;
    if let Some(rows) = limit {
        require_converged(&rows)?;
    }
    Ok(())
}

pub fn output_dir(flag: Option<&Path>, cfg: &RunConfig) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(p) = &cfg.output.dir {
        return p.clone();
    }
    match std::env::var_os("RMFG_OUTPUT_DIR") {
        Some(p) if !p.is_empty() => PathBuf::from(p),
        _ => PathBuf::from("rmfg-out"),
    }
}
