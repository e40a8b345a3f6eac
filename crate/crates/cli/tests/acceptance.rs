//! One PASS/FAIL line per acceptance criterion. Run with `--nocapture` to see
//! the lines when everything passes.

#[path = "../../core/tests/common/oracles.rs"]
mod oracles;

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rmfg::converge::{eps_nash_study, limit_policy_study, nonincreasing, value_gap_study, Reference, StudySpec};
use rmfg::domain::{Domain, ValueTable};
use rmfg::mfg::{bellman, k_period_values, robust_value, robust_value_from, verify_with_value, GameSpec, RewardSpec};
use rmfg::models::{deviation_value_by_search, endogenous_fixed_point, robust_deviation_value, ComparisonSpec, TwoStateSpec};
use rmfg::nagent::{continuation_exact, continuation_mc, simulate, Adversary, AgentConfig, AgentSettings};
use rmfg::policy::{ActionGrid, Policy, RelaxedControl, Strategy};
use rmfg::simplex::{w1, Dist, SimplexGrid};
use rmfg::uncertainty::{interpolate_toward_center, BallSpec, InnerConfig, KernelFamily, SupportPoint};
use serde_json::Value;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("rmfg-acceptance-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    dir
}

fn rmfg(args: &[&str], out: &Path) -> (i32, Duration) {
    let t = Instant::now();
    let status = Command::new(env!("CARGO_BIN_EXE_rmfg"))
        .args(args)
        .arg("--output")
        .arg(out)
        .status()
        .expect("binary runs");
    (status.code().unwrap_or(-1), t.elapsed())
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).expect("artifact exists")).expect("valid json")
}

fn num(v: &Value, path: &[&str]) -> f64 {
    let mut cur = v;
    for k in path {
        cur = &cur[*k];
    }
    cur.as_f64().unwrap_or(f64::NAN)
}

fn c1_comparison() -> Outcome {
    let out = scratch("c1");
    let (code, took) = rmfg(&["example-comparison"], &out);
    let j = read_json(&out.join("comparison.json"));
    let checks = [
        ("mu1_2", num(&j, &["mu1_2"]), 0.5535, 5e-4),
        ("u_tilde", num(&j, &["u_tilde"]), 0.1621, 5e-4),
        ("V", num(&j, &["endogenous", "value"]), 0.0760, 5e-4),
        ("V_dev", num(&j, &["deviation", "value"]), 0.0807, 5e-4),
        ("delta*", num(&j, &["deviation", "delta_star"]), -0.1621, 1e-3),
        ("inner", num(&j, &["deviation", "inner_value"]), 0.0812, 5e-4),
        ("h(0)", j["endogenous"]["boundary_values"][0].as_f64().unwrap_or(f64::NAN), 0.09, 5e-4),
        ("h(end)", j["endogenous"]["boundary_values"][1].as_f64().unwrap_or(f64::NAN), 0.1954, 5e-4),
    ];
    let bad: Vec<String> = checks
        .iter()
        .filter(|c| !((c.1 - c.2).abs() <= c.3))
        .map(|c| format!("{}={}", c.0, c.1))
        .collect();
    let detail = checks.iter().map(|c| format!("{}={:.4}", c.0, c.1)).collect::<Vec<_>>().join(" ");
    outcome(
        code == 0 && bad.is_empty() && took < Duration::from_secs(5),
        format!("exit {code}, {detail}, {:.2}s {}", took.as_secs_f64(), bad.join(" ")),
    )
}

fn c2_two_state() -> Outcome {
    let out = scratch("c2");
    let (code, took) = rmfg(
        &[
            "solve-mfg",
            "--set",
            "model.builtin=two-state-solvable",
            "--set",
            "model.epsilon=0.2",
            "--set",
            "grid.h=0.005",
            "--set",
            "grid.action_spacing=0.01",
            "--set",
            "solve.policy=closed-form",
        ],
        &out,
    );
    let j = read_json(&out.join("summary.json"));
    let gap = num(&j, &["two_state", "closed_form_gap"]);
    let eps = num(&j, &["verification", "epsilon"]);
    let mixed = num(&j, &["two_state", "responses_not_point_masses"]);
    let far = num(&j, &["two_state", "response_max_distance_to_v2"]);
    let step = num(&j, &["two_state", "action_step"]);
    let wc = num(&j, &["two_state", "worst_case_max_error"]);
    let pass = code == 0
        && gap <= 1e-3
        && eps <= 2e-3
        && mixed == 0.0
        && far <= step + 1e-12
        && wc <= 1e-2
        && took < Duration::from_secs(60);
    outcome(
        pass,
        format!(
            "exit {code}, gap {gap:.2e}, eps {eps:.2e}, non-point responses {mixed}, response distance {far:.4} (step {step:.2}), worst-case move error {wc:.2e}, {:.1}s",
            took.as_secs_f64()
        ),
    )
}

fn random_table(dom: &Arc<Domain>, rng: &mut ChaCha8Rng, scale: f64) -> ValueTable {
    let mut t = ValueTable::constant(dom, 0.0);
    for (n, x) in dom.pairs() {
        t.set(n, x, scale * (rng.gen::<f64>() - 0.5));
    }
    t
}

fn c3_contraction() -> Outcome {
    let s = TwoStateSpec::new(0.2).unwrap();
    // a fixed candidate set keeps the discrete inner minimum an exact contraction
    let inner = InnerConfig {
        refine_depth: 0,
        ..InnerConfig::default()
    };
    let g = s.game(0.02, 0.01, inner).unwrap();
    let pi = s.closed_form_policy(g.domain(), g.actions());
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let scale = 4.0 * g.value_bound();
    let mut worst: f64 = f64::NEG_INFINITY;
    for _ in 0..50 {
        let (a, b) = (random_table(g.domain(), &mut rng, scale), random_table(g.domain(), &mut rng, scale));
        let (ta, tb) = (bellman(&a, &pi, &pi, &g).unwrap(), bellman(&b, &pi, &pi, &g).unwrap());
        worst = worst.max(ta.sup_diff(&tb) - g.rho() * a.sup_diff(&b));
    }
    let tol = 1e-8;
    let dev = Strategy::from(pi.clone());
    let (va, _) = robust_value_from(None, &dev, &pi, &g, tol).unwrap();
    let start = random_table(g.domain(), &mut rng, scale);
    let (vb, _) = robust_value_from(Some(start), &dev, &pi, &g, tol).unwrap();
    let agree = va.sup_diff(&vb);
    outcome(
        worst <= 1e-9 && agree <= 2.0 * tol,
        format!("max ||TV-TW|| - rho||V-W|| = {worst:.2e} over 50 pairs, two starts differ by {agree:.2e}"),
    )
}

fn c4_k_period() -> Outcome {
    let t = Instant::now();
    let s = TwoStateSpec::new(0.2).unwrap();
    let g = s.game(0.02, 0.01, InnerConfig::default()).unwrap();
    let acts = g.actions().clone();
    // off-equilibrium policy: overshoots the closed form by 0.1
    let pi = Policy::from_fn(g.domain(), &acts, |_, _, v| RelaxedControl::mean_preserving(&acts, (v[1] + 0.1).min(1.0)));
    let value = robust_value(&Strategy::from(pi.clone()), &pi, &g, 1e-9).unwrap();
    let eps = verify_with_value(&pi, value.clone(), &g).unwrap().epsilon;
    let heads = acts.coarse_indices(11);
    let w = k_period_values(&pi, &value, &g, &heads, 4).unwrap();
    let node = g.domain().locate(0, &Dist::new(vec![0.5, 0.5]).unwrap()).unwrap();
    let mut pass = true;
    let mut parts = Vec::new();
    for (k, wk) in w.iter().enumerate() {
        let gain = wk.get(node, 0) - value.get(node, 0);
        let bound = eps * (0..=k).map(|j| g.rho().powi(j as i32)).sum::<f64>() + 5e-3;
        pass &= gain <= bound;
        parts.push(format!("k={} gain {gain:.4} <= {bound:.4}", k + 1));
    }
    let took = t.elapsed();
    pass &= took < Duration::from_secs(120);
    outcome(pass, format!("one-shot eps {eps:.4}; {}; {:.1}s", parts.join(", "), took.as_secs_f64()))
}

fn ladder_spec() -> StudySpec {
    let s = TwoStateSpec::new(0.2).unwrap();
    let g = s.game(0.005, 0.01, InnerConfig::default()).unwrap();
    let acts = g.actions().clone();
    let reference = Reference::Function(Arc::new(move |_, v: &Dist| RelaxedControl::mean_preserving(&acts, v[1])));
    StudySpec::new(g, vec![2, 4, 8, 16], reference).unwrap()
}

fn c5_c6_ladders() -> (Outcome, Outcome) {
    let t = Instant::now();
    let spec = ladder_spec();
    let eps: Vec<f64> = eps_nash_study(&spec).unwrap().iter().map(|r| r.epsilon).collect();
    let gaps: Vec<f64> = value_gap_study(&spec).unwrap().iter().map(|r| r.gap).collect();
    let took = t.elapsed();
    let in_time = took < Duration::from_secs(600);
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3e}")).collect::<Vec<_>>().join(", ");
    let c5 = outcome(
        nonincreasing(&eps) && eps[3] < eps[0] / 2.0 && in_time,
        format!("eps_N over {{2,4,8,16}} = [{}], nonincreasing {}", fmt(&eps), nonincreasing(&eps)),
    );
    let c6 = outcome(
        nonincreasing(&gaps) && gaps[3] < gaps[0] / 2.0 && in_time,
        format!(
            "gap_N over {{2,4,8,16}} = [{}], nonincreasing {}, final < half initial {}; 5+6 took {:.1}s",
            fmt(&gaps),
            nonincreasing(&gaps),
            gaps[3] < gaps[0] / 2.0,
            took.as_secs_f64()
        ),
    );
    (c5, c6)
}

fn c7_equilibrium() -> Outcome {
    let t = Instant::now();
    let mut spec = ladder_spec();
    spec.ladder = vec![4, 16];
    let rows = limit_policy_study(&spec).unwrap();
    let (a, b) = (&rows[0], &rows[1]);
    outcome(
        a.converged && a.epsilon <= 1e-3 && a.iterations <= 200 && b.distance <= a.distance,
        format!(
            "N=4: converged {} in {} iterations, eps {:.2e}, distance {:.4}; N=16: distance {:.4}; {:.0}s",
            a.converged,
            a.iterations,
            a.epsilon,
            a.distance,
            b.distance,
            t.elapsed().as_secs_f64()
        ),
    )
}

fn c8_concentration() -> Outcome {
    let s = TwoStateSpec::new(0.2).unwrap();
    let g = s.game(0.05, 0.05, InnerConfig::default()).unwrap();
    let n = 1000;
    let dom = Domain::agents(n, 2).unwrap();
    let a = g.actions().index_of(0.3).unwrap();
    let pi = Policy::constant(&dom, g.actions(), RelaxedControl::point(a));
    let init = AgentConfig::from_counts(&[n as u32, 0]).unwrap();
    let settings = AgentSettings::default();
    let far = (0..200u64)
        .filter(|&seed| {
            let path = simulate(&pi, &Adversary::Center, &g, &init, 1, seed, &settings).unwrap();
            (path[1].empirical()[1] - 0.3).abs() > 0.05
        })
        .count();
    outcome(far <= 2, format!("{far} of 200 runs deviate by more than 0.05"))
}

fn c9_ball() -> BallSpec {
    BallSpec::new(
        3,
        Arc::new(|x, u, v: &Dist| {
            let mut w = [0.2 + 0.1 * v[1], 0.3, 0.5 - 0.1 * v[1]];
            w[x] += u;
            Dist::new(w.iter().map(|a| a / (1.0 + u)).collect()).unwrap()
        }),
        Arc::new(|x, _, v: &Dist| 0.05 + 0.05 * x as f64 + 0.1 * v[0]),
        1.0,
        0.05,
    )
    .unwrap()
}

fn c9_support() -> Vec<SupportPoint> {
    vec![SupportPoint::new(0, 0.2), SupportPoint::new(1, 0.6), SupportPoint::new(2, 0.9)]
}

fn random_law(rng: &mut ChaCha8Rng, d: usize) -> Dist {
    let w: Vec<f64> = (0..d).map(|_| rng.gen::<f64>() + 0.01).collect();
    let s: f64 = w.iter().sum();
    Dist::new(w.iter().map(|a| a / s).collect()).unwrap()
}

fn random_member(rng: &mut ChaCha8Rng, v: &Dist) -> KernelFamily {
    let b = c9_ball();
    let center = KernelFamily::center(&b, v, c9_support()).unwrap();
    let rows: Vec<Dist> = center.rows().iter().map(|c| c.mix(&random_law(rng, 3), rng.gen::<f64>())).collect();
    let mut lambda = 1.0;
    loop {
        let mixed: Vec<Dist> = center.rows().iter().zip(&rows).map(|(c, r)| c.mix(r, lambda)).collect();
        if let Ok(f) = KernelFamily::new(&b, v.clone(), c9_support(), mixed) {
            if f.member().is_member() {
                return f;
            }
        }
        lambda *= 0.5;
    }
}

fn c9_uncertainty() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let v = random_law(&mut rng, 3);
    let mut members = 0;
    for _ in 0..100 {
        let (a, b) = (random_member(&mut rng, &v), random_member(&mut rng, &v));
        if a.mix(&b, rng.gen::<f64>()).unwrap().member().is_member() {
            members += 1;
        }
    }
    let fam = random_member(&mut rng, &v);
    let target = random_law(&mut rng, 3);
    let mut dists = Vec::new();
    let mut all_members = true;
    for k in 0..=12 {
        let t = 10f64.powf(-(k as f64) / 4.0);
        let moved = interpolate_toward_center(&fam, &v.mix(&target, t)).unwrap();
        all_members &= moved.member().is_member();
        dists.push(moved.sup_distance(&fam));
    }
    let shrinks = nonincreasing(&dists) && dists[12] < 1e-2 * dists[0].max(1e-300);
    outcome(
        members == 100 && all_members && shrinks,
        format!(
            "{members}/100 combinations are members; d to input over 3 decades: {:.2e} -> {:.2e}, monotone {}",
            dists[0],
            dists[12],
            nonincreasing(&dists)
        ),
    )
}

fn c10_oracles() -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;

    // W1 against the transport linear program
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut w1_err: f64 = 0.0;
    for _ in 0..100 {
        let d = rng.gen_range(2..6);
        let (p, q) = (random_law(&mut rng, d), random_law(&mut rng, d));
        w1_err = w1_err.max((w1(&p, &q).unwrap() - oracles::w1_transport(p.weights(), q.weights())).abs());
    }
    pass &= w1_err <= 1e-12;
    notes.push(format!("w1 vs LP {w1_err:.1e}"));

    // exact continuation against Monte Carlo, every three-agent pair
    let g = TwoStateSpec::new(0.2).unwrap().game(0.05, 0.05, InnerConfig::default()).unwrap();
    let dom = Domain::agents(3, 2).unwrap();
    let table = random_table(&dom, &mut rng, 2.0);
    let mut base = Policy::constant(&dom, g.actions(), RelaxedControl::point(0));
    for (n, x) in dom.pairs() {
        let (a, b) = (rng.gen_range(0..g.actions().len()), rng.gen_range(0..g.actions().len()));
        base.set(n, x, RelaxedControl::new(vec![(a, 0.5), (b, 0.5)]).unwrap());
    }
    let mut worst_z: f64 = 0.0;
    for (node, x) in dom.pairs() {
        let v = dom.node(node).clone();
        let support: Vec<SupportPoint> = (0..2)
            .flat_map(|s| base.control(node, s).entries().iter().map(move |&(a, _)| (s, a)).collect::<Vec<_>>())
            .map(|(s, a)| SupportPoint::new(s, g.actions().point(a)))
            .collect();
        let fam = KernelFamily::center(g.ball(), &v, support).unwrap();
        for y in 0..2 {
            let exact = continuation_exact(y, x, &v, &fam, &base, &table, 2e5).unwrap();
            let (est, se) = continuation_mc(y, x, &v, &fam, &base, &table, 7, 10_000).unwrap();
            let z = if se > 0.0 { (est - exact).abs() / se } else if est == exact { 0.0 } else { f64::INFINITY };
            worst_z = worst_z.max(z);
        }
    }
    pass &= worst_z <= 4.0;
    notes.push(format!("N=3 exact vs MC max |z| {worst_z:.2}"));

    // generic inner search against the specialized one-period solver
    let spec = ComparisonSpec::reference();
    let (_, u_tilde) = endogenous_fixed_point(&spec, 1e-10).unwrap();
    let mut inner_err: f64 = 0.0;
    for u in [0.0, 0.1, u_tilde, 0.26, 0.4, 0.7, 1.0] {
        let exact = robust_deviation_value(&spec, u, u_tilde).unwrap().value;
        let search = deviation_value_by_search(&spec, u, u_tilde, &InnerConfig::default()).unwrap();
        inner_err = inner_err.max((exact - search).abs());
    }
    pass &= inner_err <= 1e-4;
    notes.push(format!("inner search vs exact {inner_err:.1e}"));

    // zero radius against a plain forward sum, random 2-state 3-action game
    let actions = [0.0, 0.5, 1.0];
    let centers: Vec<Vec<Dist>> = (0..2)
        .map(|_| {
            (0..3)
                .map(|_| {
                    let p = rng.gen::<f64>();
                    Dist::new(vec![1.0 - p, p]).unwrap()
                })
                .collect()
        })
        .collect();
    let coef: Vec<f64> = (0..7).map(|_| rng.gen::<f64>() - 0.5).collect();
    let c2 = coef.clone();
    let reward = RewardSpec::new(
        Arc::new(move |x, u, v: &Dist, y| c2[x] + c2[2 + y] * u + c2[4 + x] * v[1] + c2[6] * u * v[0]),
        4.0,
        4.0,
    )
    .unwrap();
    let ball = BallSpec::tabulated(&actions, centers.clone(), vec![0.0, 0.0], 1.0).unwrap();
    let rho = 0.8;
    let zg = GameSpec::new(
        ActionGrid::new(actions.to_vec()).unwrap(),
        rho,
        reward.clone(),
        ball,
        Domain::mean_field(SimplexGrid::build(2, 0.1).unwrap()),
        InnerConfig::default(),
    )
    .unwrap();
    let choice = [rng.gen_range(0..3), rng.gen_range(0..3)];
    let pi = Policy::from_fn(zg.domain(), zg.actions(), |x, _, _| RelaxedControl::point(choice[x]));
    let tol = 1e-10;
    let value = robust_value(&Strategy::from(pi.clone()), &pi, &zg, tol).unwrap();
    let mix: Vec<Vec<(f64, f64)>> = (0..2).map(|x| vec![(actions[choice[x]], 1.0)]).collect();
    let kernel = |s: usize, u: f64| {
        let k = actions.iter().position(|&a| a == u).unwrap();
        centers[s][k].weights().to_vec()
    };
    let mut dp_err: f64 = 0.0;
    for (n, x) in zg.domain().pairs() {
        let v0 = zg.domain().node(n).weights().to_vec();
        let want = oracles::forward_value(
            x,
            &v0,
            &mix,
            kernel,
            |s, u, v, y| reward.eval(s, u, &Dist::new(v.to_vec()).unwrap(), y),
            rho,
            200,
        );
        dp_err = dp_err.max((value.get(n, x) - want).abs());
    }
    // forward sum truncation is below 4 * 0.8^200
    pass &= dp_err <= 10.0 * tol;
    notes.push(format!("zero radius vs forward DP {dp_err:.1e}"));
    outcome(pass, notes.join(", "))
}

#[test]
fn acceptance() {
    let mut results: Vec<(usize, Outcome)> = Vec::new();
    let mut report = |k: usize, o: Outcome| {
        println!("criterion {k:>2}: {} | {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((k, o));
    };
    report(1, c1_comparison());
    report(2, c2_two_state());
    report(3, c3_contraction());
    report(4, c4_k_period());
    let (c5, c6) = c5_c6_ladders();
    report(5, c5);
    report(6, c6);
    report(7, c7_equilibrium());
    report(8, c8_concentration());
    report(9, c9_uncertainty());
    report(10, c10_oracles());
    let failed: Vec<usize> = results.iter().filter(|(_, o)| !o.pass).map(|(k, _)| *k).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
