mod common;

use std::sync::Arc;

use approx::assert_abs_diff_eq;
use common::oracles::forward_value;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rmfg::domain::{Domain, ValueTable};
use rmfg::mfg::{bellman, robust_value, robust_value_from, GameSpec, RewardSpec};
use rmfg::models::TwoStateSpec;
use rmfg::policy::{ActionGrid, Policy, RelaxedControl, Strategy};
use rmfg::simplex::{Dist, SimplexGrid};
use rmfg::uncertainty::{BallSpec, InnerConfig};

fn example() -> (GameSpec, Policy) {
    let s = TwoStateSpec::new(0.2).unwrap();
    let inner = InnerConfig { refine_depth: 0, ..InnerConfig::default() };
    let g = s.game(0.05, 0.05, inner).unwrap();
    let pi = s.closed_form_policy(g.domain(), g.actions());
    (g, pi)
}

fn random_table(dom: &Arc<Domain>, rng: &mut ChaCha8Rng, scale: f64) -> ValueTable {
    let mut t = ValueTable::constant(dom, 0.0);
    for (n, x) in dom.pairs() {
        t.set(n, x, scale * (rng.gen::<f64>() - 0.5));
    }
    t
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn operator_contracts(seed in 0u64..10_000) {
        let (g, pi) = example();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = (random_table(g.domain(), &mut rng, 2.0), random_table(g.domain(), &mut rng, 2.0));
        let (ta, tb) = (bellman(&a, &pi, &pi, &g).unwrap(), bellman(&b, &pi, &pi, &g).unwrap());
        prop_assert!(ta.sup_diff(&tb) <= g.rho() * a.sup_diff(&b) + 1e-9);
    }

    #[test]
    fn operator_is_monotone(seed in 0u64..10_000) {
        let (g, pi) = example();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_table(g.domain(), &mut rng, 2.0);
        let mut b = a.clone();
        for (n, x) in g.domain().pairs() {
            b.set(n, x, a.get(n, x) + rng.gen::<f64>());
        }
        let (ta, tb) = (bellman(&a, &pi, &pi, &g).unwrap(), bellman(&b, &pi, &pi, &g).unwrap());
        for (n, x) in g.domain().pairs() {
            prop_assert!(ta.get(n, x) <= tb.get(n, x) + 1e-12);
        }
    }

    #[test]
    fn operator_keeps_the_value_bound(seed in 0u64..10_000) {
        let (g, pi) = example();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = g.value_bound();
        let a = random_table(g.domain(), &mut rng, 2.0 * bound);
        prop_assert!(bellman(&a, &pi, &pi, &g).unwrap().sup_norm() <= bound + 1e-12);
    }

    #[test]
    fn operator_is_bounded_by_reward_plus_discounted_norm(seed in 0u64..10_000, scale in 0.1f64..50.0) {
        let (g, pi) = example();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_table(g.domain(), &mut rng, scale);
        let out = bellman(&a, &pi, &pi, &g).unwrap();
        prop_assert!(out.sup_norm() <= g.reward().bound() + g.rho() * a.sup_norm() + 1e-12);
    }
}

#[test]
fn two_starts_agree() {
    let (g, pi) = example();
    let tol = 1e-8;
    let dev = Strategy::from(pi.clone());
    let (a, _) = robust_value_from(None, &dev, &pi, &g, tol).unwrap();
    let start = ValueTable::constant(g.domain(), g.value_bound());
    let (b, _) = robust_value_from(Some(start), &dev, &pi, &g, tol).unwrap();
    assert!(a.sup_diff(&b) <= 2.0 * tol);
}

/// Zero radius: the robust value is the plain discounted value along the
/// deterministic population flow.
#[test]
fn zero_radius_matches_forward_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
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
    let coef: Vec<f64> = (0..8).map(|_| rng.gen::<f64>() - 0.5).collect();
    let c2 = coef.clone();
    let reward = RewardSpec::new(
        Arc::new(move |x, u, v: &Dist, y| c2[x] + c2[2 + y] * u + c2[4 + x] * v[1] + c2[6] * u * v[0]),
        4.0,
        4.0,
    )
    .unwrap();
    let ball = BallSpec::tabulated(&actions, centers.clone(), vec![0.0, 0.0], 1.0).unwrap();
    let rho = 0.8;
    let g = GameSpec::new(
        ActionGrid::new(actions.to_vec()).unwrap(),
        rho,
        reward.clone(),
        ball,
        Domain::mean_field(SimplexGrid::build(2, 0.1).unwrap()),
        InnerConfig::default(),
    )
    .unwrap();
    let choice = [rng.gen_range(0..3), rng.gen_range(0..3)];
    let pi = Policy::from_fn(g.domain(), g.actions(), |x, _, _| RelaxedControl::point(choice[x]));
    let tol = 1e-10;
    let value = robust_value(&Strategy::from(pi.clone()), &pi, &g, tol).unwrap();
    let mix: Vec<Vec<(f64, f64)>> = (0..2).map(|x| vec![(actions[choice[x]], 1.0)]).collect();
    let kernel = |s: usize, u: f64| {
        let k = actions.iter().position(|&a| a == u).unwrap();
        centers[s][k].weights().to_vec()
    };
    for (n, x) in g.domain().pairs() {
        let v0 = g.domain().node(n).weights().to_vec();
        let want = forward_value(x, &v0, &mix, kernel, |s, u, v, y| reward.eval(s, u, &Dist::new(v.to_vec()).unwrap(), y), rho, 200);
        assert_abs_diff_eq!(value.get(n, x), want, epsilon = 10.0 * tol);
    }
}

/// Values at two grid resolutions agree at the shared nodes up to the
/// interpolation error.
#[test]
fn value_is_stable_under_refinement() {
    let s = TwoStateSpec::new(0.2).unwrap();
    let solve = |h: f64| {
        let g = s.game(h, 0.01, InnerConfig::default()).unwrap();
        let pi = s.closed_form_policy(g.domain(), g.actions());
        robust_value(&Strategy::from(pi.clone()), &pi, &g, 1e-9).unwrap()
    };
    let (coarse, fine) = (solve(0.1), solve(0.05));
    for (n, x) in coarse.domain().pairs() {
        let v = coarse.domain().node(n).weights();
        assert!((coarse.get(n, x) - fine.interp(x, v)).abs() <= 5e-3);
    }
}

/// Doing nothing while the population is split evenly leaves a one-shot
/// gain of at least `v2^2 / 2` minus discretization.
#[test]
fn idle_policy_is_not_an_equilibrium() {
    let s = TwoStateSpec::new(0.2).unwrap();
    let g = s.game(0.1, 0.05, InnerConfig::default()).unwrap();
    let idle = Policy::constant(g.domain(), g.actions(), RelaxedControl::point(0));
    let value = robust_value(&Strategy::from(idle.clone()), &idle, &g, 1e-9).unwrap();
    let v = Dist::new(vec![0.5, 0.5]).unwrap();
    let br = rmfg::mfg::best_response(&idle, 0, &v, &value, &g).unwrap();
    let node = g.domain().locate(0, &v).unwrap();
    assert!(br.value - value.get(node, 0) >= 0.1);
    let rep = rmfg::mfg::verify_with_value(&idle, value, &g).unwrap();
    assert!(rep.epsilon >= 0.1);
}
