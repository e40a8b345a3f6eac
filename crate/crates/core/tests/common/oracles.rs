//! Independent reference computations used by the tests.
#![allow(dead_code)]

/// Optimal transport cost between `p` and `q` under `cost`, by successive
/// shortest paths on the bipartite flow network (Bellman-Ford, real flows).
pub fn transport(p: &[f64], q: &[f64], cost: impl Fn(usize, usize) -> f64) -> f64 {
    let n = p.len();
    let mut supply = p.to_vec();
    let mut demand = q.to_vec();
    // flow[i][j] shipped from source i to sink j; residual arcs allow rerouting
    let mut flow = vec![vec![0.0f64; n]; n];
    let eps = 1e-15;
    loop {
        let left: f64 = supply.iter().sum();
        if left <= 1e-13 {
            break;
        }
        // nodes: 0..n sources, n..2n sinks
        let mut dist = vec![f64::INFINITY; 2 * n];
        let mut prev: Vec<Option<usize>> = vec![None; 2 * n];
        for i in 0..n {
            if supply[i] > eps {
                dist[i] = 0.0;
            }
        }
        for _ in 0..2 * n {
            let mut changed = false;
            for i in 0..n {
                for j in 0..n {
                    // forward arc i -> sink j
                    if dist[i] + cost(i, j) < dist[n + j] - 1e-15 {
                        dist[n + j] = dist[i] + cost(i, j);
                        prev[n + j] = Some(i);
                        changed = true;
                    }
                    // residual arc sink j -> i
                    if flow[i][j] > eps && dist[n + j] - cost(i, j) < dist[i] - 1e-15 {
                        dist[i] = dist[n + j] - cost(i, j);
                        prev[i] = Some(n + j);
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        let sink = (0..n)
            .filter(|&j| demand[j] > eps && dist[n + j].is_finite())
            .min_by(|&a, &b| dist[n + a].total_cmp(&dist[n + b]))
            .expect("augmenting path exists");
        // walk back to collect the path and bottleneck
        let mut path = vec![n + sink];
        let mut cur = n + sink;
        while let Some(pr) = prev[cur] {
            path.push(pr);
            cur = pr;
        }
        path.reverse();
        let src = path[0];
        let mut amount = supply[src].min(demand[sink]);
        for w in path.windows(2) {
            if w[0] >= n {
                amount = amount.min(flow[w[1]][w[0] - n]);
            }
        }
        for w in path.windows(2) {
            if w[0] < n {
                flow[w[0]][w[1] - n] += amount;
            } else {
                flow[w[1]][w[0] - n] -= amount;
            }
        }
        supply[src] -= amount;
        demand[sink] -= amount;
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            total += flow[i][j] * cost(i, j);
        }
    }
    total
}

/// W1 under the discrete metric by the transport network.
pub fn w1_transport(p: &[f64], q: &[f64]) -> f64 {
    transport(p, q, |i, j| if i == j { 0.0 } else { 1.0 })
}

/// Discounted value of an agent starting at `x0` in a population starting at
/// `v0`, when every agent at state `s` plays the action mixture `mix[s]`
/// (pairs of action value and weight) and transitions with the fixed
/// kernel `kernel(s, u)`. Truncated forward sum over `horizon` periods.
pub fn forward_value(
    x0: usize,
    v0: &[f64],
    mix: &[Vec<(f64, f64)>],
    kernel: impl Fn(usize, f64) -> Vec<f64>,
    reward: impl Fn(usize, f64, &[f64], usize) -> f64,
    rho: f64,
    horizon: usize,
) -> f64 {
    let d = v0.len();
    let mut agent = vec![0.0; d];
    agent[x0] = 1.0;
    let mut pop = v0.to_vec();
    let mut total = 0.0;
    let mut disc = 1.0;
    for _ in 0..horizon {
        let mut next_agent = vec![0.0; d];
        let mut next_pop = vec![0.0; d];
        for s in 0..d {
            for &(u, w) in &mix[s] {
                let row = kernel(s, u);
                for y in 0..d {
                    total += disc * agent[s] * w * row[y] * reward(s, u, &pop, y);
                    next_agent[y] += agent[s] * w * row[y];
                    next_pop[y] += pop[s] * w * row[y];
                }
            }
        }
        agent = next_agent;
        pop = next_pop;
        disc *= rho;
    }
    total
}

/// `E f(counts after one step)` for agents starting in `states`, each moving
/// with the law `law[state]`, by enumerating every individual outcome.
pub fn enumerate_agents(states: &[usize], law: &[Vec<f64>], f: impl Fn(&[u32]) -> f64) -> f64 {
    let d = law[0].len();
    let mut total = 0.0;
    let mut idx = vec![0usize; states.len()];
    loop {
        let mut p = 1.0;
        let mut counts = vec![0u32; d];
        for (a, &s) in states.iter().enumerate() {
            p *= law[s][idx[a]];
            counts[idx[a]] += 1;
        }
        if p > 0.0 {
            total += p * f(&counts);
        }
        let mut k = 0;
        loop {
            if k == idx.len() {
                return total;
            }
            idx[k] += 1;
            if idx[k] < d {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}
