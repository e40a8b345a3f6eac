//! The robust one-step operator shared by the mean-field and N-agent games.
//!
//! At a pair (x, v) the adversary picks kernel rows for the population's
//! charged actions at every occupied state and for the deviating agent's own
//! actions at x. The population rows determine the continuation
//! `W[y] = E V(y, next law)`; the deviating agent then collects
//! `sum_a sigma(a) sum_y p(x, a)[y] (r(x, a, v, y) + rho W[y])`.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::domain::{Domain, ValueTable};
use crate::error::{Error, Result};
use crate::mfg::GameSpec;
use crate::policy::{Policy, RelaxedControl, Strategy};
use crate::simplex::SimplexGrid;
use crate::uncertainty::{inner_inf, InnerConfig, InnerSolution, Objective, SupportPoint};

/// Rows of one inner problem.
#[derive(Clone, Debug)]
pub(crate) struct NodeLayout {
    pub support: Vec<SupportPoint>,
    /// Occupied states with the (row, weight) mixture of the population control there.
    pub groups: Vec<(usize, Vec<(usize, f64)>)>,
    pub pop_rows: usize,
    /// Deviating agent's rows: (row, action index, weight).
    pub dev: Vec<(usize, usize, f64)>,
    pub affine: Option<usize>,
}

impl NodeLayout {
    pub fn build(
        x: usize,
        occupied: &[f64],
        base: &Policy,
        node: usize,
        dev: &RelaxedControl,
    ) -> NodeLayout {
        let actions = base.actions();
        let mut support = Vec::new();
        let mut keys: Vec<(usize, usize)> = Vec::new();
        let mut groups = Vec::new();
        for (s, &mass) in occupied.iter().enumerate() {
            if mass <= 0.0 {
                continue;
            }
            let mut mix = Vec::new();
            for &(a, w) in base.control(node, s).entries() {
                mix.push((support.len(), w));
                keys.push((s, a));
                support.push(SupportPoint::new(s, actions.point(a)));
            }
            groups.push((s, mix));
        }
        let pop_rows = support.len();
        let mut devs = Vec::new();
        let mut fresh = 0;
        for &(a, w) in dev.entries() {
            let row = match keys.iter().position(|&k| k == (x, a)) {
                Some(r) => r,
                None => {
                    keys.push((x, a));
                    support.push(SupportPoint::new(x, actions.point(a)));
                    fresh += 1;
                    support.len() - 1
                }
            };
            devs.push((row, a, w));
        }
        let affine = (devs.len() == 1 && fresh == 1).then(|| devs[0].0);
        NodeLayout {
            support,
            groups,
            pop_rows,
            dev: devs,
            affine,
        }
    }
}

/// How the population law moves.
pub(crate) enum Flow {
    MeanField,
    Agents(AgentFlow),
}

/// Exact or sampled law of the other agents' next configuration.
pub(crate) struct AgentFlow {
    pub n: usize,
    pub d: usize,
    minus: Option<SimplexGrid>,
    /// N-agent node of (outcome node k of the others) + e_y, at `k * d + y`.
    shift: Vec<usize>,
    pub cap: f64,
    pub mc_samples: usize,
    pub seed: u64,
}

impl AgentFlow {
    pub fn new(domain: &Domain, cap: f64, mc_samples: usize, seed: u64) -> Result<AgentFlow> {
        let n = domain
            .agents_count()
            .ok_or_else(|| Error::InvalidArgument("agent flow needs an agent domain".into()))?;
        let d = domain.dim();
        let minus = if n > 1 {
            Some(SimplexGrid::with_resolution(d, n - 1)?)
        } else {
            None
        };
        let mut shift = Vec::new();
        match &minus {
            Some(g) => {
                let mut c = vec![0u32; d];
                for k in 0..g.len() {
                    for y in 0..d {
                        c.copy_from_slice(g.counts(k));
                        c[y] += 1;
                        shift.push(domain.grid().index_of(&c).expect("shifted counts lie on the grid"));
                    }
                }
            }
            None => {
                for y in 0..d {
                    let mut c = vec![0u32; d];
                    c[y] = 1;
                    shift.push(domain.grid().index_of(&c).expect("unit counts lie on the grid"));
                }
            }
        }
        Ok(AgentFlow {
            n,
            d,
            minus,
            shift,
            cap,
            mc_samples,
            seed,
        })
    }

    /// Number of joint outcomes of the others' transitions.
    pub fn outcome_count(&self, others: &[u32]) -> f64 {
        others
            .iter()
            .filter(|&&o| o > 0)
            .map(|&o| binom_f(o as usize + self.d - 1, self.d - 1))
            .product()
    }

    /// Probability of each outcome node of the other agents.
    /// `q` holds one next-state law per state (rows of states without agents are ignored).
    pub fn outcome_pmf(&self, others: &[u32], q: &[f64]) -> Vec<(usize, f64)> {
        let d = self.d;
        let Some(minus) = &self.minus else {
            return vec![(0, 1.0)];
        };
        if d == 2 {
            let mut pmf = vec![1.0];
            for (s, &o) in others.iter().enumerate() {
                if o == 0 {
                    continue;
                }
                let p = q[s * 2 + 1].clamp(0.0, 1.0);
                let b = binomial_pmf(o as usize, p);
                let mut out = vec![0.0; pmf.len() + b.len() - 1];
                for (i, a) in pmf.iter().enumerate() {
                    if *a == 0.0 {
                        continue;
                    }
                    for (j, c) in b.iter().enumerate() {
                        out[i + j] += a * c;
                    }
                }
                pmf = out;
            }
            return pmf.into_iter().enumerate().filter(|e| e.1 > 0.0).collect();
        }
        let mut dist: BTreeMap<Vec<u32>, f64> = BTreeMap::new();
        dist.insert(vec![0; d], 1.0);
        for (s, &o) in others.iter().enumerate() {
            if o == 0 {
                continue;
            }
            let parts = multinomial_pmf(o, &q[s * d..(s + 1) * d]);
            let mut next: BTreeMap<Vec<u32>, f64> = BTreeMap::new();
            for (c, p) in &dist {
                for (part, pp) in &parts {
                    let key: Vec<u32> = c.iter().zip(part).map(|(a, b)| a + b).collect();
                    *next.entry(key).or_insert(0.0) += p * pp;
                }
            }
            dist = next;
        }
        let mut out: Vec<(usize, f64)> = dist
            .into_iter()
            .map(|(c, p)| (minus.index_of(&c).expect("outcome lies on the grid"), p))
            .collect();
        out.sort_by_key(|e| e.0);
        out
    }

    /// Exact continuation `W[y]` for every `y`.
    pub fn continuation_exact(&self, others: &[u32], q: &[f64], table: &ValueTable, out: &mut [f64]) {
        let d = self.d;
        out.iter_mut().for_each(|w| *w = 0.0);
        for (k, p) in self.outcome_pmf(others, q) {
            for y in 0..d {
                out[y] += p * table.values()[self.shift[k * d + y] * d + y];
            }
        }
    }

    /// Common random numbers for the sampled continuation at one node.
    pub fn uniforms(&self, node: usize, x: usize, samples: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(((node as u64) << 8) | x as u64);
        (0..samples * (self.n - 1)).map(|_| rng.gen::<f64>()).collect()
    }

    /// Sampled continuation: per-sample values of `V(y, next law)` for every `y`,
    /// accumulated into mean (`out`) and, when requested, standard errors.
    pub fn continuation_sampled(
        &self,
        others: &[u32],
        q: &[f64],
        table: &ValueTable,
        uniforms: &[f64],
        out: &mut [f64],
        stderr: Option<&mut [f64]>,
    ) {
        let d = self.d;
        let others_n = self.n - 1;
        let samples = uniforms.len().checked_div(others_n).unwrap_or(1);
        let mut counts = vec![0u32; d];
        // Welford running moments: exact for constant integrands
        let mut mean = vec![0.0; d];
        let mut m2 = vec![0.0; d];
        for s in 0..samples {
            counts.iter_mut().for_each(|c| *c = 0);
            let mut j = 0;
            for (st, &o) in others.iter().enumerate() {
                let row = &q[st * d..(st + 1) * d];
                for _ in 0..o {
                    let u = uniforms[s * others_n + j];
                    j += 1;
                    let mut acc = 0.0;
                    let mut y = d - 1;
                    for (k, &p) in row.iter().enumerate() {
                        acc += p;
                        if u < acc {
                            y = k;
                            break;
                        }
                    }
                    counts[y] += 1;
                }
            }
            let k = match &self.minus {
                Some(g) => g.index_of(&counts).expect("sampled counts lie on the grid"),
                None => 0,
            };
            let n = (s + 1) as f64;
            for y in 0..d {
                let val = table.values()[self.shift[k * d + y] * d + y];
                let delta = val - mean[y];
                mean[y] += delta / n;
                m2[y] += delta * (val - mean[y]);
            }
        }
        out.copy_from_slice(&mean);
        if let Some(se) = stderr {
            let m = samples as f64;
            for y in 0..d {
                let var = if samples > 1 { (m2[y] / (m - 1.0)).max(0.0) } else { 0.0 };
                se[y] = (var / m).sqrt();
            }
        }
    }
}

fn binom_f(n: usize, k: usize) -> f64 {
    let mut r = 1.0;
    for i in 0..k {
        r = r * (n - i) as f64 / (i + 1) as f64;
    }
    r
}

pub(crate) fn binomial_pmf(n: usize, p: f64) -> Vec<f64> {
    let mut pmf = vec![1.0];
    for _ in 0..n {
        let mut next = vec![0.0; pmf.len() + 1];
        for (j, a) in pmf.iter().enumerate() {
            next[j] += a * (1.0 - p);
            next[j + 1] += a * p;
        }
        pmf = next;
    }
    pmf
}

fn multinomial_pmf(n: u32, q: &[f64]) -> Vec<(Vec<u32>, f64)> {
    let d = q.len();
    let mut out = Vec::new();
    let mut cur = vec![0u32; d];
    let mut lf = vec![0.0f64; n as usize + 1];
    for i in 1..=n as usize {
        lf[i] = lf[i - 1] + (i as f64).ln();
    }
    fn rec(cur: &mut Vec<u32>, pos: usize, left: u32, q: &[f64], lf: &[f64], n: u32, out: &mut Vec<(Vec<u32>, f64)>) {
        if pos + 1 == cur.len() {
            cur[pos] = left;
            let mut p = lf[n as usize];
            for (i, &c) in cur.iter().enumerate() {
                if c > 0 {
                    if q[i] <= 0.0 {
                        return;
                    }
                    p += c as f64 * q[i].ln() - lf[c as usize];
                }
            }
            out.push((cur.clone(), p.exp()));
            return;
        }
        for c in (0..=left).rev() {
            cur[pos] = c;
            rec(cur, pos + 1, left - c, q, lf, n, out);
        }
    }
    rec(&mut cur, 0, n, q, &lf, n, &mut out);
    out
}

/// Memo of population continuations keyed by the population rows' bits.
#[derive(Default)]
pub(crate) struct PopCache {
    map: HashMap<Vec<u64>, Vec<f64>>,
}

impl PopCache {
    const LIMIT: usize = 200_000;
}

/// Everything needed to run the one-step operator on one domain.
pub(crate) struct Stage<'a> {
    pub spec: &'a GameSpec,
    pub flow: &'a Flow,
    pub domain: &'a std::sync::Arc<Domain>,
    pub base: &'a Policy,
}

impl<'a> Stage<'a> {
    /// Mass of the population (other agents) at each state.
    pub fn occupied(&self, node: usize, x: usize) -> Vec<f64> {
        match self.flow {
            Flow::MeanField => self.domain.node(node).weights().to_vec(),
            Flow::Agents(_) => {
                let mut c: Vec<f64> = self.domain.counts(node).iter().map(|&c| c as f64).collect();
                c[x] -= 1.0;
                c
            }
        }
    }

    /// Inner infimum at `(node, x)` for the deviating control `dev`,
    /// continuing with `table`.
    pub fn solve_node(
        &self,
        table: &ValueTable,
        node: usize,
        x: usize,
        dev: &RelaxedControl,
        cfg: &InnerConfig,
        mut cache: Option<&mut PopCache>,
    ) -> Result<(InnerSolution, NodeLayout)> {
        let spec = self.spec;
        let d = spec.d();
        let v = self.domain.node(node);
        let occupied = self.occupied(node, x);
        let lay = NodeLayout::build(x, &occupied, self.base, node, dev);
        let actions = self.base.actions();
        let rewards: Vec<Vec<f64>> = lay
            .dev
            .iter()
            .map(|&(_, a, _)| (0..d).map(|y| spec.reward().eval(x, actions.point(a), v, y)).collect())
            .collect();
        let rho = spec.rho();

        let others: Vec<u32> = occupied.iter().map(|&c| c.max(0.0).round() as u32).collect();
        let (agent, sampled) = match self.flow {
            Flow::MeanField => (None, None),
            Flow::Agents(af) => {
                if af.outcome_count(&others) > af.cap {
                    (Some(af), Some(af.uniforms(node, x, af.mc_samples, af.seed)))
                } else {
                    (Some(af), None)
                }
            }
        };
        let mut q = vec![0.0; d * d];
        let mut mu = vec![0.0; d];
        let mut w = vec![0.0; d];
        let mut continuation = |rows: &[f64], out: &mut [f64]| {
            q.iter_mut().for_each(|e| *e = 0.0);
            for (s, mix) in &lay.groups {
                for &(r, wt) in mix {
                    for y in 0..d {
                        q[s * d + y] += wt * rows[r * d + y];
                    }
                }
            }
            match agent {
                None => {
                    mu.iter_mut().for_each(|e| *e = 0.0);
                    for (s, _) in &lay.groups {
                        for y in 0..d {
                            mu[y] += v[*s] * q[s * d + y];
                        }
                    }
                    let st = table.domain().grid().stencil(&mu);
                    for y in 0..d {
                        out[y] = st.iter().map(|(n, wt)| wt * table.values()[n * d + y]).sum();
                    }
                }
                Some(af) => match &sampled {
                    None => af.continuation_exact(&others, &q, table, out),
                    Some(u) => af.continuation_sampled(&others, &q, table, u, out, None),
                },
            }
        };
        let pop_rows = lay.pop_rows;
        let mut cached = |rows: &[f64], out: &mut [f64]| match cache.as_deref_mut() {
            None => continuation(rows, out),
            Some(c) => {
                let key: Vec<u64> = rows[..pop_rows * d].iter().map(|e| e.to_bits()).collect();
                if let Some(hit) = c.map.get(&key) {
                    out.copy_from_slice(hit);
                } else {
                    continuation(rows, out);
                    if c.map.len() >= PopCache::LIMIT {
                        c.map.clear();
                    }
                    c.map.insert(key, out.to_vec());
                }
            }
        };

        let sol = match lay.affine {
            Some(row) => {
                let r0 = &rewards[0];
                let mut f = |rows: &[f64], coef: &mut [f64]| {
                    cached(rows, &mut w);
                    for y in 0..d {
                        coef[y] = r0[y] + rho * w[y];
                    }
                    0.0
                };
                inner_inf(&spec.ball, v, &lay.support, Objective::Affine { row, f: &mut f }, cfg)?
            }
            None => {
                let devs = &lay.dev;
                let mut f = |rows: &[f64]| {
                    cached(rows, &mut w);
                    let mut total = 0.0;
                    for (k, &(r, _, sigma)) in devs.iter().enumerate() {
                        let mut acc = 0.0;
                        for y in 0..d {
                            acc += rows[r * d + y] * (rewards[k][y] + rho * w[y]);
                        }
                        total += sigma * acc;
                    }
                    total
                };
                inner_inf(&spec.ball, v, &lay.support, Objective::Rows(&mut f), cfg)?
            }
        };
        Ok((sol, lay))
    }

    /// One synchronous sweep of the operator with deviating policy `dev`.
    pub fn sweep(&self, table: &ValueTable, dev: &Policy, cfg: &InnerConfig) -> Result<ValueTable> {
        let pairs = self.domain.pairs();
        let vals = pairs
            .par_iter()
            .map(|&(node, x)| {
                self.solve_node(table, node, x, dev.control(node, x), cfg, None)
                    .map(|(s, _)| s.value)
                    .map_err(|e| annotate(e, self.domain, node, x))
            })
            .collect::<Result<Vec<f64>>>()?;
        let mut out = vec![0.0; self.domain.slots()];
        for (&(node, x), val) in pairs.iter().zip(vals) {
            out[self.domain.slot(node, x)] = val;
        }
        Ok(ValueTable::from_values(self.domain, out))
    }

    /// Fixed point of the operator for the stationary tail, then the heads
    /// applied last to first.
    pub fn value(&self, dev: &Strategy, tol: f64, init: Option<ValueTable>) -> Result<(ValueTable, usize)> {
        let rho = self.spec.rho();
        if !(tol > 0.0) {
            return Err(Error::InvalidArgument(format!("tolerance must be positive, got {tol}")));
        }
        let cap = iteration_cap(tol, rho);
        let stop = tol * (1.0 - rho) / rho;
        let tail = dev.tail();
        let cfg = &self.spec.inner;
        let mut v = init.unwrap_or_else(|| ValueTable::constant(self.domain, 0.0));
        let mut iters = 0;
        loop {
            let next = self.sweep(&v, tail, cfg)?;
            iters += 1;
            let change = next.sup_diff(&v);
            v = next;
            if change <= stop {
                break;
            }
            if iters >= cap {
                return Err(Error::NonConvergence {
                    what: "robust value iteration".into(),
                    iterations: iters,
                    best: change,
                });
            }
        }
        for head in dev.heads().iter().rev() {
            v = self.sweep(&v, head, cfg)?;
        }
        Ok((v, iters))
    }

    /// Best point-mass deviation at one pair, with a 50/50 mixture check on ties.
    /// With `base` given, also evaluates that control under the same
    /// continuation (reusing the point-mass value when it was searched).
    pub fn best_response(
        &self,
        table: &ValueTable,
        node: usize,
        x: usize,
        actions: &[usize],
        base: Option<&RelaxedControl>,
    ) -> Result<BestResponse> {
        let cfg = &self.spec.inner;
        let mut cache = PopCache::default();
        let mut values = Vec::with_capacity(actions.len());
        for &a in actions {
            let (sol, _) = self
                .solve_node(table, node, x, &RelaxedControl::point(a), cfg, Some(&mut cache))
                .map_err(|e| annotate(e, self.domain, node, x))?;
            values.push(sol.value);
        }
        let mut best = 0;
        for k in 1..values.len() {
            if values[k] > values[best] {
                best = k;
            }
        }
        let mut control = RelaxedControl::point(actions[best]);
        let mut value = values[best];
        let runner = (0..values.len())
            .filter(|&k| k != best)
            .max_by(|&a, &b| values[a].total_cmp(&values[b]).then(b.cmp(&a)));
        if let Some(r) = runner {
            if (values[best] - values[r]).abs() <= TIE_TOL {
                let mix = RelaxedControl::new(vec![(actions[best], 0.5), (actions[r], 0.5)])?;
                let (sol, _) = self.solve_node(table, node, x, &mix, cfg, Some(&mut cache))?;
                if sol.value > value + 1e-12 {
                    value = sol.value;
                    control = mix;
                }
            }
        }
        let base_value = match base {
            None => None,
            Some(c) => match c.as_point().and_then(|a| actions.iter().position(|&b| b == a)) {
                Some(k) => Some(values[k]),
                None => Some(self.solve_node(table, node, x, c, cfg, Some(&mut cache))?.0.value),
            },
        };
        Ok(BestResponse {
            control,
            value,
            action_values: values,
            base_value,
        })
    }

    /// Best responses at every admissible pair against `table` (the value of
    /// the base policy) and the largest gain over the base control's one-shot value.
    pub fn verify(&self, table: &ValueTable, actions: &[usize]) -> Result<Verification> {
        let pairs = self.domain.pairs();
        let brs = pairs
            .par_iter()
            .map(|&(node, x)| self.best_response(table, node, x, actions, Some(self.base.control(node, x))))
            .collect::<Result<Vec<_>>>()?;
        let mut epsilon = f64::NEG_INFINITY;
        let mut worst = (0, 0);
        for (&(node, x), br) in pairs.iter().zip(&brs) {
            let gain = br.value - br.base_value.unwrap_or_else(|| table.get(node, x));
            if gain > epsilon {
                epsilon = gain;
                worst = (node, x);
            }
        }
        Ok(Verification {
            epsilon,
            worst,
            pairs,
            responses: brs,
        })
    }
}

pub(crate) const TIE_TOL: f64 = 1e-9;

/// Result of a best-response search at one pair.
#[derive(Clone, Debug)]
pub struct BestResponse {
    pub control: RelaxedControl,
    pub value: f64,
    /// One-shot value of each searched point mass.
    pub action_values: Vec<f64>,
    /// One-shot value of the base control, when requested.
    pub base_value: Option<f64>,
}

pub(crate) struct Verification {
    pub epsilon: f64,
    pub worst: (usize, usize),
    pub pairs: Vec<(usize, usize)>,
    pub responses: Vec<BestResponse>,
}

pub(crate) fn iteration_cap(tol: f64, rho: f64) -> usize {
    ((10.0 * tol.ln() / rho.ln()).ceil() as usize).max(10)
}

fn annotate(e: Error, domain: &Domain, node: usize, x: usize) -> Error {
    match e {
        Error::InfeasibleSet(msg) => Error::InfeasibleSet(format!(
            "{msg} (state {}, counts {:?})",
            x + 1,
            domain.counts(node)
        )),
        other => other,
    }
}
