//! Action grids, relaxed controls, policy tables and perturbed strategies.

use std::io::{BufRead, BufReader, Read, Write};
use std::sync::Arc;

use crate::domain::{Domain, DomainKind};
use crate::error::{invalid, Error, Result};
use crate::simplex::{Dist, SimplexGrid, TOL_SIMPLEX};

/// Sorted action points in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionGrid {
    points: Vec<f64>,
    spacing: f64,
}

impl ActionGrid {
    /// Points must be strictly increasing, inside `[0, 1]` and include both ends.
    pub fn new(points: Vec<f64>) -> Result<ActionGrid> {
        if points.len() < 2 {
            return invalid("action grid needs at least two points");
        }
        if points[0] != 0.0 || points[points.len() - 1] != 1.0 {
            return invalid("action grid must include 0 and 1");
        }
        let mut spacing: f64 = 0.0;
        for w in points.windows(2) {
            if !(w[1] > w[0]) {
                return invalid(format!("action points {} and {} are not increasing", w[0], w[1]));
            }
            spacing = spacing.max(w[1] - w[0]);
        }
        Ok(ActionGrid { points, spacing })
    }

    /// `n` equispaced points.
    pub fn uniform(n: usize) -> Result<ActionGrid> {
        if n < 2 {
            return invalid("action grid needs at least two points");
        }
        let k = (n - 1) as f64;
        ActionGrid::new((0..n).map(|i| i as f64 / k).collect())
    }

    /// Equispaced points `0, h, 2h, ..., 1`.
    pub fn with_spacing(h: f64) -> Result<ActionGrid> {
        let m = (1.0 / h).round();
        if !(h > 0.0) || (m * h - 1.0).abs() > 1e-9 {
            return invalid(format!("action spacing {h} is not of the form 1/m"));
        }
        ActionGrid::uniform(m as usize + 1)
    }

    /// A one-point grid: the degenerate game with no choice of action.
    pub fn single(u: f64) -> Result<ActionGrid> {
        if !(0.0..=1.0).contains(&u) {
            return invalid(format!("action {u} is outside [0, 1]"));
        }
        Ok(ActionGrid {
            points: vec![u],
            spacing: 0.0,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn point(&self, i: usize) -> f64 {
        self.points[i]
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    /// Nearest point; ties go to the smaller action.
    pub fn nearest(&self, u: f64) -> usize {
        let k = self.points.partition_point(|&p| p < u);
        if k == 0 {
            return 0;
        }
        if k == self.points.len() {
            return k - 1;
        }
        if u - self.points[k - 1] <= self.points[k] - u {
            k - 1
        } else {
            k
        }
    }

    /// Index of `u` if it is a grid point (within 1e-12).
    pub fn index_of(&self, u: f64) -> Option<usize> {
        let k = self.nearest(u);
        ((self.points[k] - u).abs() <= 1e-12).then_some(k)
    }

    /// Indices of `n` points spread evenly over the grid, ends included.
    pub fn coarse_indices(&self, n: usize) -> Vec<usize> {
        let len = self.len();
        if n >= len {
            return (0..len).collect();
        }
        let mut out: Vec<usize> = (0..n)
            .map(|k| {
                let target = if n == 1 { 0.0 } else { k as f64 / (n - 1) as f64 };
                self.nearest(self.points[0] + target * (self.points[len - 1] - self.points[0]))
            })
            .collect();
        out.dedup();
        out
    }
}

/// A probability distribution over action-grid points, stored sparsely.
#[derive(Clone, Debug, PartialEq)]
pub struct RelaxedControl {
    entries: Vec<(usize, f64)>,
}

impl RelaxedControl {
    pub fn point(i: usize) -> RelaxedControl {
        RelaxedControl {
            entries: vec![(i, 1.0)],
        }
    }

    /// From (action index, weight) pairs; zero weights are dropped and
    /// repeated indices merged.
    pub fn new(mut entries: Vec<(usize, f64)>) -> Result<RelaxedControl> {
        let mut sum = 0.0;
        for &(i, w) in &entries {
            if !w.is_finite() || !(-TOL_SIMPLEX..=1.0 + TOL_SIMPLEX).contains(&w) {
                return invalid(format!("weight {w} on action {i} is outside [0, 1]"));
            }
            sum += w;
        }
        if (sum - 1.0).abs() > TOL_SIMPLEX {
            return invalid(format!("control weights sum to {sum}, not 1"));
        }
        entries.sort_by_key(|e| e.0);
        let mut merged: Vec<(usize, f64)> = Vec::with_capacity(entries.len());
        for (i, w) in entries {
            match merged.last_mut() {
                Some(last) if last.0 == i => last.1 += w,
                _ => merged.push((i, w)),
            }
        }
        merged.retain(|e| e.1 > 0.0);
        let s: f64 = merged.iter().map(|e| e.1).sum();
        if s != 1.0 {
            for e in merged.iter_mut() {
                e.1 /= s;
            }
        }
        Ok(RelaxedControl { entries: merged })
    }

    /// Mixture of the two grid points around `u` with mean `u`; a point
    /// mass when `u` is (within 1e-9) a grid point.
    pub fn mean_preserving(actions: &ActionGrid, u: f64) -> RelaxedControl {
        let pts = actions.points();
        let k = actions.nearest(u);
        if (pts[k] - u).abs() <= 1e-9 || pts.len() == 1 {
            return RelaxedControl::point(k);
        }
        let lo = if pts[k] < u { k } else { k - 1 };
        let t = (u - pts[lo]) / (pts[lo + 1] - pts[lo]);
        RelaxedControl {
            entries: vec![(lo, 1.0 - t), (lo + 1, t)],
        }
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }

    pub fn as_point(&self) -> Option<usize> {
        (self.entries.len() == 1).then(|| self.entries[0].0)
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.entries.iter().find(|e| e.0 == i).map_or(0.0, |e| e.1)
    }

    pub fn mean(&self, actions: &ActionGrid) -> f64 {
        self.entries.iter().map(|&(i, w)| w * actions.point(i)).sum()
    }

    /// `(1 - lambda) * self + lambda * other`, dropping weights below `prune`.
    pub fn mix(&self, other: &RelaxedControl, lambda: f64, prune: f64) -> RelaxedControl {
        let mut entries: Vec<(usize, f64)> = self.entries.iter().map(|&(i, w)| (i, (1.0 - lambda) * w)).collect();
        entries.extend(other.entries.iter().map(|&(i, w)| (i, lambda * w)));
        entries.sort_by_key(|e| e.0);
        let mut merged: Vec<(usize, f64)> = Vec::new();
        for (i, w) in entries {
            match merged.last_mut() {
                Some(last) if last.0 == i => last.1 += w,
                _ => merged.push((i, w)),
            }
        }
        merged.retain(|e| e.1 > prune);
        let s: f64 = merged.iter().map(|e| e.1).sum();
        for e in merged.iter_mut() {
            e.1 /= s;
        }
        RelaxedControl { entries: merged }
    }

    /// W1 distance on the real line between two controls on the same grid.
    pub fn w1(&self, other: &RelaxedControl, actions: &ActionGrid) -> f64 {
        let pts = actions.points();
        let (mut fa, mut fb) = (0.0, 0.0);
        let (mut ia, mut ib) = (0, 0);
        let mut total = 0.0;
        for k in 0..pts.len().saturating_sub(1) {
            while ia < self.entries.len() && self.entries[ia].0 <= k {
                fa += self.entries[ia].1;
                ia += 1;
            }
            while ib < other.entries.len() && other.entries[ib].0 <= k {
                fb += other.entries[ib].1;
                ib += 1;
            }
            total += (fa - fb).abs() * (pts[k + 1] - pts[k]);
        }
        total
    }
}

/// A stationary Markov policy: one control per admissible (state, law) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Policy {
    domain: Arc<Domain>,
    actions: Arc<ActionGrid>,
    table: Vec<RelaxedControl>,
}

impl Policy {
    pub fn from_fn(
        domain: &Arc<Domain>,
        actions: &Arc<ActionGrid>,
        f: impl Fn(usize, usize, &Dist) -> RelaxedControl,
    ) -> Policy {
        let mut table = vec![RelaxedControl::point(0); domain.slots()];
        for (node, x) in domain.pairs() {
            table[domain.slot(node, x)] = f(x, node, domain.node(node));
        }
        Policy {
            domain: domain.clone(),
            actions: actions.clone(),
            table,
        }
    }

    pub fn constant(domain: &Arc<Domain>, actions: &Arc<ActionGrid>, control: RelaxedControl) -> Policy {
        Policy::from_fn(domain, actions, |_, _, _| control.clone())
    }

    pub fn domain(&self) -> &Arc<Domain> {
        &self.domain
    }

    pub fn actions(&self) -> &Arc<ActionGrid> {
        &self.actions
    }

    pub fn control(&self, node: usize, x: usize) -> &RelaxedControl {
        &self.table[self.domain.slot(node, x)]
    }

    pub fn set(&mut self, node: usize, x: usize, control: RelaxedControl) {
        let s = self.domain.slot(node, x);
        self.table[s] = control;
    }

    /// Control at `(x, v)`: the nearest node on mean-field domains, the exact
    /// node on agent domains.
    pub fn eval(&self, x: usize, v: &Dist) -> Result<&RelaxedControl> {
        let node = self.domain.locate(x, v)?;
        Ok(self.control(node, x))
    }

    /// Re-tabulates on another domain by evaluating at its nodes (nearest-node
    /// lookup when this policy lives on a mean-field grid).
    pub fn restrict(&self, target: &Arc<Domain>) -> Result<Policy> {
        if target.dim() != self.domain.dim() {
            return invalid("target domain has a different state count");
        }
        let mut out = Policy::constant(target, &self.actions, RelaxedControl::point(0));
        for (node, x) in target.pairs() {
            let src = match self.domain.kind() {
                DomainKind::MeanField => self.domain.grid().nearest(target.node(node).weights()),
                DomainKind::Agents(_) => self.domain.locate(x, target.node(node))?,
            };
            out.set(node, x, self.control(src, x).clone());
        }
        Ok(out)
    }

    fn same_shape(&self, other: &Policy) -> Result<()> {
        if *self.domain != *other.domain || *self.actions != *other.actions {
            return invalid("policies live on different domains or action grids");
        }
        Ok(())
    }

    /// Largest W1 distance between the controls of two policies.
    pub fn sup_w1(&self, other: &Policy) -> Result<f64> {
        self.same_shape(other)?;
        Ok(self
            .domain
            .pairs()
            .into_iter()
            .map(|(n, x)| self.control(n, x).w1(other.control(n, x), &self.actions))
            .fold(0.0, f64::max))
    }

    /// Slot-wise mixture `(1 - lambda) * self + lambda * other`.
    pub fn mix(&self, other: &Policy, lambda: f64, prune: f64) -> Result<Policy> {
        self.same_shape(other)?;
        let mut out = self.clone();
        for (n, x) in self.domain.pairs() {
            out.set(n, x, self.control(n, x).mix(other.control(n, x), lambda, prune));
        }
        Ok(out)
    }

    /// Empirical modulus of continuity: the largest ratio of control distance
    /// to law distance over neighbouring nodes, per state and then maximized.
    pub fn modulus(&self) -> f64 {
        let step = self.domain.step();
        let d = self.domain.dim();
        let mut best: f64 = 0.0;
        for (i, j) in self.domain.grid().adjacent_pairs() {
            for x in 0..d {
                if self.domain.feasible(i, x) && self.domain.feasible(j, x) {
                    let w = self.control(i, x).w1(self.control(j, x), &self.actions);
                    best = best.max(w / step);
                }
            }
        }
        best
    }

    /// Writes the lossless text form: two header lines naming the domain and
    /// action grid, then one `state,counts,action,weight` record per charged action.
    pub fn write_table(&self, out: impl Write) -> Result<()> {
        let mut out = out;
        let d = self.domain.dim();
        let (tag, size) = match self.domain.kind() {
            DomainKind::MeanField => ("mean-field", self.domain.grid().resolution()),
            DomainKind::Agents(n) => ("agents", n),
        };
        writeln!(out, "# domain {tag} {d} {size}")?;
        let pts: Vec<String> = self.actions.points().iter().map(|p| p.to_string()).collect();
        writeln!(out, "# actions {}", pts.join(" "))?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["state", "counts", "action", "weight"])?;
        for (node, x) in self.domain.pairs() {
            let counts: Vec<String> = self.domain.counts(node).iter().map(|c| c.to_string()).collect();
            let counts = counts.join(":");
            for &(a, wt) in self.control(node, x).entries() {
                w.write_record([
                    (x + 1).to_string(),
                    counts.clone(),
                    self.actions.point(a).to_string(),
                    wt.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_table(input: impl Read) -> Result<Policy> {
        let mut reader = BufReader::new(input);
        let mut header = |prefix: &str| -> Result<Vec<String>> {
            let mut line = String::new();
            reader.read_line(&mut line)?;
            let rest = line
                .trim_end()
                .strip_prefix(prefix)
                .ok_or_else(|| Error::Parse(format!("expected a line starting with '{prefix}'")))?;
            Ok(rest.split_whitespace().map(str::to_string).collect())
        };
        let dom = header("# domain ")?;
        let acts = header("# actions ")?;
        if dom.len() != 3 {
            return Err(Error::Parse("domain line needs kind, states and size".into()));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|e| Error::Parse(format!("'{s}': {e}")));
        let (d, size) = (num(&dom[1])?, num(&dom[2])?);
        let domain = match dom[0].as_str() {
            "mean-field" => Domain::mean_field(SimplexGrid::with_resolution(d, size)?),
            "agents" => Domain::agents(size, d)?,
            other => return Err(Error::Parse(format!("unknown domain kind '{other}'"))),
        };
        let pts = acts
            .iter()
            .map(|s| s.parse::<f64>().map_err(|e| Error::Parse(format!("'{s}': {e}"))))
            .collect::<Result<Vec<_>>>()?;
        let actions = Arc::new(if pts.len() == 1 {
            ActionGrid::single(pts[0])?
        } else {
            ActionGrid::new(pts)?
        });
        let mut entries: Vec<Vec<(usize, f64)>> = vec![Vec::new(); domain.slots()];
        let mut rdr = csv::Reader::from_reader(reader);
        for rec in rdr.records() {
            let rec = rec?;
            if rec.len() != 4 {
                return Err(Error::Parse(format!("record {:?} does not have 4 fields", rec)));
            }
            let x = num(&rec[0])?.checked_sub(1).ok_or_else(|| Error::Parse("states are numbered from 1".into()))?;
            let counts = rec[1].split(':').map(|c| c.parse::<u32>()).collect::<std::result::Result<Vec<_>, _>>();
            let counts = counts.map_err(|e| Error::Parse(format!("counts '{}': {e}", &rec[1])))?;
            let node = domain
                .grid()
                .index_of(&counts)
                .ok_or_else(|| Error::Parse(format!("counts '{}' are not a node", &rec[1])))?;
            if x >= d || !domain.feasible(node, x) {
                return Err(Error::Parse(format!("pair ({}, {}) is not admissible", x + 1, &rec[1])));
            }
            let u: f64 = rec[2].parse().map_err(|e| Error::Parse(format!("action '{}': {e}", &rec[2])))?;
            let a = actions
                .points()
                .iter()
                .position(|&p| p == u)
                .ok_or_else(|| Error::Parse(format!("action {u} is not a grid point")))?;
            let wt: f64 = rec[3].parse().map_err(|e| Error::Parse(format!("weight '{}': {e}", &rec[3])))?;
            entries[domain.slot(node, x)].push((a, wt));
        }
        let mut table = vec![RelaxedControl::point(0); domain.slots()];
        for (node, x) in domain.pairs() {
            let e = std::mem::take(&mut entries[domain.slot(node, x)]);
            if e.is_empty() {
                return Err(Error::Parse(format!("no control for state {} at node {node}", x + 1)));
            }
            // stored weights are already normalized; keep them bit for bit
            table[domain.slot(node, x)] = RelaxedControl { entries: e };
        }
        Ok(Policy {
            domain,
            actions,
            table,
        })
    }
}

/// A stationary policy, possibly preceded by finitely many one-period heads.
#[derive(Clone, Debug, PartialEq)]
pub enum Strategy {
    Stationary(Policy),
    Perturbed { heads: Vec<Policy>, tail: Policy },
}

impl From<Policy> for Strategy {
    fn from(p: Policy) -> Strategy {
        Strategy::Stationary(p)
    }
}

impl Strategy {
    pub fn heads(&self) -> &[Policy] {
        match self {
            Strategy::Stationary(_) => &[],
            Strategy::Perturbed { heads, .. } => heads,
        }
    }

    pub fn tail(&self) -> &Policy {
        match self {
            Strategy::Stationary(p) | Strategy::Perturbed { tail: p, .. } => p,
        }
    }

    /// Policy in force at period `t`.
    pub fn at(&self, t: usize) -> &Policy {
        self.heads().get(t).unwrap_or_else(|| self.tail())
    }

    pub fn control_at(&self, t: usize, x: usize, v: &Dist) -> Result<&RelaxedControl> {
        self.at(t).eval(x, v)
    }
}

/// What a deviating agent plays in the first period.
#[derive(Clone, Debug)]
pub enum Deviation {
    Policy(Policy),
    Control(RelaxedControl),
}

/// The strategy playing `deviation` now and `base` from the next period on.
pub fn one_shot(deviation: Deviation, base: impl Into<Strategy>) -> Result<Strategy> {
    let base = base.into();
    let tail = base.tail();
    let head = match deviation {
        Deviation::Policy(p) => {
            if *p.domain != *tail.domain || *p.actions != *tail.actions {
                return invalid("deviation and base live on different domains");
            }
            p
        }
        Deviation::Control(c) => {
            if c.entries.iter().any(|e| e.0 >= tail.actions.len()) {
                return invalid("deviation charges an action outside the grid");
            }
            Policy::constant(&tail.domain, &tail.actions, c)
        }
    };
    let mut heads = vec![head];
    heads.extend(base.heads().iter().cloned());
    Ok(Strategy::Perturbed {
        heads,
        tail: tail.clone(),
    })
}
