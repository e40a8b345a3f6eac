//! Domains of (state, population law) pairs and real-valued tables over them.
//!
//! A mean-field domain is a simplex grid crossed with the states; every pair
//! is admissible and off-grid laws are handled by interpolation. The domain
//! of the N-agent game is the set of empirical laws of N agents, restricted
//! to pairs where the queried state is occupied.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::simplex::{Dist, SimplexGrid};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DomainKind {
    MeanField,
    Agents(usize),
}

#[derive(Clone, Debug)]
pub struct Domain {
    grid: SimplexGrid,
    kind: DomainKind,
}

impl PartialEq for Domain {
    fn eq(&self, other: &Self) -> bool {
        self.kind == other.kind
            && self.grid.dim() == other.grid.dim()
            && self.grid.resolution() == other.grid.resolution()
    }
}

impl Domain {
    pub fn mean_field(grid: SimplexGrid) -> Arc<Domain> {
        Arc::new(Domain {
            grid,
            kind: DomainKind::MeanField,
        })
    }

    /// Empirical laws of `n` agents over `d` states.
    pub fn agents(n: usize, d: usize) -> Result<Arc<Domain>> {
        Ok(Arc::new(Domain {
            grid: SimplexGrid::with_resolution(d, n)?,
            kind: DomainKind::Agents(n),
        }))
    }

    pub fn kind(&self) -> DomainKind {
        self.kind
    }

    pub fn agents_count(&self) -> Option<usize> {
        match self.kind {
            DomainKind::Agents(n) => Some(n),
            DomainKind::MeanField => None,
        }
    }

    pub fn grid(&self) -> &SimplexGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.grid.dim()
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn node(&self, i: usize) -> &Dist {
        self.grid.node(i)
    }

    pub fn counts(&self, i: usize) -> &[u32] {
        self.grid.counts(i)
    }

    pub fn slot(&self, node: usize, x: usize) -> usize {
        node * self.dim() + x
    }

    pub fn slots(&self) -> usize {
        self.len() * self.dim()
    }

    pub fn feasible(&self, node: usize, x: usize) -> bool {
        match self.kind {
            DomainKind::MeanField => true,
            DomainKind::Agents(_) => self.counts(node)[x] > 0,
        }
    }

    /// Admissible (node, state) pairs in table order.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let d = self.dim();
        (0..self.len())
            .flat_map(|n| (0..d).map(move |x| (n, x)))
            .filter(|&(n, x)| self.feasible(n, x))
            .collect()
    }

    /// Node holding `(x, v)`: the nearest grid node for mean-field domains,
    /// an exact match for agent domains.
    pub fn locate(&self, x: usize, v: &Dist) -> Result<usize> {
        let d = self.dim();
        if v.dim() != d || x >= d {
            return Err(Error::InvalidArgument(format!(
                "state {x} and law of dimension {} do not fit a {d}-state domain",
                v.dim()
            )));
        }
        match self.kind {
            DomainKind::MeanField => Ok(self.grid.nearest(v.weights())),
            DomainKind::Agents(n) => {
                let nf = n as f64;
                let counts: Vec<u32> = v.weights().iter().map(|w| (w * nf).round().max(0.0) as u32).collect();
                let exact = v
                    .weights()
                    .iter()
                    .zip(&counts)
                    .all(|(w, &c)| (w * nf - c as f64).abs() <= 1e-9 * nf.max(1.0));
                let node = self.grid.index_of(&counts).filter(|_| exact);
                match node {
                    Some(i) if counts[x] > 0 => Ok(i),
                    _ => Err(Error::InfeasibleState { state: x, n, counts }),
                }
            }
        }
    }

    /// W1 distance between neighbouring nodes.
    pub fn step(&self) -> f64 {
        self.grid.spacing()
    }
}

/// A real value per admissible (state, law) pair. Entries at inadmissible
/// pairs of agent domains are unused and kept at zero.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueTable {
    domain: Arc<Domain>,
    values: Vec<f64>,
}

impl ValueTable {
    pub fn constant(domain: &Arc<Domain>, c: f64) -> ValueTable {
        ValueTable::from_fn(domain, |_, _, _| c)
    }

    pub fn from_fn(domain: &Arc<Domain>, f: impl Fn(usize, usize, &Dist) -> f64) -> ValueTable {
        let mut values = vec![0.0; domain.slots()];
        for (node, x) in domain.pairs() {
            values[domain.slot(node, x)] = f(x, node, domain.node(node));
        }
        ValueTable {
            domain: domain.clone(),
            values,
        }
    }

    pub(crate) fn from_values(domain: &Arc<Domain>, values: Vec<f64>) -> ValueTable {
        ValueTable {
            domain: domain.clone(),
            values,
        }
    }

    pub fn domain(&self) -> &Arc<Domain> {
        &self.domain
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, node: usize, x: usize) -> f64 {
        self.values[self.domain.slot(node, x)]
    }

    pub fn set(&mut self, node: usize, x: usize, value: f64) {
        let s = self.domain.slot(node, x);
        self.values[s] = value;
    }

    /// Value at an arbitrary law: interpolated on mean-field domains,
    /// looked up exactly on agent domains.
    pub fn at(&self, x: usize, v: &Dist) -> Result<f64> {
        match self.domain.kind() {
            DomainKind::MeanField => Ok(self.interp(x, v.weights())),
            DomainKind::Agents(_) => Ok(self.get(self.domain.locate(x, v)?, x)),
        }
    }

    /// Grid interpolation in the law argument (mean-field domains).
    pub fn interp(&self, x: usize, v: &[f64]) -> f64 {
        let d = self.domain.dim();
        self.domain.grid().interp(v, |n| self.values[n * d + x])
    }

    /// Sup-norm distance over admissible pairs.
    pub fn sup_diff(&self, other: &ValueTable) -> f64 {
        self.domain
            .pairs()
            .into_iter()
            .map(|(n, x)| (self.get(n, x) - other.get(n, x)).abs())
            .fold(0.0, f64::max)
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn agent_locate() {
        let dom = Domain::agents(2, 2).unwrap();
        assert_eq!(dom.pairs().len(), 4);
        let v = Dist::new(vec![0.0, 1.0]).unwrap();
        assert!(matches!(dom.locate(0, &v), Err(Error::InfeasibleState { .. })));
        assert_eq!(dom.locate(1, &v).unwrap(), 2);
        let off = Dist::new(vec![0.3, 0.7]).unwrap();
        assert!(dom.locate(1, &off).is_err());
    }

    #[test]
    fn table_interp() {
        let dom = Domain::mean_field(SimplexGrid::build(2, 0.25).unwrap());
        let t = ValueTable::from_fn(&dom, |x, _, v| v[1] + x as f64);
        assert!((t.interp(1, &[0.6, 0.4]) - 1.4).abs() < 1e-12);
    }
}
