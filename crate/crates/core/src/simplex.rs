//! Distributions over a finite state space, the discrete-metric W1 distance,
//! lattice grids on the simplex and interpolation over those grids.
//!
//! States are indexed from 0 internally. Under the discrete metric
//! (d(x, y) = 1 for x != y) the Wasserstein-1 distance is the total-variation
//! distance, half the L1 norm of the difference.

use std::collections::HashMap;

use crate::error::{invalid, Result};

/// Membership tolerance for simplex points.
pub const TOL_SIMPLEX: f64 = 1e-9;

/// A probability vector over `d` states.
#[derive(Clone, Debug, PartialEq)]
pub struct Dist {
    w: Vec<f64>,
}

impl Dist {
    /// Validates and renormalizes. Entries within `TOL_SIMPLEX` of the simplex
    /// are accepted and projected back onto it; anything further off is rejected.
    pub fn new(weights: Vec<f64>) -> Result<Dist> {
        if weights.is_empty() {
            return invalid("distribution needs at least one state");
        }
        let mut sum = 0.0;
        for (i, &w) in weights.iter().enumerate() {
            if !w.is_finite() || !(-TOL_SIMPLEX..=1.0 + TOL_SIMPLEX).contains(&w) {
                return invalid(format!("weight {i} = {w} is outside [0, 1]"));
            }
            sum += w;
        }
        if (sum - 1.0).abs() > TOL_SIMPLEX {
            return invalid(format!("weights sum to {sum}, not 1"));
        }
        Ok(Dist::normalized(weights))
    }

    /// Clamps tiny negatives and rescales. Used on vectors that are simplex
    /// points up to floating-point drift.
    pub(crate) fn normalized(mut w: Vec<f64>) -> Dist {
        let mut sum = 0.0;
        for x in w.iter_mut() {
            if *x < 0.0 {
                *x = 0.0;
            }
            sum += *x;
        }
        if sum != 1.0 && sum > 0.0 {
            for x in w.iter_mut() {
                *x /= sum;
            }
        }
        Dist { w }
    }

    pub fn point(d: usize, x: usize) -> Dist {
        let mut w = vec![0.0; d];
        w[x] = 1.0;
        Dist { w }
    }

    pub fn uniform(d: usize) -> Dist {
        Dist { w: vec![1.0 / d as f64; d] }
    }

    /// Empirical distribution of a count vector.
    pub fn from_counts(counts: &[u32]) -> Dist {
        let n: u32 = counts.iter().sum();
        Dist {
            w: counts.iter().map(|&c| c as f64 / n as f64).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.w.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.w
    }

    pub fn into_weights(self) -> Vec<f64> {
        self.w
    }

    /// `(1 - lambda) * self + lambda * other`.
    pub fn mix(&self, other: &Dist, lambda: f64) -> Dist {
        let w = self
            .w
            .iter()
            .zip(&other.w)
            .map(|(a, b)| (1.0 - lambda) * a + lambda * b)
            .collect();
        Dist::normalized(w)
    }
}

impl std::ops::Index<usize> for Dist {
    type Output = f64;
    fn index(&self, x: usize) -> &f64 {
        &self.w[x]
    }
}

/// Half the L1 distance between two weight vectors of equal length.
#[inline]
pub fn half_l1(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Wasserstein-1 distance under the discrete metric.
pub fn w1(p: &Dist, q: &Dist) -> Result<f64> {
    if p.dim() != q.dim() {
        return invalid(format!("dimension mismatch: {} vs {}", p.dim(), q.dim()));
    }
    Ok(half_l1(&p.w, &q.w))
}

/// Largest-remainder rounding of `m * v` to integer counts summing to `m`;
/// on equal remainders the later coordinate is bumped, which keeps the
/// lexicographically smallest of the L1-nearest count vectors.
pub fn round_counts(v: &[f64], m: usize) -> Vec<u32> {
    let mf = m as f64;
    let mut counts = vec![0u32; v.len()];
    let mut frac = Vec::with_capacity(v.len());
    let mut assigned = 0u32;
    for (i, &w) in v.iter().enumerate() {
        let s = (w * mf).clamp(0.0, mf);
        let f = s.floor();
        counts[i] = f as u32;
        assigned += f as u32;
        frac.push((s - f, i));
    }
    let mut left = (m as u32).saturating_sub(assigned) as usize;
    frac.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.cmp(&a.1)));
    for &(_, i) in &frac {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Transition kernel: row `x` is the law of the next state from `x`.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel {
    rows: Vec<Dist>,
}

impl Kernel {
    pub fn new(rows: Vec<Dist>) -> Result<Kernel> {
        let d = rows.len();
        if d == 0 || rows.iter().any(|r| r.dim() != d) {
            return invalid("kernel must have d rows of dimension d");
        }
        Ok(Kernel { rows })
    }

    pub fn dim(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, x: usize) -> &Dist {
        &self.rows[x]
    }

    pub fn rows(&self) -> &[Dist] {
        &self.rows
    }

    /// `v * K`, the law after one step from `v`.
    pub fn push(&self, v: &Dist) -> Dist {
        let d = self.dim();
        let mut out = vec![0.0; d];
        for (x, row) in self.rows.iter().enumerate() {
            for y in 0..d {
                out[y] += v[x] * row[y];
            }
        }
        Dist::normalized(out)
    }
}

/// Convex-combination weights over at most three grid nodes.
#[derive(Clone, Copy, Debug)]
pub struct Stencil {
    pub nodes: [usize; 3],
    pub weights: [f64; 3],
    pub len: usize,
}

impl Stencil {
    fn single(node: usize) -> Stencil {
        Stencil {
            nodes: [node, 0, 0],
            weights: [1.0, 0.0, 0.0],
            len: 1,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        (0..self.len).map(move |i| (self.nodes[i], self.weights[i]))
    }
}

/// All points of the simplex whose coordinates are multiples of `1/m`.
///
/// Nodes are ordered by descending lexicographic order of their count
/// vectors, so for `d = 2` the node index equals the count at the second state.
#[derive(Clone, Debug)]
pub struct SimplexGrid {
    d: usize,
    m: usize,
    counts: Vec<u32>,
    nodes: Vec<Dist>,
    lookup: Option<HashMap<Vec<u32>, usize>>,
}

impl SimplexGrid {
    /// Grid with spacing `h`, which must be the reciprocal of a positive integer.
    pub fn build(d: usize, h: f64) -> Result<SimplexGrid> {
        if !(h > 0.0 && h <= 1.0) {
            return invalid(format!("grid spacing h = {h} must lie in (0, 1]"));
        }
        let m = (1.0 / h).round();
        if (m * h - 1.0).abs() > 1e-9 {
            return invalid(format!("grid spacing h = {h} is not of the form 1/m"));
        }
        SimplexGrid::with_resolution(d, m as usize)
    }

    pub fn with_resolution(d: usize, m: usize) -> Result<SimplexGrid> {
        if d < 2 {
            return invalid(format!("need at least 2 states, got {d}"));
        }
        if m < 1 {
            return invalid("grid resolution must be at least 1");
        }
        let mut counts = Vec::new();
        let mut cur = vec![0u32; d];
        enumerate(&mut cur, 0, m as u32, &mut counts);
        let nodes = counts
            .chunks(d)
            .map(Dist::from_counts)
            .collect::<Vec<_>>();
        let lookup = (d > 3).then(|| {
            counts
                .chunks(d)
                .enumerate()
                .map(|(i, c)| (c.to_vec(), i))
                .collect()
        });
        Ok(SimplexGrid {
            d,
            m,
            counts,
            nodes,
            lookup,
        })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn resolution(&self) -> usize {
        self.m
    }

    pub fn spacing(&self) -> f64 {
        1.0 / self.m as f64
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, i: usize) -> &Dist {
        &self.nodes[i]
    }

    pub fn nodes(&self) -> &[Dist] {
        &self.nodes
    }

    pub fn counts(&self, i: usize) -> &[u32] {
        &self.counts[i * self.d..(i + 1) * self.d]
    }

    /// Node index of a count vector summing to `m`.
    pub fn index_of(&self, counts: &[u32]) -> Option<usize> {
        if counts.len() != self.d || counts.iter().sum::<u32>() as usize != self.m {
            return None;
        }
        Some(match self.d {
            2 => counts[1] as usize,
            3 => {
                let q = self.m - counts[0] as usize;
                q * (q + 1) / 2 + (q - counts[1] as usize)
            }
            _ => *self.lookup.as_ref()?.get(counts)?,
        })
    }

    /// L1-nearest node; among equally near nodes the lexicographically
    /// smallest count vector wins.
    pub fn nearest(&self, v: &[f64]) -> usize {
        let counts = round_counts(v, self.m);
        self.index_of(&counts).expect("rounded counts lie on the grid")
    }

    /// Interpolation stencil at `v`: linear for `d = 2`, Kuhn-simplex
    /// barycentric for `d = 3`, nearest node otherwise.
    pub fn stencil(&self, v: &[f64]) -> Stencil {
        let m = self.m as f64;
        match self.d {
            2 => {
                let s = (v[1] * m).clamp(0.0, m);
                let r = s.round();
                if (s - r).abs() <= 1e-9 {
                    return Stencil::single(r as usize);
                }
                let k = (s.floor() as usize).min(self.m - 1);
                let t = s - k as f64;
                Stencil {
                    nodes: [k, k + 1, 0],
                    weights: [1.0 - t, t, 0.0],
                    len: 2,
                }
            }
            3 => self.kuhn(v),
            _ => Stencil::single(self.nearest(v)),
        }
    }

    fn kuhn(&self, v: &[f64]) -> Stencil {
        let m = self.m as f64;
        let s = (v[0] * m).clamp(0.0, m);
        let t = ((v[0] + v[1]) * m).clamp(s, m);
        let (rs, rt) = (s.round(), t.round());
        if (s - rs).abs() <= 1e-9 && (t - rt).abs() <= 1e-9 {
            return Stencil::single(self.cumulative_index(rs as usize, rt as usize));
        }
        let a = (s.floor() as usize).min(self.m - 1);
        let b = (t.floor() as usize).min(self.m - 1).max(a);
        let fs = (s - a as f64).clamp(0.0, 1.0);
        let ft = (t - b as f64).clamp(0.0, 1.0);
        let (verts, w) = if a < b && fs >= ft {
            ([(a, b), (a + 1, b), (a + 1, b + 1)], [1.0 - fs, fs - ft, ft])
        } else {
            ([(a, b), (a, b + 1), (a + 1, b + 1)], [1.0 - ft, (ft - fs).max(0.0), fs])
        };
        Stencil {
            nodes: verts.map(|(c0, c1)| self.cumulative_index(c0, c1)),
            weights: w,
            len: 3,
        }
    }

    fn cumulative_index(&self, c0: usize, c1: usize) -> usize {
        let q = self.m - c0;
        q * (q + 1) / 2 + (q - (c1 - c0))
    }

    /// Interpolates node values `f(node)` at `v`.
    pub fn interp(&self, v: &[f64], f: impl Fn(usize) -> f64) -> f64 {
        self.stencil(v).iter().map(|(n, w)| w * f(n)).sum()
    }

    /// Pairs of nodes one lattice step apart (unit mass moved between two states).
    pub fn adjacent_pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut c = vec![0u32; self.d];
        for i in 0..self.len() {
            for a in 0..self.d {
                for b in 0..self.d {
                    if a == b || self.counts(i)[a] == 0 {
                        continue;
                    }
                    c.copy_from_slice(self.counts(i));
                    c[a] -= 1;
                    c[b] += 1;
                    if let Some(j) = self.index_of(&c) {
                        if i < j {
                            out.push((i, j));
                        }
                    }
                }
            }
        }
        out
    }
}

fn enumerate(cur: &mut Vec<u32>, pos: usize, left: u32, out: &mut Vec<u32>) {
    if pos + 1 == cur.len() {
        cur[pos] = left;
        out.extend_from_slice(cur);
        return;
    }
    for c in (0..=left).rev() {
        cur[pos] = c;
        enumerate(cur, pos + 1, left - c, out);
    }
}
