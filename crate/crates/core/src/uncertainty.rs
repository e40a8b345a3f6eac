//! Ball-structured uncertainty sets and the adversary's inner problem.
//!
//! For every state `x`, action `u` and population law `v` the admissible
//! next-state laws form a W1 ball around `center(x, u, v)` of radius
//! `radius(x, u, v)`. A kernel family picks one row per (state, action) pair
//! of a finite support and must in addition be `L`-Lipschitz across the
//! support: `w1(p(x1, u1), p(x2, u2)) <= L * (d(x1, x2) + |u1 - u2|)`.
//!
//! [`inner_inf`] minimizes an objective of the rows over that set by a
//! multi-start projected grid search with local refinement. When the
//! objective is affine in one row (the deviating agent's own row), that row is
//! solved for in closed form for `d = 2`.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::simplex::{half_l1, Dist};

/// Slack allowed in membership checks.
pub const TOL_SET: f64 = 1e-8;

const TOL_PROJ: f64 = 1e-12;

pub type CenterFn = dyn Fn(usize, f64, &Dist) -> Dist + Send + Sync;
pub type RadiusFn = dyn Fn(usize, f64, &Dist) -> f64 + Send + Sync;

#[derive(Clone)]
pub struct BallSpec {
    d: usize,
    center: Arc<CenterFn>,
    radius: Arc<RadiusFn>,
    lipschitz: f64,
    r_min: f64,
}

impl fmt::Debug for BallSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BallSpec")
            .field("d", &self.d)
            .field("lipschitz", &self.lipschitz)
            .field("r_min", &self.r_min)
            .finish_non_exhaustive()
    }
}

impl BallSpec {
    pub fn new(
        d: usize,
        center: Arc<CenterFn>,
        radius: Arc<RadiusFn>,
        lipschitz: f64,
        r_min: f64,
    ) -> Result<BallSpec> {
        if d < 2 {
            return invalid("ball spec needs at least 2 states");
        }
        if !(lipschitz > 0.0 && lipschitz.is_finite()) {
            return invalid(format!("Lipschitz constant must be positive, got {lipschitz}"));
        }
        if !(r_min >= 0.0) {
            return invalid(format!("r_min must be nonnegative, got {r_min}"));
        }
        Ok(BallSpec {
            d,
            center,
            radius,
            lipschitz,
            r_min,
        })
    }

    /// Two states. From state 0 action `u` moves to state 1 with probability
    /// `u` up to an error of `eps`; state 1 is absorbing and known exactly.
    pub fn linear_absorbing(eps: f64) -> Result<BallSpec> {
        if !(0.0..=1.0).contains(&eps) {
            return invalid(format!("radius {eps} must lie in [0, 1]"));
        }
        BallSpec::new(
            2,
            Arc::new(|x, u, _| {
                if x == 0 {
                    Dist::normalized(vec![1.0 - u, u])
                } else {
                    Dist::point(2, 1)
                }
            }),
            Arc::new(move |x, _, _| if x == 0 { eps } else { 0.0 }),
            1.0,
            eps,
        )
    }

    /// Centers tabulated on action points (per state), linear in between and
    /// independent of the population; one radius per state.
    pub fn tabulated(
        actions: &[f64],
        centers: Vec<Vec<Dist>>,
        radii: Vec<f64>,
        lipschitz: f64,
    ) -> Result<BallSpec> {
        let d = centers.len();
        if radii.len() != d {
            return invalid(format!("expected {d} radii, got {}", radii.len()));
        }
        for (x, row) in centers.iter().enumerate() {
            if row.len() != actions.len() {
                return invalid(format!(
                    "state {x}: expected {} tabulated centers, got {}",
                    actions.len(),
                    row.len()
                ));
            }
            if let Some(c) = row.iter().find(|c| c.dim() != d) {
                return invalid(format!("state {x}: center of dimension {} in a {d}-state model", c.dim()));
            }
        }
        if let Some(r) = radii.iter().find(|r| !(**r >= 0.0)) {
            return invalid(format!("radius {r} is negative"));
        }
        let r_min = radii.iter().copied().filter(|&r| r > 0.0).fold(f64::INFINITY, f64::min);
        let r_min = if r_min.is_finite() { r_min } else { 0.0 };
        let pts = actions.to_vec();
        BallSpec::new(
            d,
            Arc::new(move |x, u, _| {
                let row = &centers[x];
                let k = pts.partition_point(|&p| p < u);
                if k == 0 {
                    return row[0].clone();
                }
                if k >= pts.len() {
                    return row[pts.len() - 1].clone();
                }
                let t = (u - pts[k - 1]) / (pts[k] - pts[k - 1]);
                row[k - 1].mix(&row[k], t)
            }),
            Arc::new(move |x, _, _| radii[x]),
            lipschitz,
            r_min,
        )
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    pub fn r_min(&self) -> f64 {
        self.r_min
    }

    pub fn center(&self, x: usize, u: f64, v: &Dist) -> Dist {
        (self.center)(x, u, v)
    }

    pub fn radius(&self, x: usize, u: f64, v: &Dist) -> f64 {
        (self.radius)(x, u, v)
    }

    /// Coupling bound between two support points.
    pub fn coupling(&self, a: SupportPoint, b: SupportPoint) -> f64 {
        let ds = if a.state == b.state { 0.0 } else { 1.0 };
        self.lipschitz * (ds + (a.action - b.action).abs())
    }

    /// Checks the declared invariants on random inputs.
    pub fn check_sampled(&self, samples: usize, seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..samples {
            let v = random_dist(&mut rng, self.d);
            let a = SupportPoint::new(rng.gen_range(0..self.d), rng.gen());
            let b = SupportPoint::new(rng.gen_range(0..self.d), rng.gen());
            for p in [a, b] {
                let r = self.radius(p.state, p.action, &v);
                if !(r >= 0.0) {
                    return invalid(format!("negative radius {r} at {p:?}"));
                }
                if r > 0.0 && r < self.r_min - 1e-12 {
                    return invalid(format!("radius {r} below r_min {} at {p:?}", self.r_min));
                }
                let c = self.center(p.state, p.action, &v);
                Dist::new(c.weights().to_vec())
                    .map_err(|e| Error::InvalidArgument(format!("center at {p:?}: {e}")))?;
            }
            let ca = self.center(a.state, a.action, &v);
            let cb = self.center(b.state, b.action, &v);
            let gap = half_l1(ca.weights(), cb.weights()) - self.coupling(a, b);
            if gap > TOL_SET {
                return invalid(format!("centers at {a:?} and {b:?} break the Lipschitz bound by {gap}"));
            }
        }
        Ok(())
    }
}

pub(crate) fn random_dist(rng: &mut impl Rng, d: usize) -> Dist {
    let e: Vec<f64> = (0..d).map(|_| -rng.gen::<f64>().max(1e-300).ln()).collect();
    let s: f64 = e.iter().sum();
    Dist::normalized(e.into_iter().map(|x| x / s).collect())
}

/// A (state, action) pair at which a kernel row is represented.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SupportPoint {
    pub state: usize,
    pub action: f64,
}

impl SupportPoint {
    pub fn new(state: usize, action: f64) -> SupportPoint {
        SupportPoint { state, action }
    }
}

/// One constraint violation found by [`KernelFamily::member`].
#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    Ball { index: usize, slack: f64 },
    Coupling { i: usize, j: usize, slack: f64 },
}

#[derive(Clone, Debug, Default)]
pub struct Membership {
    pub violations: Vec<Violation>,
}

impl Membership {
    pub fn is_member(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Kernel rows on a finite support, conditioned on a population law.
#[derive(Clone, Debug)]
pub struct KernelFamily {
    ball: BallSpec,
    v: Dist,
    support: Vec<SupportPoint>,
    rows: Vec<Dist>,
}

impl KernelFamily {
    pub fn new(ball: &BallSpec, v: Dist, support: Vec<SupportPoint>, rows: Vec<Dist>) -> Result<KernelFamily> {
        let d = ball.dim();
        if v.dim() != d {
            return invalid(format!("population law has dimension {}, ball has {d}", v.dim()));
        }
        if support.len() != rows.len() {
            return invalid(format!("{} support points but {} rows", support.len(), rows.len()));
        }
        if let Some(p) = support.iter().find(|p| p.state >= d) {
            return invalid(format!("support point {p:?} names a state outside 0..{d}"));
        }
        if rows.iter().any(|r| r.dim() != d) {
            return invalid("row dimension differs from the state count");
        }
        Ok(KernelFamily {
            ball: ball.clone(),
            v,
            support,
            rows,
        })
    }

    /// Every row at its ball center.
    pub fn center(ball: &BallSpec, v: &Dist, support: Vec<SupportPoint>) -> Result<KernelFamily> {
        let rows = support.iter().map(|p| ball.center(p.state, p.action, v)).collect();
        KernelFamily::new(ball, v.clone(), support, rows)
    }

    pub(crate) fn from_flat(ball: &BallSpec, v: &Dist, support: &[SupportPoint], flat: &[f64]) -> KernelFamily {
        let d = ball.dim();
        KernelFamily {
            ball: ball.clone(),
            v: v.clone(),
            support: support.to_vec(),
            rows: flat.chunks(d).map(|r| Dist::normalized(r.to_vec())).collect(),
        }
    }

    pub fn ball(&self) -> &BallSpec {
        &self.ball
    }

    pub fn v(&self) -> &Dist {
        &self.v
    }

    pub fn support(&self) -> &[SupportPoint] {
        &self.support
    }

    pub fn rows(&self) -> &[Dist] {
        &self.rows
    }

    /// Row at `(state, action)`, matching the action within 1e-12.
    pub fn row(&self, state: usize, action: f64) -> Option<&Dist> {
        self.support
            .iter()
            .position(|p| p.state == state && (p.action - action).abs() <= 1e-12)
            .map(|i| &self.rows[i])
    }

    pub fn member(&self) -> Membership {
        let mut violations = Vec::new();
        for (i, (p, row)) in self.support.iter().zip(&self.rows).enumerate() {
            let c = self.ball.center(p.state, p.action, &self.v);
            let slack = half_l1(row.weights(), c.weights()) - self.ball.radius(p.state, p.action, &self.v);
            if slack > TOL_SET {
                violations.push(Violation::Ball { index: i, slack });
            }
        }
        for i in 0..self.support.len() {
            for j in i + 1..self.support.len() {
                let w = half_l1(self.rows[i].weights(), self.rows[j].weights());
                let slack = w - self.ball.coupling(self.support[i], self.support[j]);
                if slack > TOL_SET {
                    violations.push(Violation::Coupling { i, j, slack });
                }
            }
        }
        Membership { violations }
    }

    /// Row-wise `(1 - lambda) * self + lambda * other` over the same support.
    pub fn mix(&self, other: &KernelFamily, lambda: f64) -> Result<KernelFamily> {
        if self.support != other.support || self.v != other.v {
            return invalid("families differ in support or population law");
        }
        let rows = self.rows.iter().zip(&other.rows).map(|(a, b)| a.mix(b, lambda)).collect();
        Ok(KernelFamily { rows, ..self.clone() })
    }

    /// Largest row-wise W1 distance to another family on the same support.
    pub fn sup_distance(&self, other: &KernelFamily) -> f64 {
        self.rows
            .iter()
            .zip(&other.rows)
            .map(|(a, b)| half_l1(a.weights(), b.weights()))
            .fold(0.0, f64::max)
    }
}

/// Moves every row toward the ball centers at `target_v` by the uniform
/// factor `lambda` so the result is admissible at `target_v`.
pub fn interpolate_toward_center(family: &KernelFamily, target_v: &Dist) -> Result<KernelFamily> {
    let ball = &family.ball;
    let dist = half_l1(family.v.weights(), target_v.weights());
    let mut lambda: f64 = 1.0;
    for p in &family.support {
        let num = ball.radius(p.state, p.action, target_v);
        let den = ball.radius(p.state, p.action, &family.v) + ball.lipschitz * dist;
        if den == 0.0 {
            if num == 0.0 {
                return Err(Error::DegenerateBall(format!(
                    "zero radius at {p:?} with zero population shift"
                )));
            }
            continue;
        }
        lambda = lambda.min(num / den);
    }
    let rows = family
        .support
        .iter()
        .zip(&family.rows)
        .map(|(p, row)| ball.center(p.state, p.action, target_v).mix(row, lambda))
        .collect();
    KernelFamily::new(ball, target_v.clone(), family.support.clone(), rows)
}

/// Search settings for [`inner_inf`].
#[derive(Clone, Debug, PartialEq)]
pub struct InnerConfig {
    /// Candidate points per row in the coarse pass.
    pub grid: usize,
    /// Local refinement passes around each start.
    pub refine_depth: usize,
    /// Number of coarse candidates refined.
    pub starts: usize,
    /// Cap on the size of one product grid.
    pub budget: usize,
    /// Cap on objective evaluations for one call.
    pub max_evals: usize,
}

impl Default for InnerConfig {
    fn default() -> Self {
        InnerConfig {
            grid: 21,
            refine_depth: 2,
            starts: 2,
            budget: 1600,
            max_evals: 20_000_000,
        }
    }
}

/// The objective handed to [`inner_inf`]. Rows are passed flattened,
/// `d` entries per support point.
pub enum Objective<'a> {
    Rows(&'a mut dyn FnMut(&[f64]) -> f64),
    /// Affine in the row `row`: the closure returns the constant part and
    /// writes the coefficients of that row into the second argument. It must
    /// not read the row itself.
    Affine {
        row: usize,
        f: &'a mut dyn FnMut(&[f64], &mut [f64]) -> f64,
    },
}

#[derive(Clone, Debug)]
pub struct InnerSolution {
    pub rows: Vec<f64>,
    pub value: f64,
    pub evals: usize,
}

impl InnerSolution {
    pub fn row(&self, i: usize, d: usize) -> &[f64] {
        &self.rows[i * d..(i + 1) * d]
    }

    pub fn family(&self, ball: &BallSpec, v: &Dist, support: &[SupportPoint]) -> KernelFamily {
        KernelFamily::from_flat(ball, v, support, &self.rows)
    }
}

/// Convenience form taking an objective over whole families.
pub fn inner_inf_family(
    ball: &BallSpec,
    v: &Dist,
    support: &[SupportPoint],
    mut objective: impl FnMut(&KernelFamily) -> f64,
    cfg: &InnerConfig,
) -> Result<(KernelFamily, f64)> {
    let mut f = |rows: &[f64]| objective(&KernelFamily::from_flat(ball, v, support, rows));
    let sol = inner_inf(ball, v, support, Objective::Rows(&mut f), cfg)?;
    Ok((sol.family(ball, v, support), sol.value))
}

/// Approximate infimum of `objective` over admissible families on `support`.
pub fn inner_inf(
    ball: &BallSpec,
    v: &Dist,
    support: &[SupportPoint],
    objective: Objective<'_>,
    cfg: &InnerConfig,
) -> Result<InnerSolution> {
    if support.is_empty() {
        return invalid("inner problem needs a non-empty support");
    }
    if v.dim() != ball.dim() {
        return invalid("population law and ball differ in dimension");
    }
    if cfg.grid < 2 || cfg.starts == 0 || cfg.budget < 4 {
        return invalid("inner search needs grid >= 2, starts >= 1 and budget >= 4");
    }
    let mut engine = Engine::new(ball, v, support, objective, cfg)?;
    engine.solve()
}

struct Engine<'a> {
    d: usize,
    n: usize,
    centers: Vec<f64>,
    radii: Vec<f64>,
    bounds: Vec<f64>,
    fixed: Vec<bool>,
    free: Vec<usize>,
    linear: Option<usize>,
    objective: Objective<'a>,
    coef: Vec<f64>,
    cfg: InnerConfig,
    evals: usize,
    best_seen: f64,
    scratch: Vec<f64>,
}

type Candidate = (f64, Vec<f64>);

impl<'a> Engine<'a> {
    fn new(
        ball: &BallSpec,
        v: &Dist,
        support: &[SupportPoint],
        objective: Objective<'a>,
        cfg: &InnerConfig,
    ) -> Result<Engine<'a>> {
        let d = ball.dim();
        let n = support.len();
        let mut centers = Vec::with_capacity(n * d);
        let mut radii = Vec::with_capacity(n);
        for p in support {
            if p.state >= d {
                return invalid(format!("support point {p:?} names a state outside 0..{d}"));
            }
            centers.extend_from_slice(ball.center(p.state, p.action, v).weights());
            let r = ball.radius(p.state, p.action, v);
            if !(r >= 0.0) {
                return invalid(format!("negative radius {r} at {p:?}"));
            }
            radii.push(r);
        }
        let mut bounds = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                bounds[i * n + j] = ball.coupling(support[i], support[j]);
            }
        }
        let linear = match &objective {
            Objective::Affine { row, .. } => {
                if *row >= n {
                    return invalid(format!("affine row {row} outside the support"));
                }
                Some(*row)
            }
            Objective::Rows(_) => None,
        };
        let fixed: Vec<bool> = (0..n).map(|i| radii[i] == 0.0 && Some(i) != linear).collect();
        let free = (0..n).filter(|&i| !fixed[i] && Some(i) != linear).collect();
        Ok(Engine {
            d,
            n,
            centers,
            radii,
            bounds,
            fixed,
            free,
            linear,
            objective,
            coef: vec![0.0; d],
            cfg: cfg.clone(),
            evals: 0,
            best_seen: f64::INFINITY,
            scratch: Vec::new(),
        })
    }

    fn row<'b>(&self, rows: &'b [f64], i: usize) -> &'b [f64] {
        &rows[i * self.d..(i + 1) * self.d]
    }

    fn center_row(&self, i: usize) -> &[f64] {
        &self.centers[i * self.d..(i + 1) * self.d]
    }

    fn ball_gap(&self, rows: &[f64], i: usize) -> f64 {
        half_l1(self.row(rows, i), self.center_row(i)) - self.radii[i]
    }

    fn solve(&mut self) -> Result<InnerSolution> {
        let mut base = self.centers.clone();
        let mut pool: Vec<Candidate> = Vec::new();
        let keep = self.cfg.starts;
        if let Some(val) = self.try_candidate(&mut base)? {
            push_top(&mut pool, keep, val, &base);
        }
        let k = self.free.len();
        if k > 0 {
            let res = per_row_points(self.cfg.budget, k).min(self.cfg.grid);
            if self.d == 2 && k > 1 {
                self.comonotone(&base, &mut pool, keep)?;
            }
            if res >= 3 {
                let lists: Vec<Vec<f64>> = self.free.iter().map(|&i| self.coarse(i, res)).collect();
                self.product(&base, &lists, &mut pool, keep)?;
                let starts = pool.clone();
                let mut refined = Vec::new();
                for (val, rows) in starts {
                    refined.push(self.refine(val, rows, res)?);
                }
                for (val, rows) in refined {
                    push_top(&mut pool, keep, val, &rows);
                }
            } else {
                if pool.is_empty() {
                    return Err(Error::InfeasibleSet("no admissible starting family".into()));
                }
                let (val, rows) = pool[0].clone();
                let (val, rows) = self.coordinate(val, rows)?;
                push_top(&mut pool, keep, val, &rows);
            }
        }
        match pool.into_iter().next() {
            Some((value, rows)) => Ok(InnerSolution {
                rows,
                value,
                evals: self.evals,
            }),
            None => Err(Error::InfeasibleSet(
                "no candidate family satisfies the ball and Lipschitz constraints".into(),
            )),
        }
    }

    /// Projects free rows for coupling, completes the affine row and evaluates.
    /// Returns `None` when the candidate is inadmissible.
    fn try_candidate(&mut self, rows: &mut [f64]) -> Result<Option<f64>> {
        let order = self.free.clone();
        self.scratch.clear();
        self.scratch.extend_from_slice(rows);
        let changed = self.project(rows, &order);
        let mut best = if self.admissible(rows) {
            self.evaluate(rows)?
        } else {
            None
        };
        if changed && order.len() > 1 {
            let mut alt = std::mem::take(&mut self.scratch);
            let rev: Vec<usize> = order.iter().rev().copied().collect();
            self.project(&mut alt, &rev);
            if self.admissible(&alt) {
                if let Some(val) = self.evaluate(&mut alt)? {
                    if best.is_none_or(|b| val < b) {
                        rows.copy_from_slice(&alt);
                        best = Some(val);
                    }
                }
            }
            self.scratch = alt;
        }
        Ok(best)
    }

    /// Moves each row in `order` toward already placed rows until their
    /// coupling constraints hold. Fixed rows are placed first.
    fn project(&self, rows: &mut [f64], order: &[usize]) -> bool {
        let d = self.d;
        let mut changed = false;
        for _ in 0..3 {
            let mut moved = false;
            for (pos, &j) in order.iter().enumerate() {
                let placed = (0..self.n)
                    .filter(|&i| self.fixed[i])
                    .chain(order[..pos].iter().copied());
                for i in placed {
                    let c = self.bounds[i * self.n + j];
                    let w = half_l1(self.row(rows, i), self.row(rows, j));
                    if w > c + TOL_PROJ {
                        let t = c / w;
                        for y in 0..d {
                            let a = rows[i * d + y];
                            rows[j * d + y] = a + t * (rows[j * d + y] - a);
                        }
                        moved = true;
                    }
                }
            }
            if !moved {
                break;
            }
            changed = true;
        }
        changed
    }

    fn admissible(&self, rows: &[f64]) -> bool {
        for i in 0..self.n {
            if Some(i) == self.linear {
                continue;
            }
            if self.ball_gap(rows, i) > TOL_PROJ * 10.0 {
                return false;
            }
            for j in i + 1..self.n {
                if Some(j) == self.linear {
                    continue;
                }
                if half_l1(self.row(rows, i), self.row(rows, j)) > self.bounds[i * self.n + j] + TOL_PROJ * 10.0 {
                    return false;
                }
            }
        }
        true
    }

    fn evaluate(&mut self, rows: &mut [f64]) -> Result<Option<f64>> {
        self.evals += 1;
        if self.evals > self.cfg.max_evals {
            return Err(Error::NonConvergence {
                what: "inner infimum search".into(),
                iterations: self.evals,
                best: self.best_seen,
            });
        }
        let val = match self.linear {
            None => match &mut self.objective {
                Objective::Rows(f) => f(rows),
                Objective::Affine { .. } => unreachable!(),
            },
            Some(l) => {
                let Objective::Affine { f, .. } = &mut self.objective else {
                    unreachable!()
                };
                let mut coef = std::mem::take(&mut self.coef);
                let c = f(rows, &mut coef);
                let row = self.affine_row(rows, l, &coef);
                self.coef = coef;
                match row {
                    Some(val) => c + val,
                    None => return Ok(None),
                }
            }
        };
        if val < self.best_seen {
            self.best_seen = val;
        }
        Ok(Some(val))
    }

    /// Minimizes `<coef, row_l>` over the admissible positions of row `l`
    /// given all other rows, writes the minimizer and returns the minimum.
    fn affine_row(&self, rows: &mut [f64], l: usize, coef: &[f64]) -> Option<f64> {
        let d = self.d;
        if d == 2 {
            let c1 = self.centers[l * 2 + 1];
            let mut lo = (c1 - self.radii[l]).max(0.0);
            let mut hi = (c1 + self.radii[l]).min(1.0);
            for i in 0..self.n {
                if i == l {
                    continue;
                }
                let p = rows[i * 2 + 1];
                let b = self.bounds[i * self.n + l];
                lo = lo.max(p - b);
                hi = hi.min(p + b);
            }
            if lo > hi + TOL_PROJ {
                return None;
            }
            let hi = hi.max(lo);
            let p = if coef[1] - coef[0] < 0.0 { hi } else { lo };
            rows[l * 2] = 1.0 - p;
            rows[l * 2 + 1] = p;
            return Some(coef[0] * (1.0 - p) + coef[1] * p);
        }
        let cands = self.coarse(l, 2 * self.cfg.grid);
        let mut best: Option<(f64, Vec<f64>)> = None;
        let consider = |cand: &[f64], rows: &[f64], best: &mut Option<(f64, Vec<f64>)>| {
            let mut q = cand.to_vec();
            for i in 0..self.n {
                if i == l {
                    continue;
                }
                let b = self.bounds[i * self.n + l];
                let other = self.row(rows, i);
                let w = half_l1(other, &q);
                if w > b + TOL_PROJ {
                    let t = b / w;
                    for y in 0..d {
                        q[y] = other[y] + t * (q[y] - other[y]);
                    }
                }
            }
            if half_l1(&q, self.center_row(l)) > self.radii[l] + TOL_PROJ * 10.0 {
                return;
            }
            for i in 0..self.n {
                if i != l && half_l1(self.row(rows, i), &q) > self.bounds[i * self.n + l] + TOL_PROJ * 10.0 {
                    return;
                }
            }
            let val: f64 = q.iter().zip(coef).map(|(a, b)| a * b).sum();
            if best.as_ref().is_none_or(|(b, _)| val < *b) {
                *best = Some((val, q));
            }
        };
        for cand in cands.chunks(d) {
            consider(cand, rows, &mut best);
        }
        let mut step = self.radii[l].max(1e-3) / self.cfg.grid as f64;
        for _ in 0..self.cfg.refine_depth + 1 {
            let Some((_, cur)) = best.clone() else { break };
            let local = self.local(l, &cur, step, self.cfg.grid);
            for cand in local.chunks(d) {
                consider(cand, rows, &mut best);
            }
            step /= 2.0;
        }
        let (val, q) = best?;
        rows[l * d..(l + 1) * d].copy_from_slice(&q);
        Some(val)
    }

    /// Coarse candidate rows for row `i`, flattened.
    fn coarse(&self, i: usize, res: usize) -> Vec<f64> {
        let d = self.d;
        let c = self.center_row(i).to_vec();
        let r = self.radii[i];
        let mut out = Vec::new();
        if d == 2 {
            let lo = (c[1] - r).max(0.0);
            let hi = (c[1] + r).min(1.0);
            let mut has_center = false;
            for k in 0..res {
                let p = if res == 1 { lo } else { lo + (hi - lo) * k as f64 / (res - 1) as f64 };
                has_center |= (p - c[1]).abs() < 1e-15;
                out.extend_from_slice(&[1.0 - p, p]);
            }
            if !has_center {
                out.extend_from_slice(&c);
            }
            return out;
        }
        out.extend_from_slice(&c);
        let mut m = 1;
        while 2 * binom(m + d - 1, d - 1) + 1 < res {
            m += 1;
        }
        let mut lattice = Vec::new();
        let mut cur = vec![0u32; d];
        lattice_points(&mut cur, 0, m as u32, &mut lattice);
        for q in lattice.chunks(d) {
            let q: Vec<f64> = q.iter().map(|&k| k as f64 / m as f64).collect();
            let w = half_l1(&q, &c);
            if w <= 1e-15 {
                continue;
            }
            let t = (r / w).min(1.0);
            out.extend(c.iter().zip(&q).map(|(a, b)| a + t * (b - a)));
            if r < 1.0 {
                out.extend(c.iter().zip(&q).map(|(a, b)| a + r * (b - a)));
            }
        }
        let count = out.len() / d;
        if count > res {
            let mut thin = Vec::with_capacity(res * d);
            for k in 0..res {
                let idx = k * (count - 1) / (res - 1).max(1);
                thin.extend_from_slice(&out[idx * d..(idx + 1) * d]);
            }
            out = thin;
        }
        out
    }

    /// Candidates near `around` at scale `step`, kept inside row `i`'s ball.
    fn local(&self, i: usize, around: &[f64], step: f64, res: usize) -> Vec<f64> {
        let d = self.d;
        let c = self.center_row(i);
        let r = self.radii[i];
        let mut out = Vec::new();
        if d == 2 {
            let lo = (c[1] - r).max(0.0).max(around[1] - step);
            let hi = (c[1] + r).min(1.0).min(around[1] + step);
            for k in 0..res {
                let p = lo + (hi - lo) * k as f64 / (res - 1) as f64;
                out.extend_from_slice(&[1.0 - p, p]);
            }
            return out;
        }
        out.extend_from_slice(around);
        let reach = ((res.saturating_sub(1)) / (d * (d - 1))).max(1);
        for a in 0..d {
            for b in 0..d {
                if a == b {
                    continue;
                }
                for k in 1..=reach {
                    let s = step * k as f64 / reach as f64;
                    if around[b] < s {
                        continue;
                    }
                    let mut q = around.to_vec();
                    q[a] += s;
                    q[b] -= s;
                    let w = half_l1(&q, c);
                    if w > r {
                        let t = r / w;
                        for y in 0..d {
                            q[y] = c[y] + t * (q[y] - c[y]);
                        }
                    }
                    out.extend_from_slice(&q);
                }
            }
        }
        out
    }

    /// All free rows at the same relative position inside their intervals.
    fn comonotone(&mut self, base: &[f64], pool: &mut Vec<Candidate>, keep: usize) -> Result<()> {
        let g = self.cfg.grid;
        let mut rows = base.to_vec();
        for k in 0..g {
            let t = k as f64 / (g - 1) as f64;
            for &i in &self.free {
                let c1 = self.centers[i * 2 + 1];
                let lo = (c1 - self.radii[i]).max(0.0);
                let hi = (c1 + self.radii[i]).min(1.0);
                let p = lo + t * (hi - lo);
                rows[i * 2] = 1.0 - p;
                rows[i * 2 + 1] = p;
            }
            if let Some(val) = self.try_candidate(&mut rows)? {
                push_top(pool, keep, val, &rows);
            }
        }
        Ok(())
    }

    /// Exhaustive search over the product of per-row candidate lists.
    fn product(&mut self, base: &[f64], lists: &[Vec<f64>], pool: &mut Vec<Candidate>, keep: usize) -> Result<()> {
        let d = self.d;
        let sizes: Vec<usize> = lists.iter().map(|l| l.len() / d).collect();
        if sizes.contains(&0) {
            return Ok(());
        }
        let free = self.free.clone();
        let mut idx = vec![0usize; lists.len()];
        let mut rows = base.to_vec();
        loop {
            for (slot, &i) in free.iter().enumerate() {
                let k = idx[slot];
                rows[i * d..(i + 1) * d].copy_from_slice(&lists[slot][k * d..(k + 1) * d]);
            }
            if let Some(val) = self.try_candidate(&mut rows)? {
                push_top(pool, keep, val, &rows);
            }
            let mut pos = lists.len();
            loop {
                if pos == 0 {
                    return Ok(());
                }
                pos -= 1;
                idx[pos] += 1;
                if idx[pos] < sizes[pos] {
                    break;
                }
                idx[pos] = 0;
            }
        }
    }

    fn refine(&mut self, mut val: f64, mut rows: Vec<f64>, res: usize) -> Result<Candidate> {
        let d = self.d;
        let mut steps: Vec<f64> = self
            .free
            .iter()
            .map(|&i| {
                if d == 2 {
                    let c1 = self.centers[i * 2 + 1];
                    let lo = (c1 - self.radii[i]).max(0.0);
                    let hi = (c1 + self.radii[i]).min(1.0);
                    (hi - lo) / (res - 1) as f64
                } else {
                    self.radii[i] / 2.0
                }
            })
            .collect();
        for _ in 0..self.cfg.refine_depth {
            let lists: Vec<Vec<f64>> = self
                .free
                .iter()
                .zip(&steps)
                .map(|(&i, &s)| self.local(i, self.row(&rows, i), s, res))
                .collect();
            let mut local_pool = vec![(val, rows.clone())];
            self.product(&rows.clone(), &lists, &mut local_pool, 1)?;
            (val, rows) = local_pool.swap_remove(0);
            for s in steps.iter_mut() {
                *s = if d == 2 { 2.0 * *s / (res - 1) as f64 } else { *s / 2.0 };
            }
        }
        Ok((val, rows))
    }

    /// One row at a time, for supports too large for a joint grid.
    fn coordinate(&mut self, mut val: f64, mut rows: Vec<f64>) -> Result<Candidate> {
        let d = self.d;
        let g = self.cfg.grid;
        let free = self.free.clone();
        let mut steps: Vec<f64> = free.iter().map(|&i| self.radii[i]).collect();
        for pass in 0..self.cfg.refine_depth + 4 {
            let mut improved = false;
            for (slot, &j) in free.iter().enumerate() {
                let cands = if pass < 2 {
                    self.coarse(j, g)
                } else {
                    self.local(j, self.row(&rows, j), steps[slot], g.min(9))
                };
                let order: Vec<usize> = free.iter().copied().filter(|&i| i != j).chain([j]).collect();
                for cand in cands.chunks(d) {
                    let mut trial = rows.clone();
                    trial[j * d..(j + 1) * d].copy_from_slice(cand);
                    self.project(&mut trial, &order);
                    if !self.admissible(&trial) {
                        continue;
                    }
                    if let Some(v) = self.evaluate(&mut trial)? {
                        if v < val {
                            val = v;
                            rows = trial;
                            improved = true;
                        }
                    }
                }
            }
            if pass >= 2 {
                for s in steps.iter_mut() {
                    *s /= 4.0;
                }
            }
            if !improved && pass >= 2 {
                break;
            }
        }
        Ok((val, rows))
    }
}

fn push_top(pool: &mut Vec<Candidate>, keep: usize, val: f64, rows: &[f64]) {
    if pool.len() >= keep && val >= pool[pool.len() - 1].0 {
        return;
    }
    if pool.iter().any(|(v, r)| *v == val && r.as_slice() == rows) {
        return;
    }
    let pos = pool.partition_point(|(v, _)| *v <= val);
    pool.insert(pos, (val, rows.to_vec()));
    pool.truncate(keep);
}

fn per_row_points(budget: usize, k: usize) -> usize {
    let mut g = (budget as f64).powf(1.0 / k as f64).floor() as usize;
    while g > 1 && g.checked_pow(k as u32).is_none_or(|p| p > budget) {
        g -= 1;
    }
    while (g + 1).checked_pow(k as u32).is_some_and(|p| p <= budget) {
        g += 1;
    }
    g
}

fn binom(n: usize, k: usize) -> usize {
    let mut r = 1usize;
    for i in 0..k {
        r = r * (n - i) / (i + 1);
    }
    r
}

fn lattice_points(cur: &mut Vec<u32>, pos: usize, left: u32, out: &mut Vec<u32>) {
    if pos + 1 == cur.len() {
        cur[pos] = left;
        out.extend_from_slice(cur);
        return;
    }
    for c in (0..=left).rev() {
        cur[pos] = c;
        lattice_points(cur, pos + 1, left - c, out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn two_state() -> BallSpec {
        BallSpec::linear_absorbing(0.2).unwrap()
    }

    #[test]
    fn member_examples() {
        let ball = two_state();
        let v = Dist::uniform(2);
        let fam = KernelFamily::center(&ball, &v, vec![SupportPoint::new(0, 0.5), SupportPoint::new(1, 0.3)]).unwrap();
        assert!(fam.member().is_member());

        let fam = KernelFamily::new(
            &ball,
            v.clone(),
            vec![SupportPoint::new(0, 0.5)],
            vec![Dist::new(vec![0.2, 0.8]).unwrap()],
        )
        .unwrap();
        let m = fam.member();
        assert_eq!(m.violations.len(), 1);
        match m.violations[0] {
            Violation::Ball { index: 0, slack } => assert_abs_diff_eq!(slack, 0.1, epsilon = 1e-12),
            ref other => panic!("unexpected {other:?}"),
        }

        let wide = BallSpec::linear_absorbing(1.0).unwrap();
        let fam = KernelFamily::new(
            &wide,
            v,
            vec![SupportPoint::new(0, 0.0), SupportPoint::new(0, 1.0)],
            vec![Dist::point(2, 0), Dist::point(2, 1)],
        )
        .unwrap();
        assert!(fam.member().is_member());
    }

    fn constant_ball(r: f64) -> BallSpec {
        BallSpec::new(
            2,
            Arc::new(|_, u, v: &Dist| Dist::normalized(vec![1.0 - 0.5 * (u + v[1]), 0.5 * (u + v[1])])),
            Arc::new(move |_, _, _| r),
            1.0,
            r,
        )
        .unwrap()
    }

    #[test]
    fn interpolation_weight() {
        let ball = constant_ball(0.2);
        let v = Dist::new(vec![0.6, 0.4]).unwrap();
        let target = Dist::new(vec![0.5, 0.5]).unwrap();
        let support = vec![SupportPoint::new(0, 0.4)];
        let row = Dist::new(vec![0.4, 0.6]).unwrap();
        let fam = KernelFamily::new(&ball, v.clone(), support, vec![row.clone()]).unwrap();
        assert!(fam.member().is_member());

        let same = interpolate_toward_center(&fam, &v).unwrap();
        assert_eq!(same.rows(), fam.rows());

        let out = interpolate_toward_center(&fam, &target).unwrap();
        let c = ball.center(0, 0.4, &target);
        let lambda = 0.2 / 0.3;
        assert_abs_diff_eq!(out.rows()[0][1], (1.0 - lambda) * c[1] + lambda * row[1], epsilon = 1e-12);
        assert!(out.member().is_member());
    }

    #[test]
    fn degenerate_ball() {
        let ball = two_state();
        let v = Dist::uniform(2);
        let fam = KernelFamily::center(&ball, &v, vec![SupportPoint::new(1, 0.0)]).unwrap();
        assert!(matches!(interpolate_toward_center(&fam, &v), Err(Error::DegenerateBall(_))));
    }

    #[test]
    fn zero_radius_returns_center() {
        let ball = BallSpec::linear_absorbing(0.0).unwrap();
        let v = Dist::uniform(2);
        let support = [SupportPoint::new(0, 0.3), SupportPoint::new(1, 0.7)];
        let (fam, val) = inner_inf_family(&ball, &v, &support, |f| f.rows()[0][1], &InnerConfig::default()).unwrap();
        assert_abs_diff_eq!(val, 0.3, epsilon = 1e-15);
        assert_abs_diff_eq!(fam.rows()[0][1], 0.3, epsilon = 1e-15);
    }

    #[test]
    fn comparison_instance() {
        let ball = two_state();
        let v = Dist::new(vec![0.7, 0.3]).unwrap();
        let u_tilde = 0.1621;
        let support = [SupportPoint::new(0, 0.26), SupportPoint::new(0, u_tilde)];
        let obj = |f: &KernelFamily| (1.0 - f.rows()[0][1]) * (0.3 + 0.7 * f.rows()[1][1]).powi(2);
        let (fam, val) = inner_inf_family(&ball, &v, &support, obj, &InnerConfig::default()).unwrap();
        assert!(fam.member().is_member());
        assert_abs_diff_eq!(fam.rows()[1][1], 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(fam.rows()[0][1], 0.26 - u_tilde, epsilon = 1e-9);
        assert!((val - 0.0812).abs() < 5e-4);

        // the affine form of the same problem
        let mut f = |rows: &[f64], coef: &mut [f64]| {
            let pop = (0.3 + 0.7 * rows[3]).powi(2);
            coef[0] = pop;
            coef[1] = 0.0;
            0.0
        };
        let sol = inner_inf(&ball, &v, &support, Objective::Affine { row: 0, f: &mut f }, &InnerConfig::default()).unwrap();
        assert_abs_diff_eq!(sol.value, val, epsilon = 1e-12);
    }

    #[test]
    fn refinement_never_hurts() {
        let ball = constant_ball(0.3);
        let v = Dist::new(vec![0.45, 0.55]).unwrap();
        let support = [SupportPoint::new(0, 0.2), SupportPoint::new(0, 0.35), SupportPoint::new(1, 0.9)];
        let obj = |f: &KernelFamily| {
            let r = f.rows();
            (r[0][1] - 0.41).powi(2) + (r[1][1] - 0.123).abs() + (r[2][1] - 0.77).powi(2) * r[0][0]
        };
        let mut last = f64::INFINITY;
        for depth in 0..4 {
            let cfg = InnerConfig { refine_depth: depth, ..Default::default() };
            let (fam, val) = inner_inf_family(&ball, &v, &support, obj, &cfg).unwrap();
            assert!(fam.member().is_member());
            assert!(val <= last + 1e-15);
            last = val;
        }
    }

    #[test]
    fn three_states() {
        let ball = BallSpec::new(
            3,
            Arc::new(|x, u, _| {
                let mut w = vec![0.2; 3];
                w[x] += 0.4 * (1.0 - u);
                w[(x + 1) % 3] += 0.4 * u;
                Dist::normalized(w)
            }),
            Arc::new(|_, _, _| 0.15),
            1.0,
            0.15,
        )
        .unwrap();
        let v = Dist::uniform(3);
        let support = [SupportPoint::new(0, 0.5), SupportPoint::new(1, 0.5)];
        let obj = |f: &KernelFamily| f.rows()[0][2] + f.rows()[1][0];
        let (fam, val) = inner_inf_family(&ball, &v, &support, obj, &InnerConfig::default()).unwrap();
        assert!(fam.member().is_member());
        // each row can shed 0.15 of the targeted mass
        assert!((val - (0.2 - 0.15 + 0.2 - 0.15)).abs() < 1e-3);
    }

    #[test]
    fn many_rows_fall_back_to_coordinates() {
        let ball = constant_ball(0.2);
        let v = Dist::uniform(2);
        let support: Vec<SupportPoint> = (0..9).map(|k| SupportPoint::new(0, 0.1 * k as f64)).collect();
        let obj = |f: &KernelFamily| f.rows().iter().map(|r| r[1]).sum::<f64>();
        let (fam, val) = inner_inf_family(&ball, &v, &support, obj, &InnerConfig::default()).unwrap();
        assert!(fam.member().is_member());
        let want: f64 = support.iter().map(|p| (0.5 * (p.action + 0.5) - 0.2).max(0.0)).sum();
        assert_abs_diff_eq!(val, want, epsilon = 1e-9);
    }
}
