//! Exact optimal transport between small empirical measures on `R^d x F`.
//!
//! Two independent solvers, kept separate on purpose so they can check each
//! other: a shortest-augmenting-path assignment solver for uniform measures
//! with equally many atoms (Jonker-Volgenant style, O(n^3)), and a
//! transportation simplex with Bland's anti-cycling rule for general weights.
//! `ot_exact` picks the assignment route when it applies; both routes return
//! a transport plan whose marginals are checked against the inputs.
//!
//! Costs are evaluated from one of three forms. `PowerMetric` is `d(x, y)^q`
//! on the continuous component alone. `TruncatedD` is the product-space
//! distance `1_{i != j} + 1_{i = j} min(d^q, 1)`, the metric under which the
//! couplings contract. `WeightedTilde { delta }` is the cost
//! `sqrt((1_{i != j} + 1_{i = j} min(d^q / delta, 1)) (1 + d^q(x, x0) + d^q(y, x0)))`,
//! a cost function rather than a metric (no triangle inequality), used to
//! compare against weighted contraction bounds.

use nalgebra::{DMatrix, DVector};

use crate::model::{MetricSpec, RegimeId};
use crate::{Error, Result};

/// Atom limit for the assignment route.
pub const MAX_ASSIGNMENT: usize = 512;
/// Atom limit per side for the transportation simplex route.
pub const MAX_SIMPLEX: usize = 128;

/// Finitely supported probability measure on `R^d x F`.
#[derive(Debug, Clone)]
pub struct EmpiricalMeasure {
    pub points: Vec<(RegimeId, DVector<f64>)>,
    pub weights: Vec<f64>,
}

impl EmpiricalMeasure {
    /// Uniform weights `1/n`.
    pub fn uniform(points: Vec<(RegimeId, DVector<f64>)>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::domain("empirical measure needs at least one atom"));
        }
        let n = points.len();
        Ok(EmpiricalMeasure {
            points,
            weights: vec![1.0 / n as f64; n],
        })
    }

    /// Explicit nonnegative weights, normalized to total mass one.
    pub fn weighted(points: Vec<(RegimeId, DVector<f64>)>, weights: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::domain("empirical measure needs at least one atom"));
        }
        if points.len() != weights.len() {
            return Err(Error::shape(format!(
                "{} atoms but {} weights",
                points.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|&w| !w.is_finite() || w < 0.0) {
            return Err(Error::domain("weights must be finite and nonnegative"));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::domain("weights must have positive total mass"));
        }
        Ok(EmpiricalMeasure {
            points,
            weights: weights.into_iter().map(|w| w / total).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn is_uniform(&self) -> bool {
        let n = self.len() as f64;
        self.weights.iter().all(|&w| (w - 1.0 / n).abs() <= 1e-15)
    }
}

/// Cost functional on `R^d x F` pairs; see the module docs for formulas.
#[derive(Debug, Clone, PartialEq)]
pub enum TransportCost {
    PowerMetric,
    TruncatedD,
    WeightedTilde { delta: f64 },
}

/// Evaluate the cost between `(i, x)` and `(j, y)`.
pub fn eval_cost(
    cost: &TransportCost,
    metric: &MetricSpec,
    i: RegimeId,
    x: &DVector<f64>,
    j: RegimeId,
    y: &DVector<f64>,
) -> f64 {
    match cost {
        TransportCost::PowerMetric => metric.dq(x, y),
        TransportCost::TruncatedD => {
            if i != j {
                1.0
            } else {
                metric.dq(x, y).min(1.0)
            }
        }
        TransportCost::WeightedTilde { delta } => {
            let base = if i != j {
                1.0
            } else {
                (metric.dq(x, y) / delta).min(1.0)
            };
            let weight = 1.0 + metric.dq(x, &metric.x0) + metric.dq(y, &metric.x0);
            (base * weight).sqrt()
        }
    }
}

/// One entry of a transport plan: mass moved from atom `from` of the first
/// measure to atom `to` of the second.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanEntry {
    pub from: usize,
    pub to: usize,
    pub mass: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OtRoute {
    Assignment,
    Simplex,
}

#[derive(Debug, Clone)]
pub struct OtSolution {
    pub value: f64,
    pub plan: Vec<PlanEntry>,
    pub route: OtRoute,
}

/// Dense cost matrix between the atoms of two measures.
pub fn cost_matrix(
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
    cost: &TransportCost,
    metric: &MetricSpec,
) -> DMatrix<f64> {
    DMatrix::from_fn(mu.len(), nu.len(), |k, l| {
        let (i, x) = &mu.points[k];
        let (j, y) = &nu.points[l];
        eval_cost(cost, metric, *i, x, *j, y)
    })
}

/// Exact optimal transport cost and an optimal plan.
///
/// Uniform measures with equally many atoms (up to 512) go through the
/// assignment solver; anything else (up to 128 atoms per side) goes through
/// the transportation simplex. Plan marginals are verified to 1e-12 before
/// returning.
pub fn ot_exact(
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
    cost: &TransportCost,
    metric: &MetricSpec,
) -> Result<OtSolution> {
    if let TransportCost::WeightedTilde { delta } = cost {
        if !(*delta > 0.0) {
            return Err(Error::domain("weighted-tilde delta must be positive"));
        }
    }
    let c = cost_matrix(mu, nu, cost, metric);
    let solution = if mu.len() == nu.len() && mu.is_uniform() && nu.is_uniform() {
        if mu.len() > MAX_ASSIGNMENT {
            return Err(Error::unsupported(format!(
                "assignment route caps at {MAX_ASSIGNMENT} atoms, got {}",
                mu.len()
            )));
        }
        let (perm, total) = solve_assignment(&c);
        let mass = 1.0 / mu.len() as f64;
        let plan: Vec<PlanEntry> = perm
            .iter()
            .enumerate()
            .map(|(k, &l)| PlanEntry {
                from: k,
                to: l,
                mass,
            })
            .collect();
        OtSolution {
            value: total * mass,
            plan,
            route: OtRoute::Assignment,
        }
    } else {
        if mu.len() > MAX_SIMPLEX || nu.len() > MAX_SIMPLEX {
            return Err(Error::unsupported(format!(
                "simplex route caps at {MAX_SIMPLEX} atoms per side, got {}x{}",
                mu.len(),
                nu.len()
            )));
        }
        let plan = transportation_simplex(&c, &mu.weights, &nu.weights)?;
        let value = plan.iter().map(|e| e.mass * c[(e.from, e.to)]).sum();
        OtSolution {
            value,
            plan,
            route: OtRoute::Simplex,
        }
    };

    check_marginals(&solution.plan, &mu.weights, &nu.weights)?;
    Ok(solution)
}

fn check_marginals(plan: &[PlanEntry], a: &[f64], b: &[f64]) -> Result<()> {
    let mut row = vec![0.0; a.len()];
    let mut col = vec![0.0; b.len()];
    for e in plan {
        row[e.from] += e.mass;
        col[e.to] += e.mass;
    }
    let err_row = row
        .iter()
        .zip(a)
        .map(|(r, w)| (r - w).abs())
        .fold(0.0f64, f64::max);
    let err_col = col
        .iter()
        .zip(b)
        .map(|(r, w)| (r - w).abs())
        .fold(0.0f64, f64::max);
    if err_row > 1e-12 || err_col > 1e-12 {
        return Err(Error::numerical(format!(
            "transport plan marginal error {:.3e}",
            err_row.max(err_col)
        )));
    }
    Ok(())
}

/// Exact minimum-cost perfect matching by shortest augmenting paths with dual
/// potentials. Returns the column assigned to each row and the total cost.
pub fn solve_assignment(cost: &DMatrix<f64>) -> (Vec<usize>, f64) {
    let n = cost.nrows();
    assert_eq!(n, cost.ncols(), "assignment needs a square cost matrix");
    // 1-based arrays; p[j] is the row matched to column j, 0 meaning none.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0usize; n];
    for j in 1..=n {
        assign[p[j] - 1] = j - 1;
    }
    let total = (0..n).map(|i| cost[(i, assign[i])]).sum();
    (assign, total)
}

/// Transportation simplex with a northwest-corner start and Bland's rule.
///
/// The basis is a spanning tree on the bipartite graph of sources and sinks;
/// duals are propagated over the tree, the entering arc is the
/// lowest-indexed one with reduced cost below -1e-12, and the leaving arc is
/// the lowest-indexed minimum-flow arc on the alternating cycle, which
/// guarantees termination under degeneracy.
fn transportation_simplex(cost: &DMatrix<f64>, a: &[f64], b: &[f64]) -> Result<Vec<PlanEntry>> {
    let n = a.len();
    let m = b.len();
    let ta: f64 = a.iter().sum();
    let tb: f64 = b.iter().sum();
    if (ta - tb).abs() > 1e-12 {
        return Err(Error::domain(format!(
            "unbalanced transport problem: masses {ta} vs {tb}"
        )));
    }

    // Northwest-corner initial basis: exactly n + m - 1 cells, some possibly
    // carrying zero flow.
    let mut flow: Vec<Vec<f64>> = vec![vec![0.0; m]; n];
    let mut basic: Vec<Vec<bool>> = vec![vec![false; m]; n];
    {
        let mut ra: Vec<f64> = a.to_vec();
        let mut rb: Vec<f64> = b.to_vec();
        let (mut i, mut j) = (0usize, 0usize);
        loop {
            let t = ra[i].min(rb[j]);
            flow[i][j] = t;
            basic[i][j] = true;
            ra[i] -= t;
            rb[j] -= t;
            if i == n - 1 && j == m - 1 {
                break;
            }
            // Advance along the row or the column; ties advance the row
            // unless it is exhausted, keeping the basis a tree.
            if ra[i] <= rb[j] && i < n - 1 {
                i += 1;
            } else if j < m - 1 {
                j += 1;
            } else {
                i += 1;
            }
        }
    }

    let node = |is_col: bool, k: usize| if is_col { n + k } else { k };
    let max_iter = 200_000;
    for _ in 0..max_iter {
        // Duals over the basis tree: u[0] = 0, then c_ij = u_i + v_j on
        // basic arcs.
        let mut u = vec![f64::NAN; n];
        let mut v = vec![f64::NAN; m];
        u[0] = 0.0;
        let mut stack = vec![node(false, 0)];
        while let Some(x) = stack.pop() {
            if x < n {
                for j in 0..m {
                    if basic[x][j] && v[j].is_nan() {
                        v[j] = cost[(x, j)] - u[x];
                        stack.push(node(true, j));
                    }
                }
            } else {
                let j = x - n;
                for i in 0..n {
                    if basic[i][j] && u[i].is_nan() {
                        u[i] = cost[(i, j)] - v[j];
                        stack.push(node(false, i));
                    }
                }
            }
        }
        if u.iter().any(|x| x.is_nan()) || v.iter().any(|x| x.is_nan()) {
            return Err(Error::numerical("transport basis lost connectivity"));
        }

        // Entering arc: Bland's rule.
        let mut entering = None;
        'scan: for i in 0..n {
            for j in 0..m {
                if !basic[i][j] && cost[(i, j)] - u[i] - v[j] < -1e-12 {
                    entering = Some((i, j));
                    break 'scan;
                }
            }
        }
        let Some((ei, ej)) = entering else {
            // Optimal: collect positive flows plus degenerate basics with
            // zero mass filtered out.
            let mut plan = Vec::new();
            for i in 0..n {
                for j in 0..m {
                    if basic[i][j] && flow[i][j] > 0.0 {
                        plan.push(PlanEntry {
                            from: i,
                            to: j,
                            mass: flow[i][j],
                        });
                    }
                }
            }
            return Ok(plan);
        };

        // Unique cycle: path from source ei to sink ej through the basis
        // tree, found by BFS over basic arcs.
        let total_nodes = n + m;
        let mut parent = vec![usize::MAX; total_nodes];
        let mut parent_arc = vec![(usize::MAX, usize::MAX); total_nodes];
        let start = node(false, ei);
        let goal = node(true, ej);
        let mut queue = std::collections::VecDeque::new();
        parent[start] = start;
        queue.push_back(start);
        while let Some(x) = queue.pop_front() {
            if x == goal {
                break;
            }
            if x < n {
                for j in 0..m {
                    if basic[x][j] && parent[node(true, j)] == usize::MAX {
                        parent[node(true, j)] = x;
                        parent_arc[node(true, j)] = (x, j);
                        queue.push_back(node(true, j));
                    }
                }
            } else {
                let jj = x - n;
                for i in 0..n {
                    if basic[i][jj] && parent[node(false, i)] == usize::MAX {
                        parent[node(false, i)] = x;
                        parent_arc[node(false, i)] = (i, jj);
                        queue.push_back(node(false, i));
                    }
                }
            }
        }
        if parent[goal] == usize::MAX {
            return Err(Error::numerical("transport basis lost connectivity"));
        }

        // Walk back from the sink: arcs alternate minus/plus starting with
        // the entering arc as plus.
        let mut cycle = Vec::new();
        let mut x = goal;
        while x != start {
            cycle.push(parent_arc[x]);
            x = parent[x];
        }
        // cycle[0] is the basic arc incident to the entering sink: it is a
        // "minus" arc, then signs alternate along the path.
        let mut theta = f64::INFINITY;
        let mut leave = (usize::MAX, usize::MAX);
        for (k, &(i, j)) in cycle.iter().enumerate() {
            if k % 2 == 0 {
                let f = flow[i][j];
                // Bland-style leaving choice: strict improvement ties broken
                // by first occurrence in the fixed scan order.
                if f < theta - 1e-15 {
                    theta = f;
                    leave = (i, j);
                }
            }
        }
        if leave.0 == usize::MAX {
            return Err(Error::numerical("degenerate cycle without leaving arc"));
        }
        flow[ei][ej] += theta;
        basic[ei][ej] = true;
        for (k, &(i, j)) in cycle.iter().enumerate() {
            if k % 2 == 0 {
                flow[i][j] -= theta;
            } else {
                flow[i][j] += theta;
            }
        }
        basic[leave.0][leave.1] = false;
        flow[leave.0][leave.1] = 0.0;
    }
    Err(Error::numerical(
        "transportation simplex exceeded its iteration budget",
    ))
}

/// Exact `W_1` between two equal-size uniform samples on the line: the mean
/// absolute difference of order statistics. Agrees with `ot_exact` for the
/// `PowerMetric` cost with `q = 1` and scalar metric `M = [1]`; for `q < 1`
/// it is only a lower-level convenience, not the transport distance.
pub fn w1_sorted_1d(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.is_empty() {
        return Err(Error::shape(format!(
            "need equally many nonzero samples, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    let mut a = xs.to_vec();
    let mut b = ys.to_vec();
    a.sort_by(|p, q| p.partial_cmp(q).unwrap());
    b.sort_by(|p, q| p.partial_cmp(q).unwrap());
    Ok(a.iter().zip(&b).map(|(p, q)| (p - q).abs()).sum::<f64>() / a.len() as f64)
}
