//! Problem specification: regime dynamics, jump-rate models, the metric, and
//! validation of the standing assumptions.
//!
//! A `SwitchingSpec` describes the pair process `(X_t, I_t)`. `X` lives in
//! `R^dim` and follows, between switches, the dynamics of the active regime:
//! either the exact affine flow `x' = A x + c` or an Ornstein-Uhlenbeck
//! diffusion `dX = (A X + c) dt + sigma dW`. The regime `I` jumps from `i`
//! to `j` at state-dependent rate `a(x, i, j)` given by the `RateModel`.
//!
//! `validate_spec` checks shapes and signs and computes the three constants
//! the certification layer relies on:
//!
//! * `abar  = max_i sup_x sum_{j != i} a(x, i, j)`, the uniform bound on the
//!   total switch intensity (uniformization needs any event rate `>= abar`;
//!   couplings use `2 * abar`);
//! * `kappa` with `sum_j |a(x,i,j) - a(y,i,j)| <= kappa * d(x, y)` for all
//!   regimes `i`, the jump-rate Lipschitz constant in the spec metric;
//! * `alow[i][j] = inf_x a(x, i, j)`, whose positive entries must form a
//!   strongly connected digraph for the coupling arguments to apply.
//!
//! Both rate models are closed under these computations by design: constants
//! trivially, and sigmoid modulation because the logistic function has range
//! `(0, 1)` and derivative bounded by `1/4`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Index into `SwitchingSpec::regimes`.
pub type RegimeId = usize;

/// Continuous dynamics of one regime.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RegimeDynamics {
    /// Deterministic affine flow `x' = A x + c`, solved exactly.
    #[serde(rename = "affine")]
    AffineFlow {
        #[serde(with = "serde_mat")]
        a: DMatrix<f64>,
        #[serde(with = "serde_vec")]
        c: DVector<f64>,
    },
    /// Ornstein-Uhlenbeck diffusion `dX = (A X + c) dt + sigma dW`.
    #[serde(rename = "ou")]
    OrnsteinUhlenbeck {
        #[serde(with = "serde_mat")]
        a: DMatrix<f64>,
        #[serde(with = "serde_vec")]
        c: DVector<f64>,
        #[serde(with = "serde_mat")]
        sigma: DMatrix<f64>,
    },
}

impl RegimeDynamics {
    pub fn a(&self) -> &DMatrix<f64> {
        match self {
            RegimeDynamics::AffineFlow { a, .. } => a,
            RegimeDynamics::OrnsteinUhlenbeck { a, .. } => a,
        }
    }

    pub fn c(&self) -> &DVector<f64> {
        match self {
            RegimeDynamics::AffineFlow { c, .. } => c,
            RegimeDynamics::OrnsteinUhlenbeck { c, .. } => c,
        }
    }

    pub fn sigma(&self) -> Option<&DMatrix<f64>> {
        match self {
            RegimeDynamics::AffineFlow { .. } => None,
            RegimeDynamics::OrnsteinUhlenbeck { sigma, .. } => Some(sigma),
        }
    }

    pub fn is_deterministic(&self) -> bool {
        self.sigma().is_none()
    }
}

/// State-dependent jump-rate model. `a(x, i, j)` is the rate of switching
/// from regime `i` to regime `j` while the continuous component sits at `x`.
///
/// Both variants have closed-form `sup_x`, `inf_x`, and Lipschitz constants,
/// which keeps `validate_spec` exact rather than sampled.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RateModel {
    /// `a(x, i, j) = matrix[(i, j)]`, independent of `x`.
    Constant {
        #[serde(with = "serde_mat")]
        matrix: DMatrix<f64>,
    },
    /// `a(x, i, j) = base[(i, j)] + amplitude[(i, j)] * s(<direction, x> + offset)`
    /// with the logistic `s(u) = 1 / (1 + exp(-u))`.
    Sigmoid {
        #[serde(with = "serde_mat")]
        base: DMatrix<f64>,
        #[serde(with = "serde_mat")]
        amplitude: DMatrix<f64>,
        #[serde(with = "serde_vec")]
        direction: DVector<f64>,
        offset: f64,
    },
}

/// Numerically stable logistic function, exact in both tails.
pub(crate) fn logistic(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

/// Metric on the continuous component plus the exponent used by the coupling
/// distances: `d(x, y) = sqrt((x-y)^T M (x-y))` with `M` symmetric positive
/// definite, and `q` in `(0, 1]` so that `d^q` stays a metric.
///
/// `x0` is the anchor point for weight functions `1 + d^q(x, x0) + d^q(y, x0)`
/// and `trunc` selects the truncated form `min(d^q, 1)` where a variant
/// exists.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricSpec {
    #[serde(with = "serde_mat")]
    pub m: DMatrix<f64>,
    pub q: f64,
    #[serde(with = "serde_vec")]
    pub x0: DVector<f64>,
    #[serde(default)]
    pub trunc: bool,
}

impl MetricSpec {
    /// Euclidean-in-`M` distance `sqrt((x-y)^T M (x-y))`.
    pub fn d(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        let e = x - y;
        self.norm(&e)
    }

    /// `||v||_M = sqrt(v^T M v)`.
    pub fn norm(&self, v: &DVector<f64>) -> f64 {
        let q = (v.transpose() * &self.m * v)[(0, 0)];
        q.max(0.0).sqrt()
    }

    /// `d(x, y)^q`.
    pub fn dq(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        self.d(x, y).powf(self.q)
    }

    /// Dual norm `||w||_{M*} = sqrt(w^T M^{-1} w)`: the smallest `L` with
    /// `|<w, x - y>| <= L * d(x, y)`.
    pub fn dual_norm(&self, w: &DVector<f64>) -> Result<f64> {
        let chol = self
            .m
            .clone()
            .cholesky()
            .ok_or_else(|| Error::domain("metric matrix M is not positive definite"))?;
        let z = chol.solve(w);
        Ok(w.dot(&z).max(0.0).sqrt())
    }

    pub fn check(&self, dim: usize) -> Result<()> {
        if self.m.nrows() != dim || self.m.ncols() != dim {
            return Err(Error::shape(format!(
                "metric matrix is {}x{}, expected {}x{}",
                self.m.nrows(),
                self.m.ncols(),
                dim,
                dim
            )));
        }
        if self.x0.len() != dim {
            return Err(Error::shape(format!(
                "metric anchor x0 has length {}, expected {}",
                self.x0.len(),
                dim
            )));
        }
        let asym = (&self.m - self.m.transpose()).abs().max();
        if asym > 1e-12 * self.m.abs().max().max(1.0) {
            return Err(Error::domain("metric matrix M is not symmetric"));
        }
        if self.m.clone().cholesky().is_none() {
            return Err(Error::domain("metric matrix M is not positive definite"));
        }
        if !(self.q > 0.0 && self.q <= 1.0) {
            return Err(Error::domain(format!(
                "metric exponent q = {} outside (0, 1]",
                self.q
            )));
        }
        Ok(())
    }
}

/// Full description of a switching system.
///
/// `rho` optionally overrides the per-regime contraction rates used by the
/// certification layer (defaults are derived from the log-norm of each drift
/// matrix in the spec metric). `partition` optionally orders the regimes into
/// blocks `F_0, ..., F_nbar` for the birth-death reduction; blocks must be
/// disjoint, nonempty, and cover every regime.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SwitchingSpec {
    pub dim: usize,
    pub regimes: Vec<RegimeDynamics>,
    pub rates: RateModel,
    pub metric: MetricSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partition: Option<Vec<Vec<RegimeId>>>,
}

/// Constants extracted by `validate_spec`.
#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    /// `max_i sup_x sum_{j != i} a(x, i, j)`.
    pub abar: f64,
    /// Lipschitz constant: `sum_j |a(x,i,j) - a(y,i,j)| <= kappa * d(x,y)`.
    pub kappa: f64,
    /// Entrywise `inf_x a(x, i, j)`.
    #[serde(with = "serde_mat")]
    pub alow: DMatrix<f64>,
    /// Whether the digraph of positive `alow` entries is strongly connected.
    pub irreducible: bool,
}

impl SwitchingSpec {
    pub fn n_regimes(&self) -> usize {
        self.regimes.len()
    }

    /// Parse a spec from JSON and validate it.
    pub fn from_json(text: &str) -> Result<(Self, ValidationReport)> {
        let spec: SwitchingSpec = serde_json::from_str(text)?;
        let report = validate_spec(&spec)?;
        Ok((spec, report))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Evaluate `a(x, i, j)`. Out-of-range indices or a mis-sized `x` are caught
/// by `validate_spec`; this hot-path accessor assumes a validated spec.
pub fn eval_rate(spec: &SwitchingSpec, x: &DVector<f64>, i: RegimeId, j: RegimeId) -> f64 {
    if i == j {
        return 0.0;
    }
    match &spec.rates {
        RateModel::Constant { matrix } => matrix[(i, j)],
        RateModel::Sigmoid {
            base,
            amplitude,
            direction,
            offset,
        } => base[(i, j)] + amplitude[(i, j)] * logistic(direction.dot(x) + offset),
    }
}

/// All outgoing rates from regime `i` at `x`, with `out[i] = 0`. One logistic
/// evaluation serves the whole row.
pub fn eval_rate_row(spec: &SwitchingSpec, x: &DVector<f64>, i: RegimeId) -> Vec<f64> {
    let n = spec.n_regimes();
    let mut out = vec![0.0; n];
    match &spec.rates {
        RateModel::Constant { matrix } => {
            for j in 0..n {
                if j != i {
                    out[j] = matrix[(i, j)];
                }
            }
        }
        RateModel::Sigmoid {
            base,
            amplitude,
            direction,
            offset,
        } => {
            let s = logistic(direction.dot(x) + offset);
            for j in 0..n {
                if j != i {
                    out[j] = base[(i, j)] + amplitude[(i, j)] * s;
                }
            }
        }
    }
    out
}

fn check_rate_matrix(name: &str, m: &DMatrix<f64>, n: usize) -> Result<()> {
    if m.nrows() != n || m.ncols() != n {
        return Err(Error::shape(format!(
            "rate {} matrix is {}x{}, expected {}x{}",
            name,
            m.nrows(),
            m.ncols(),
            n,
            n
        )));
    }
    for i in 0..n {
        if m[(i, i)] != 0.0 {
            return Err(Error::domain(format!(
                "rate {} matrix has nonzero diagonal entry at ({i}, {i}); self-rates are meaningless",
                name
            )));
        }
        for j in 0..n {
            let v = m[(i, j)];
            if !v.is_finite() || v < 0.0 {
                return Err(Error::domain(format!(
                    "rate {} matrix entry ({i}, {j}) = {v} must be finite and nonnegative",
                    name
                )));
            }
        }
    }
    Ok(())
}

/// Validate shapes and signs, then compute `abar`, `kappa`, `alow`, and the
/// irreducibility of the lower-rate digraph. Validation is exact: both rate
/// models expose closed-form extrema, so nothing here is sampled.
pub fn validate_spec(spec: &SwitchingSpec) -> Result<ValidationReport> {
    let d = spec.dim;
    let n = spec.n_regimes();
    if d == 0 {
        return Err(Error::domain("dim must be at least 1"));
    }
    if n == 0 {
        return Err(Error::domain("at least one regime is required"));
    }

    for (i, reg) in spec.regimes.iter().enumerate() {
        let a = reg.a();
        if a.nrows() != d || a.ncols() != d {
            return Err(Error::shape(format!(
                "regime {i}: drift matrix is {}x{}, expected {d}x{d}",
                a.nrows(),
                a.ncols()
            )));
        }
        if spec.regimes[i].c().len() != d {
            return Err(Error::shape(format!(
                "regime {i}: offset has length {}, expected {d}",
                spec.regimes[i].c().len()
            )));
        }
        if let Some(s) = reg.sigma() {
            if s.nrows() != d || s.ncols() == 0 {
                return Err(Error::shape(format!(
                    "regime {i}: noise matrix is {}x{}, expected {d} rows",
                    s.nrows(),
                    s.ncols()
                )));
            }
        }
        if a.iter().any(|v| !v.is_finite())
            || reg.c().iter().any(|v| !v.is_finite())
            || reg
                .sigma()
                .is_some_and(|s| s.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::domain(format!("regime {i}: non-finite entries")));
        }
    }

    spec.metric.check(d)?;

    if let Some(rho) = &spec.rho {
        if rho.len() != n {
            return Err(Error::shape(format!(
                "rho has length {}, expected {n}",
                rho.len()
            )));
        }
        if rho.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("rho has non-finite entries"));
        }
    }

    if let Some(part) = &spec.partition {
        let mut seen = vec![false; n];
        if part.is_empty() {
            return Err(Error::domain("partition must have at least one block"));
        }
        for (b, block) in part.iter().enumerate() {
            if block.is_empty() {
                return Err(Error::domain(format!("partition block {b} is empty")));
            }
            for &i in block {
                if i >= n {
                    return Err(Error::domain(format!(
                        "partition block {b} references regime {i}, but there are only {n}"
                    )));
                }
                if seen[i] {
                    return Err(Error::domain(format!(
                        "regime {i} appears in more than one partition block"
                    )));
                }
                seen[i] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::domain("partition does not cover every regime"));
        }
    }

    let (ahigh, alow, kappa) = rate_extrema(spec)?;

    let abar = (0..n)
        .map(|i| ahigh.row(i).iter().sum::<f64>())
        .fold(0.0f64, f64::max);

    let irreducible = lower_graph_strongly_connected(&alow);

    Ok(ValidationReport {
        abar,
        kappa,
        alow,
        irreducible,
    })
}

/// Closed-form entrywise rate extrema and the Lipschitz constant:
/// `(sup_x a(x, i, j), inf_x a(x, i, j), kappa)`. Exact for both rate models
/// because every entry is monotone in the single logistic factor.
pub fn rate_extrema(spec: &SwitchingSpec) -> Result<(DMatrix<f64>, DMatrix<f64>, f64)> {
    let n = spec.n_regimes();
    let d = spec.dim;
    match &spec.rates {
        RateModel::Constant { matrix } => {
            check_rate_matrix("constant", matrix, n)?;
            Ok((matrix.clone(), matrix.clone(), 0.0))
        }
        RateModel::Sigmoid {
            base,
            amplitude,
            direction,
            offset,
        } => {
            check_rate_matrix("base", base, n)?;
            check_rate_matrix("amplitude", amplitude, n)?;
            if direction.len() != d {
                return Err(Error::shape(format!(
                    "rate direction has length {}, expected {d}",
                    direction.len()
                )));
            }
            if direction.iter().any(|v| !v.is_finite()) || !offset.is_finite() {
                return Err(Error::domain(
                    "rate direction/offset has non-finite entries",
                ));
            }
            if direction.iter().all(|&v| v == 0.0) {
                // Degenerate sigmoid: constant rates base + amplitude * s(offset).
                let s = logistic(*offset);
                let fixed = base + amplitude * s;
                Ok((fixed.clone(), fixed, 0.0))
            } else {
                // s has range (0, 1), so sup = base + amplitude, inf = base;
                // |s'| <= 1/4 and |<w, x - y>| <= ||w||_{M*} d(x, y) give
                // kappa = (1/4) ||w||_{M*} max_i sum_j amplitude[(i, j)].
                let dual = spec.metric.dual_norm(direction)?;
                let max_amp_row = (0..n)
                    .map(|i| amplitude.row(i).iter().sum::<f64>())
                    .fold(0.0f64, f64::max);
                Ok((base + amplitude, base.clone(), 0.25 * dual * max_amp_row))
            }
        }
    }
}

/// Strong connectivity of the digraph with an edge `i -> j` whenever
/// `alow[(i, j)] > 0`.
pub fn lower_graph_strongly_connected(alow: &DMatrix<f64>) -> bool {
    scc_count(alow) == 1
}

/// Number of strongly connected components of the positive-entry digraph.
pub fn scc_count(alow: &DMatrix<f64>) -> usize {
    use petgraph::graph::DiGraph;
    let n = alow.nrows();
    let mut g = DiGraph::<(), ()>::new();
    let nodes: Vec<_> = (0..n).map(|_| g.add_node(())).collect();
    for i in 0..n {
        for j in 0..n {
            if i != j && alow[(i, j)] > 0.0 {
                g.add_edge(nodes[i], nodes[j], ());
            }
        }
    }
    petgraph::algo::tarjan_scc(&g).len()
}

pub(crate) mod serde_mat {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = (0..m.nrows())
            .map(|r| m.row(r).iter().cloned().collect())
            .collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        let nr = rows.len();
        let nc = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != nc) {
            return Err(serde::de::Error::custom("matrix rows have unequal lengths"));
        }
        Ok(DMatrix::from_fn(nr, nc, |r, c| rows[r][c]))
    }
}

pub(crate) mod serde_vec {
    use nalgebra::DVector;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
        Ok(DVector::from_vec(Vec::<f64>::deserialize(d)?))
    }
}
