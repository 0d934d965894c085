//! Finite-chain linear algebra: generator matrices, stationary laws, the
//! birth-death reduction, and the tilted Perron eigenproblem that controls
//! exponential moments of time-averaged functionals.
//!
//! The tilted problem is the crate's quantitative core. Given an irreducible
//! generator `Q` on `F`, a vector `alpha`, and an exponent `q in (0, 1]`, the
//! matrix `B = Q - q * diag(alpha)` has a real Perron eigenvalue
//! `lambda = -eta` with a strictly positive right eigenvector `psi`; along
//! the chain `K` with generator `Q`,
//!
//! ```text
//! (min psi / max psi) e^{-eta t}  <=  E_i[ exp(-q int_0^t alpha(K_s) ds) ]
//!                                 <=  (max psi / min psi) e^{-eta t}
//! ```
//!
//! by integrating `d/dt E[e^{-q int alpha} psi(K_t)] = 0` for the
//! `e^{eta t}`-compensated semigroup and sandwiching `psi` between its
//! extremes. `eta(q) > 0` for some `q` exactly when the averaged criterion
//! `sum_i nu(i) alpha(i) > 0` holds (`nu` the stationary law of `Q`), and
//! `eta` is concave in `q` because the Perron root is convex in the diagonal,
//! so a coarse grid plus golden-section refinement finds the optimal tilt.
//!
//! The eigenproblem is solved by power iteration on a nonnegative shift of
//! `B` with Collatz-Wielandt bracketing (`min_i (Av)_i / v_i <= lambda <=
//! max_i (Av)_i / v_i` for positive `v`), then polished by inverse iteration;
//! the returned residual is checked against 1e-9.

use nalgebra::{DMatrix, DVector};

use crate::model::{scc_count, serde_mat, RegimeId, SwitchingSpec};
use crate::{Error, Result};

/// Conservative generator matrix: off-diagonal entries nonnegative, row sums
/// zero to within a scale-aware 1e-12 tolerance.
#[derive(Debug, Clone, serde::Serialize)]
pub struct GeneratorMatrix {
    #[serde(with = "serde_mat")]
    q: DMatrix<f64>,
}

impl GeneratorMatrix {
    pub fn new(q: DMatrix<f64>) -> Result<Self> {
        let n = q.nrows();
        if n == 0 || q.ncols() != n {
            return Err(Error::shape(format!(
                "generator must be square and nonempty, got {}x{}",
                q.nrows(),
                q.ncols()
            )));
        }
        let scale = q.abs().max().max(1.0);
        for i in 0..n {
            let mut row_sum = 0.0;
            for j in 0..n {
                let v = q[(i, j)];
                if !v.is_finite() {
                    return Err(Error::domain(format!(
                        "generator entry ({i}, {j}) not finite"
                    )));
                }
                if i != j && v < 0.0 {
                    return Err(Error::domain(format!(
                        "generator off-diagonal entry ({i}, {j}) = {v} is negative"
                    )));
                }
                row_sum += v;
            }
            if row_sum.abs() > 1e-12 * scale {
                return Err(Error::domain(format!(
                    "generator row {i} sums to {row_sum:e}, expected 0"
                )));
            }
        }
        Ok(GeneratorMatrix { q })
    }

    /// Build a generator from a nonnegative off-diagonal rate matrix by
    /// setting each diagonal entry to minus its row sum (exact in floats).
    pub fn from_rates(rates: &DMatrix<f64>) -> Result<Self> {
        let n = rates.nrows();
        if n == 0 || rates.ncols() != n {
            return Err(Error::shape("rate matrix must be square and nonempty"));
        }
        let mut q = rates.clone();
        for i in 0..n {
            q[(i, i)] = 0.0;
            let s: f64 = (0..n).filter(|&j| j != i).map(|j| q[(i, j)]).sum();
            q[(i, i)] = -s;
        }
        GeneratorMatrix::new(q)
    }

    /// Tridiagonal generator of a birth-death chain on `{0, ..., nbar}`.
    pub fn birth_death(rates: &BirthDeathRates) -> Result<Self> {
        let n = rates.len();
        let mut m = DMatrix::zeros(n, n);
        for k in 0..n {
            if k + 1 < n {
                m[(k, k + 1)] = rates.b[k];
            }
            if k > 0 {
                m[(k, k - 1)] = rates.d[k];
            }
        }
        GeneratorMatrix::from_rates(&m)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn n(&self) -> usize {
        self.q.nrows()
    }

    /// Strong connectivity of the positive-rate digraph.
    pub fn irreducible(&self) -> bool {
        scc_count(&self.q.map(|v| v.max(0.0))) == 1
    }
}

/// Generator of the regime chain for specs whose rates do not depend on `x`
/// (constant model, or sigmoid with zero direction). `None` when the rates
/// are genuinely state-dependent.
pub fn constant_rate_generator(spec: &SwitchingSpec) -> Option<GeneratorMatrix> {
    let (high, low, _) = crate::model::rate_extrema(spec).ok()?;
    if (&high - &low).abs().max() > 0.0 {
        return None;
    }
    GeneratorMatrix::from_rates(&low).ok()
}

/// Stationary law of an irreducible generator: the unique probability vector
/// with `nu^T Q = 0`, computed by least squares on the stacked system
/// `[Q^T; 1^T] nu = e_last` with iterative refinement. The result satisfies
/// `||nu^T Q||_inf <= 1e-12 * max(1, ||Q||_max)`.
pub fn stationary_distribution(gen: &GeneratorMatrix) -> Result<DVector<f64>> {
    let n = gen.n();
    if !gen.irreducible() {
        return Err(Error::domain(
            "stationary law requires an irreducible generator",
        ));
    }
    if n == 1 {
        return Ok(DVector::from_element(1, 1.0));
    }

    let mut a = DMatrix::zeros(n + 1, n);
    a.view_mut((0, 0), (n, n)).copy_from(&gen.q.transpose());
    for j in 0..n {
        a[(n, j)] = 1.0;
    }
    let mut b = DVector::zeros(n + 1);
    b[n] = 1.0;

    let svd = a.clone().svd(true, true);
    let mut nu = svd
        .solve(&b, 1e-14)
        .map_err(|e| Error::numerical(format!("least-squares solve failed: {e}")))?;

    let scale = gen.q.abs().max().max(1.0);
    let tol = 1e-12 * scale;
    for _ in 0..6 {
        let resid = gen.q.transpose() * &nu;
        if resid.abs().max() <= tol {
            break;
        }
        let r = &b - &a * &nu;
        let delta = svd
            .solve(&r, 1e-14)
            .map_err(|e| Error::numerical(format!("refinement solve failed: {e}")))?;
        nu += delta;
    }

    let total: f64 = nu.iter().sum();
    nu /= total;
    let resid = (gen.q.transpose() * &nu).abs().max();
    if resid > tol {
        return Err(Error::numerical(format!(
            "stationary residual {resid:e} above tolerance {tol:e}"
        )));
    }
    if nu.iter().any(|&v| v <= 0.0) {
        return Err(Error::numerical(
            "stationary law has nonpositive entries; generator is numerically reducible",
        ));
    }
    Ok(nu)
}

/// Effective birth-death rates of a partition `F_0, ..., F_nbar`:
///
/// ```text
/// b(n) = inf_x min_{i in F_n} sum_{j in F_{n+1}} a(x, i, j)
/// d(n) = sup_x max_{i in F_n} sum_{j in F_{n-1}} a(x, i, j)
/// ```
///
/// with `d(0) = 0` and `b(nbar) = 0`. Both are exact for the supported rate
/// models because every block sum is monotone in the single logistic factor.
#[derive(Debug, Clone, serde::Serialize)]
pub struct BirthDeathRates {
    pub b: Vec<f64>,
    pub d: Vec<f64>,
}

impl BirthDeathRates {
    /// Number of blocks `nbar + 1`.
    pub fn len(&self) -> usize {
        self.b.len()
    }

    pub fn is_empty(&self) -> bool {
        self.b.is_empty()
    }
}

/// Validate a partition as a disjoint cover of the regimes whose rates only
/// connect adjacent blocks, and return the block index of each regime.
pub fn partition_blocks(spec: &SwitchingSpec, partition: &[Vec<RegimeId>]) -> Result<Vec<usize>> {
    let n_regimes = spec.n_regimes();
    if partition.is_empty() {
        return Err(Error::domain("partition must have at least one block"));
    }
    let mut block_of = vec![usize::MAX; n_regimes];
    for (n, block) in partition.iter().enumerate() {
        if block.is_empty() {
            return Err(Error::domain(format!("partition block {n} is empty")));
        }
        for &k in block {
            if k >= n_regimes {
                return Err(Error::domain(format!(
                    "partition references regime {k}, spec has {n_regimes}"
                )));
            }
            if block_of[k] != usize::MAX {
                return Err(Error::domain(format!(
                    "regime {k} appears in more than one partition block"
                )));
            }
            block_of[k] = n;
        }
    }
    if let Some(k) = block_of.iter().position(|&b| b == usize::MAX) {
        return Err(Error::domain(format!(
            "regime {k} is missing from the partition"
        )));
    }
    let (high, _, _) = crate::model::rate_extrema(spec)?;
    for a in 0..n_regimes {
        for b in 0..n_regimes {
            if a != b && high[(a, b)] > 0.0 && block_of[a].abs_diff(block_of[b]) > 1 {
                return Err(Error::domain(format!(
                    "rate {a} -> {b} connects non-adjacent partition blocks {} and {}",
                    block_of[a], block_of[b]
                )));
            }
        }
    }
    Ok(block_of)
}

pub fn birth_death_rates(
    spec: &SwitchingSpec,
    partition: &[Vec<RegimeId>],
) -> Result<BirthDeathRates> {
    let (high, low, _) = crate::model::rate_extrema(spec)?;
    let nb = partition.len();
    if nb == 0 {
        return Err(Error::domain("partition must have at least one block"));
    }
    let mut b = vec![0.0; nb];
    let mut d = vec![0.0; nb];
    for n in 0..nb {
        if n + 1 < nb {
            b[n] = partition[n]
                .iter()
                .map(|&i| partition[n + 1].iter().map(|&j| low[(i, j)]).sum::<f64>())
                .fold(f64::INFINITY, f64::min);
        }
        if n > 0 {
            d[n] = partition[n]
                .iter()
                .map(|&i| partition[n - 1].iter().map(|&j| high[(i, j)]).sum::<f64>())
                .fold(0.0, f64::max);
        }
    }
    Ok(BirthDeathRates { b, d })
}

/// Closed-form stationary law of a birth-death chain:
/// `nu(n) = nu(0) prod_{k=1}^{n} b(k-1) / d(k)` with
/// `nu(0) = (1 + sum_n prod)^{-1}`. Requires every `b(k)` for `k < nbar` and
/// every `d(k)` for `k >= 1` to be positive.
pub fn birth_death_nu(rates: &BirthDeathRates) -> Result<DVector<f64>> {
    let nb = rates.len();
    if nb == 0 {
        return Err(Error::domain("empty birth-death chain"));
    }
    for k in 0..nb {
        if k + 1 < nb && rates.b[k] <= 0.0 {
            return Err(Error::domain(format!(
                "birth rate b({k}) = {} must be positive below the top block",
                rates.b[k]
            )));
        }
        if k >= 1 && rates.d[k] <= 0.0 {
            return Err(Error::domain(format!(
                "death rate d({k}) = {} must be positive above the bottom block",
                rates.d[k]
            )));
        }
    }
    let mut prods = vec![1.0; nb];
    for k in 1..nb {
        prods[k] = prods[k - 1] * rates.b[k - 1] / rates.d[k];
    }
    let total: f64 = prods.iter().sum();
    Ok(DVector::from_vec(
        prods.into_iter().map(|p| p / total).collect(),
    ))
}

/// The largest coordinatewise sequence `alpha(0) <= alpha(1) <= ...` with
/// `alpha(n) <= min_{i in F_n} rho(i)`: the running minimum from the right,
/// `alpha(n) = min_{m >= n} min_{i in F_m} rho(i)`. Any admissible increasing
/// sequence is dominated by it pointwise, so it maximizes `sum nu alpha` for
/// every nonnegative `nu`.
pub fn best_alpha(rho: &[f64], partition: &[Vec<RegimeId>]) -> Result<Vec<f64>> {
    let nb = partition.len();
    let mut alpha = vec![0.0; nb];
    for (n, block) in partition.iter().enumerate() {
        if block.is_empty() {
            return Err(Error::domain(format!("partition block {n} is empty")));
        }
        for &i in block {
            if i >= rho.len() {
                return Err(Error::shape(format!(
                    "partition references regime {i}, rho has length {}",
                    rho.len()
                )));
            }
        }
        alpha[n] = block.iter().map(|&i| rho[i]).fold(f64::INFINITY, f64::min);
    }
    for n in (0..nb.saturating_sub(1)).rev() {
        alpha[n] = alpha[n].min(alpha[n + 1]);
    }
    Ok(alpha)
}

/// Solution of the tilted eigenproblem `(Q - q diag(alpha)) psi = -eta psi`
/// with `psi > 0` normalized to `min psi = 1`.
#[derive(Debug, Clone, serde::Serialize)]
pub struct TiltedSolution {
    pub q: f64,
    /// Decay rate: minus the Perron eigenvalue of the tilted matrix.
    pub eta: f64,
    /// Positive right eigenvector, `min psi = 1`.
    pub psi: Vec<f64>,
    /// `||B psi + eta psi||_inf` at return, checked against 1e-9.
    pub residual: f64,
    /// `max psi / min psi = max psi`: prefactor of the upper moment bound.
    pub prefactor_upper: f64,
    /// `min psi / max psi`: prefactor of the lower moment bound.
    pub prefactor_lower: f64,
}

pub fn tilted_exponent(gen: &GeneratorMatrix, alpha: &[f64], q: f64) -> Result<TiltedSolution> {
    let n = gen.n();
    if alpha.len() != n {
        return Err(Error::shape(format!(
            "alpha has length {}, generator is {n}x{n}",
            alpha.len()
        )));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::domain(format!(
            "tilt exponent q = {q} outside [0, 1]"
        )));
    }
    if !gen.irreducible() {
        return Err(Error::domain(
            "tilted solve requires an irreducible generator",
        ));
    }

    let mut b = gen.q.clone();
    for i in 0..n {
        b[(i, i)] -= q * alpha[i];
    }

    // Shift to a nonnegative primitive matrix: off-diagonal entries of B are
    // the rates of Q, and the diagonal becomes >= 1.
    let sigma = 1.0 + (0..n).map(|i| -b[(i, i)]).fold(0.0f64, f64::max);
    let mut a = b.clone();
    for i in 0..n {
        a[(i, i)] += sigma;
    }

    // Power iteration with Collatz-Wielandt bracketing.
    let mut v = DVector::from_element(n, 1.0);
    let mut lam_lo = f64::NEG_INFINITY;
    let mut lam_hi = f64::INFINITY;
    for _ in 0..100_000 {
        let w = &a * &v;
        lam_lo = (0..n).map(|i| w[i] / v[i]).fold(f64::INFINITY, f64::min);
        lam_hi = (0..n)
            .map(|i| w[i] / v[i])
            .fold(f64::NEG_INFINITY, f64::max);
        let wmax = w.max();
        v = w / wmax;
        if lam_hi - lam_lo <= 1e-13 * lam_hi.abs().max(1.0) {
            break;
        }
    }

    // Inverse-iteration polish tightens the bracket to machine precision.
    let mut lam = 0.5 * (lam_lo + lam_hi);
    for _ in 0..12 {
        let mut shifted = a.clone();
        for k in 0..n {
            shifted[(k, k)] -= lam;
        }
        let Some(w) = shifted.lu().solve(&v) else {
            break;
        };
        let w = w.abs();
        let wmax = w.max();
        if !wmax.is_finite() || wmax == 0.0 {
            break;
        }
        // One forward step restores strict positivity (A has positive
        // diagonal) and refreshes the bracket.
        let fv = &a * (&w / wmax);
        let fmax = fv.max();
        v = fv / fmax;
        let av = &a * &v;
        lam_lo = (0..n).map(|i| av[i] / v[i]).fold(f64::INFINITY, f64::min);
        lam_hi = (0..n)
            .map(|i| av[i] / v[i])
            .fold(f64::NEG_INFINITY, f64::max);
        lam = 0.5 * (lam_lo + lam_hi);
        if lam_hi - lam_lo <= 1e-15 * lam_hi.abs().max(1.0) {
            break;
        }
    }

    let vmin = v.min();
    if !(vmin > 0.0) {
        return Err(Error::numerical("Perron vector lost positivity"));
    }
    let psi = &v / vmin;
    let eta = -(lam - sigma);
    let residual = {
        let r = &b * &psi + eta * &psi;
        r.abs().max()
    };
    let tol = 1e-9 * psi.max().max(1.0);
    if residual > tol {
        return Err(Error::numerical(format!(
            "tilted eigenproblem residual {residual:e} above tolerance {tol:e}"
        )));
    }
    let pmax = psi.max();
    Ok(TiltedSolution {
        q,
        eta,
        psi: psi.iter().cloned().collect(),
        residual,
        prefactor_upper: pmax,
        prefactor_lower: 1.0 / pmax,
    })
}

/// Result of maximizing `eta(q)` over the tilt exponent.
#[derive(Debug, Clone, serde::Serialize)]
pub struct TiltOptimum {
    pub q_star: f64,
    pub eta_star: f64,
    /// Averaged criterion value `sum nu alpha` of the untilted chain.
    pub average: f64,
    pub solution: TiltedSolution,
}

/// Maximize `eta(q)` over `q in (0, 1]`: 64-point grid scan followed by
/// golden-section refinement to a bracket of 1e-6. Errs when the averaged
/// criterion `sum nu alpha` is nonpositive, in which case `eta(q) <= 0` for
/// all `q` and there is nothing to optimize.
pub fn optimize_q(gen: &GeneratorMatrix, alpha: &[f64]) -> Result<TiltOptimum> {
    let nu = stationary_distribution(gen)?;
    if alpha.len() != gen.n() {
        return Err(Error::shape(format!(
            "alpha has length {}, generator is {}x{}",
            alpha.len(),
            gen.n(),
            gen.n()
        )));
    }
    let average: f64 = nu.iter().zip(alpha).map(|(n, a)| n * a).sum();
    if average <= 0.0 {
        return Err(Error::domain(format!(
            "averaged criterion fails: sum nu alpha = {average}, no positive tilt exponent exists"
        )));
    }

    let grid = 64;
    let mut best_k = 1;
    let mut best_eta = f64::NEG_INFINITY;
    for k in 1..=grid {
        let qk = k as f64 / grid as f64;
        let eta = tilted_exponent(gen, alpha, qk)?.eta;
        if eta > best_eta {
            best_eta = eta;
            best_k = k;
        }
    }
    let lo = ((best_k - 1) as f64 / grid as f64).max(1e-6);
    let hi = ((best_k + 1) as f64 / grid as f64).min(1.0);
    let (q_star, eta_star) = crate::stats::golden_max(lo, hi, 1e-6, |q| {
        tilted_exponent(gen, alpha, q)
            .map(|s| s.eta)
            .unwrap_or(f64::NEG_INFINITY)
    });
    let solution = tilted_exponent(gen, alpha, q_star)?;
    Ok(TiltOptimum {
        q_star,
        eta_star,
        average,
        solution,
    })
}
