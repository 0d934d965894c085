//! Uniformized simulation of the pair process `(X_t, I_t)` with exact affine
//! flows and deterministic seeding.
//!
//! Events are proposed by a Poisson clock of rate `r >= abar`; at an event at
//! state `(x, i)` the regime jumps to `j` with probability `a(x, i, j) / r`
//! and otherwise stays put. Thinning makes the law of the switch process
//! independent of `r` (checked by tests), which is what lets the couplings
//! raise `r` freely. Between events the continuous component follows the
//! active regime exactly: affine flows through the augmented matrix
//! exponential `exp([[A, c], [0, 0]] t)`, Ornstein-Uhlenbeck regimes through
//! Euler-Maruyama with step `dt / ceil(dt / 0.01)`.
//!
//! Seeding: one ChaCha8 stream per path (`seed` fixed, `stream` offset by
//! the path index), so results are reproducible and independent of how paths
//! are scheduled across threads. All reductions collect per-path values in
//! path order before summing.
//!
//! For norm observables on systems whose regimes are all linear (`c = 0`,
//! no noise, anchor at the origin) the module also provides a renormalized
//! kernel tracking `(X / ||X||_M, log ||X||_M)` with the same event
//! randomness as the standard kernel; it neither overflows on expanding
//! regimes nor underflows on contracting ones, where the standard kernel
//! would hit the blow-up guard or lose precision.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::{eval_rate_row, MetricSpec, RegimeDynamics, RegimeId, SwitchingSpec};
use crate::{Error, Result};

/// Base RNG identity: `seed` selects the ChaCha8 key, `stream` the stream
/// within it. Fan-out across paths offsets the stream by the path index.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SeedSpec {
    pub seed: u64,
    pub stream: u64,
}

impl SeedSpec {
    pub fn new(seed: u64) -> Self {
        SeedSpec { seed, stream: 0 }
    }

    pub fn with_stream(self, stream: u64) -> Self {
        SeedSpec {
            seed: self.seed,
            stream,
        }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }
}

/// Simulation controls. `r` overrides the uniformization rate (default
/// `max(2 abar, 1)`; must be at least `abar`). `grid` lists the output times
/// in increasing order; an empty grid records the endpoint only. `blowup`
/// stops a path once `||x||_inf` exceeds it.
#[derive(Debug, Clone)]
pub struct SimOptions {
    pub r: Option<f64>,
    pub grid: Vec<f64>,
    pub blowup: f64,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            r: None,
            grid: Vec::new(),
            blowup: 1e12,
        }
    }
}

impl SimOptions {
    pub(crate) fn event_rate(&self, abar: f64) -> Result<f64> {
        let default = (2.0 * abar).max(1.0);
        let r = self.r.unwrap_or(default);
        if !(r.is_finite() && r > 0.0) {
            return Err(Error::domain(format!(
                "event rate r = {r} must be positive"
            )));
        }
        if r < abar {
            return Err(Error::domain(format!(
                "event rate r = {r} below the uniform rate bound abar = {abar}"
            )));
        }
        Ok(r)
    }

    pub(crate) fn checked_grid(&self, t_end: f64) -> Result<Vec<f64>> {
        if !(t_end > 0.0) {
            return Err(Error::domain(format!(
                "horizon T = {t_end} must be positive"
            )));
        }
        let grid = if self.grid.is_empty() {
            vec![t_end]
        } else {
            self.grid.clone()
        };
        for w in grid.windows(2) {
            if !(w[1] >= w[0]) {
                return Err(Error::domain("grid times must be nondecreasing"));
            }
        }
        if grid[0] < 0.0 || *grid.last().unwrap() > t_end + 1e-12 {
            return Err(Error::domain("grid times must lie in [0, T]"));
        }
        Ok(grid)
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct Sample {
    pub t: f64,
    pub regime: RegimeId,
    pub state: DVector<f64>,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct Switch {
    pub t: f64,
    pub from: RegimeId,
    pub to: RegimeId,
}

/// One simulated path: states at the requested grid times, the switch events,
/// and the blow-up time if the guard tripped (in which case samples after
/// that time are absent; a blow-up is data, not an error).
#[derive(Debug, Clone, serde::Serialize)]
pub struct Trajectory {
    pub samples: Vec<Sample>,
    pub switches: Vec<Switch>,
    pub blowup: Option<f64>,
}

impl Trajectory {
    pub fn switch_count(&self) -> usize {
        self.switches.len()
    }
}

/// Exact affine step `x(dt)` for `x' = A x + c`: scalar closed form in one
/// dimension, augmented matrix exponential otherwise. Handles singular `A`.
pub fn affine_step(a: &DMatrix<f64>, c: &DVector<f64>, x: &DVector<f64>, dt: f64) -> DVector<f64> {
    let d = x.len();
    if d == 1 {
        let aa = a[(0, 0)];
        let cc = c[0];
        let e = (aa * dt).exp();
        // (e^{a dt} - 1) / a, continuous at a = 0.
        let phi = if aa.abs() * dt.abs() < 1e-8 {
            dt * (1.0 + 0.5 * aa * dt)
        } else {
            (e - 1.0) / aa
        };
        return DVector::from_element(1, e * x[0] + phi * cc);
    }
    if c.iter().all(|&v| v == 0.0) {
        return (a * dt).exp() * x;
    }
    let mut aug = DMatrix::zeros(d + 1, d + 1);
    aug.view_mut((0, 0), (d, d)).copy_from(&(a * dt));
    aug.view_mut((0, d), (d, 1)).copy_from(&(c * dt));
    let e = aug.exp();
    let mut z = DVector::zeros(d + 1);
    z.rows_mut(0, d).copy_from(x);
    z[d] = 1.0;
    let w = e * z;
    w.rows(0, d).into_owned()
}

/// Advance the continuous component through one regime for `dt`. Affine
/// regimes are exact and consume no randomness; Ornstein-Uhlenbeck regimes
/// use Euler-Maruyama substeps of size `dt / ceil(dt / 0.01)`.
pub fn flow_step(
    dynamics: &RegimeDynamics,
    x: &DVector<f64>,
    dt: f64,
    rng: &mut ChaCha8Rng,
) -> DVector<f64> {
    if dt <= 0.0 {
        return x.clone();
    }
    match dynamics {
        RegimeDynamics::AffineFlow { a, c } => affine_step(a, c, x, dt),
        RegimeDynamics::OrnsteinUhlenbeck { a, c, sigma } => {
            let n_sub = (dt / 0.01).ceil().max(1.0) as usize;
            let h = dt / n_sub as f64;
            let sqrt_h = h.sqrt();
            let m = sigma.ncols();
            let normal = rand_distr::StandardNormal;
            let mut y = x.clone();
            for _ in 0..n_sub {
                let xi = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(normal));
                y = &y + (a * &y + c) * h + sigma * xi * sqrt_h;
            }
            y
        }
    }
}

/// Shared-noise variant for synchronous couplings: both states advance
/// through the same regime with the same Brownian increments, so their
/// difference follows `e' = A e` exactly.
pub(crate) fn flow_step_pair_shared(
    dynamics: &RegimeDynamics,
    x: &DVector<f64>,
    y: &DVector<f64>,
    dt: f64,
    rng: &mut ChaCha8Rng,
) -> (DVector<f64>, DVector<f64>) {
    if dt <= 0.0 {
        return (x.clone(), y.clone());
    }
    match dynamics {
        RegimeDynamics::AffineFlow { a, c } => (affine_step(a, c, x, dt), affine_step(a, c, y, dt)),
        RegimeDynamics::OrnsteinUhlenbeck { a, c, sigma } => {
            let n_sub = (dt / 0.01).ceil().max(1.0) as usize;
            let h = dt / n_sub as f64;
            let sqrt_h = h.sqrt();
            let m = sigma.ncols();
            let normal = rand_distr::StandardNormal;
            let mut u = x.clone();
            let mut v = y.clone();
            for _ in 0..n_sub {
                let xi = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(normal));
                let dw = sigma * xi * sqrt_h;
                u = &u + (a * &u + c) * h + &dw;
                v = &v + (a * &v + c) * h + &dw;
            }
            (u, v)
        }
    }
}

/// Simulate one path of `(X, I)` to `t_end`, sampling at the option grid.
pub fn simulate_path(
    spec: &SwitchingSpec,
    x0: &DVector<f64>,
    i0: RegimeId,
    t_end: f64,
    seed: SeedSpec,
    opts: &SimOptions,
) -> Result<Trajectory> {
    let report = crate::model::validate_spec(spec)?;
    if x0.len() != spec.dim {
        return Err(Error::shape(format!(
            "x0 has length {}, expected {}",
            x0.len(),
            spec.dim
        )));
    }
    if i0 >= spec.n_regimes() {
        return Err(Error::domain(format!("initial regime {i0} out of range")));
    }
    let r = opts.event_rate(report.abar)?;
    let grid = opts.checked_grid(t_end)?;
    let mut rng = seed.rng();
    Ok(run_standard_kernel(
        spec,
        x0,
        i0,
        t_end,
        r,
        &grid,
        opts.blowup,
        &mut rng,
    ))
}

#[allow(clippy::too_many_arguments)]
fn run_standard_kernel(
    spec: &SwitchingSpec,
    x0: &DVector<f64>,
    i0: RegimeId,
    t_end: f64,
    r: f64,
    grid: &[f64],
    blowup: f64,
    rng: &mut ChaCha8Rng,
) -> Trajectory {
    let mut t = 0.0;
    let mut x = x0.clone();
    let mut i = i0;
    let mut gi = 0usize;
    let mut samples = Vec::with_capacity(grid.len());
    let mut switches = Vec::new();

    loop {
        let tau = -(1.0 - rng.random::<f64>()).ln() / r;
        let t_next = (t + tau).min(t_end);

        // Grid waypoints inside (t, t_next] advance the actual state so that
        // diffusive paths stay consistent with their own samples.
        while gi < grid.len() && grid[gi] <= t_next {
            x = flow_step(&spec.regimes[i], &x, grid[gi] - t, rng);
            t = grid[gi];
            samples.push(Sample {
                t,
                regime: i,
                state: x.clone(),
            });
            gi += 1;
        }
        if x.amax() > blowup {
            return Trajectory {
                samples,
                switches,
                blowup: Some(t),
            };
        }
        if t + tau >= t_end {
            return Trajectory {
                samples,
                switches,
                blowup: None,
            };
        }
        x = flow_step(&spec.regimes[i], &x, t_next - t, rng);
        t = t_next;
        if x.amax() > blowup {
            return Trajectory {
                samples,
                switches,
                blowup: Some(t),
            };
        }
        // Thinned regime jump: target j with probability a(x, i, j) / r.
        let rates = eval_rate_row(spec, &x, i);
        let u: f64 = rng.random::<f64>() * r;
        let mut acc = 0.0;
        for (j, &aj) in rates.iter().enumerate() {
            if aj <= 0.0 {
                continue;
            }
            acc += aj;
            if u < acc {
                switches.push(Switch { t, from: i, to: j });
                i = j;
                break;
            }
        }
    }
}

/// Sample along a renormalized path: time, regime, and `log ||X_t||_M`.
#[derive(Debug, Clone)]
pub struct LogSample {
    pub t: f64,
    pub regime: RegimeId,
    pub log_norm: f64,
}

#[derive(Debug, Clone)]
pub struct LogTrajectory {
    pub samples: Vec<LogSample>,
    pub switches: Vec<Switch>,
}

/// Whether the renormalized log kernel applies: all regimes linear with zero
/// offset and no noise, and the metric anchored at the origin.
pub fn log_kernel_eligible(spec: &SwitchingSpec) -> bool {
    spec.regimes.iter().all(|reg| match reg {
        RegimeDynamics::AffineFlow { c, .. } => c.iter().all(|&v| v == 0.0),
        RegimeDynamics::OrnsteinUhlenbeck { .. } => false,
    }) && spec.metric.x0.iter().all(|&v| v == 0.0)
}

/// Renormalized kernel for linear noise-free systems: identical event
/// randomness to `simulate_path`, but the state is carried as
/// `(X / ||X||_M, log ||X||_M)` so norms never leave floating-point range.
/// State-dependent rates are evaluated at the reconstructed `x` with the
/// exponential clamped into range; once `log ||X||` is large the logistic is
/// saturated anyway, so the clamp is exact for every reachable query.
pub fn simulate_log_norm(
    spec: &SwitchingSpec,
    x0: &DVector<f64>,
    i0: RegimeId,
    t_end: f64,
    seed: SeedSpec,
    opts: &SimOptions,
) -> Result<LogTrajectory> {
    let report = crate::model::validate_spec(spec)?;
    if !log_kernel_eligible(spec) {
        return Err(Error::unsupported(
            "log-norm kernel needs linear noise-free regimes and an origin anchor",
        ));
    }
    if x0.len() != spec.dim {
        return Err(Error::shape(format!(
            "x0 has length {}, expected {}",
            x0.len(),
            spec.dim
        )));
    }
    if i0 >= spec.n_regimes() {
        return Err(Error::domain(format!("initial regime {i0} out of range")));
    }
    let norm0 = spec.metric.norm(x0);
    if !(norm0 > 0.0) {
        return Err(Error::domain(
            "log-norm kernel needs a nonzero initial state",
        ));
    }
    let r = opts.event_rate(report.abar)?;
    let grid = opts.checked_grid(t_end)?;
    let mut rng = seed.rng();

    let mut t = 0.0;
    let mut v = x0 / norm0;
    let mut ell = norm0.ln();
    let mut i = i0;
    let mut gi = 0usize;
    let mut samples = Vec::with_capacity(grid.len());
    let mut switches = Vec::new();

    let advance = |v: &mut DVector<f64>, ell: &mut f64, i: RegimeId, dt: f64| {
        if dt <= 0.0 {
            return;
        }
        let a = spec.regimes[i].a();
        let y = if spec.dim == 1 {
            v.clone() * (a[(0, 0)] * dt).exp()
        } else {
            (a * dt).exp() * &*v
        };
        let ny = spec.metric.norm(&y);
        *ell += ny.ln();
        *v = y / ny;
    };
    // Reconstruct x = v e^ell for rate evaluation; the clamp keeps the
    // product finite and leaves every saturated logistic saturated.
    let reconstruct = |v: &DVector<f64>, ell: f64| -> DVector<f64> { v * ell.min(300.0).exp() };

    loop {
        let tau = -(1.0 - rng.random::<f64>()).ln() / r;
        let t_next = (t + tau).min(t_end);
        while gi < grid.len() && grid[gi] <= t_next {
            advance(&mut v, &mut ell, i, grid[gi] - t);
            t = grid[gi];
            samples.push(LogSample {
                t,
                regime: i,
                log_norm: ell,
            });
            gi += 1;
        }
        if t + tau >= t_end {
            return Ok(LogTrajectory { samples, switches });
        }
        advance(&mut v, &mut ell, i, t_next - t);
        t = t_next;
        let x = reconstruct(&v, ell);
        let rates = eval_rate_row(spec, &x, i);
        let u: f64 = rng.random::<f64>() * r;
        let mut acc = 0.0;
        for (j, &aj) in rates.iter().enumerate() {
            if aj <= 0.0 {
                continue;
            }
            acc += aj;
            if u < acc {
                switches.push(Switch { t, from: i, to: j });
                i = j;
                break;
            }
        }
    }
}

/// Scalar observable of the pair state.
#[derive(Debug, Clone)]
pub enum Observable {
    /// `x[k]`.
    Coordinate(usize),
    /// `x[k]^2`.
    SquaredCoordinate(usize),
    /// `log d(x, x0)` in the spec metric; uses the renormalized kernel when
    /// the spec is eligible.
    LogNormX,
    /// `1{ i = regime }`.
    RegimeIndicator(RegimeId),
    /// `d(x, center)^q` in the spec metric.
    DistPow { center: DVector<f64>, q: f64 },
    /// Per-regime quadratic form `x' P_i x + b_i' x + c_i`.
    Quadratic(QuadraticForm),
}

/// Per-regime quadratic function `f(x, i) = x' P_i x + b_i' x + c_i`.
#[derive(Debug, Clone)]
pub struct QuadraticForm {
    pub p: Vec<DMatrix<f64>>,
    pub b: Vec<DVector<f64>>,
    pub c: Vec<f64>,
}

impl QuadraticForm {
    pub fn eval(&self, x: &DVector<f64>, i: RegimeId) -> f64 {
        let p = &self.p[i];
        (x.transpose() * p * x)[(0, 0)] + self.b[i].dot(x) + self.c[i]
    }

    fn gradient(&self, x: &DVector<f64>, i: RegimeId) -> DVector<f64> {
        let p = &self.p[i];
        p * x + p.transpose() * x + &self.b[i]
    }

    fn check(&self, spec: &SwitchingSpec) -> Result<()> {
        let n = spec.n_regimes();
        let d = spec.dim;
        if self.p.len() != n || self.b.len() != n || self.c.len() != n {
            return Err(Error::shape("quadratic form must cover every regime"));
        }
        for i in 0..n {
            if self.p[i].nrows() != d || self.p[i].ncols() != d || self.b[i].len() != d {
                return Err(Error::shape(format!(
                    "quadratic form regime {i} has wrong shape"
                )));
            }
        }
        Ok(())
    }
}

impl Observable {
    fn eval_state(&self, metric: &MetricSpec, x: &DVector<f64>, i: RegimeId) -> f64 {
        match self {
            Observable::Coordinate(k) => x[*k],
            Observable::SquaredCoordinate(k) => x[*k] * x[*k],
            Observable::LogNormX => metric.d(x, &metric.x0).ln(),
            Observable::RegimeIndicator(j) => {
                if i == *j {
                    1.0
                } else {
                    0.0
                }
            }
            Observable::DistPow { center, q } => metric.d(x, center).powf(*q),
            Observable::Quadratic(f) => f.eval(x, i),
        }
    }

    fn check(&self, spec: &SwitchingSpec) -> Result<()> {
        match self {
            Observable::Coordinate(k) | Observable::SquaredCoordinate(k) => {
                if *k >= spec.dim {
                    return Err(Error::shape(format!("coordinate {k} out of range")));
                }
            }
            Observable::RegimeIndicator(j) => {
                if *j >= spec.n_regimes() {
                    return Err(Error::domain(format!("regime {j} out of range")));
                }
            }
            Observable::DistPow { center, q } => {
                if center.len() != spec.dim {
                    return Err(Error::shape(
                        "distance center must match the spec dimension",
                    ));
                }
                if !(*q > 0.0 && *q <= 1.0) {
                    return Err(Error::domain(format!(
                        "distance exponent q = {q} outside (0, 1]"
                    )));
                }
            }
            Observable::Quadratic(f) => f.check(spec)?,
            Observable::LogNormX => {}
        }
        Ok(())
    }
}

/// Monte Carlo curve: mean and standard error of an observable at each grid
/// time, over `n_paths` independent streams.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ExpectationCurve {
    pub grid: Vec<f64>,
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
    pub n_paths: usize,
}

#[allow(clippy::too_many_arguments)]
pub fn estimate_expectation(
    spec: &SwitchingSpec,
    x0: &DVector<f64>,
    i0: RegimeId,
    t_end: f64,
    observable: &Observable,
    n_paths: usize,
    seed: SeedSpec,
    opts: &SimOptions,
) -> Result<ExpectationCurve> {
    if n_paths == 0 {
        return Err(Error::domain("need at least one path"));
    }
    observable.check(spec)?;
    let grid = opts.checked_grid(t_end)?;
    let use_log_kernel = matches!(observable, Observable::LogNormX) && log_kernel_eligible(spec);

    let per_path: Vec<Result<Vec<f64>>> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let s = seed.with_stream(seed.stream.wrapping_add(p as u64));
            if use_log_kernel {
                let tr = simulate_log_norm(spec, x0, i0, t_end, s, opts)?;
                Ok(tr.samples.iter().map(|smp| smp.log_norm).collect())
            } else {
                let tr = simulate_path(spec, x0, i0, t_end, s, opts)?;
                if let Some(tb) = tr.blowup {
                    return Err(Error::numerical(format!(
                        "path {p} exceeded the blow-up guard at t = {tb:.6}"
                    )));
                }
                Ok(tr
                    .samples
                    .iter()
                    .map(|smp| observable.eval_state(&spec.metric, &smp.state, smp.regime))
                    .collect())
            }
        })
        .collect();

    let mut columns: Vec<Vec<f64>> = vec![Vec::with_capacity(n_paths); grid.len()];
    for path in per_path {
        let vals = path?;
        for (k, v) in vals.into_iter().enumerate() {
            columns[k].push(v);
        }
    }
    let mut mean = Vec::with_capacity(grid.len());
    let mut stderr = Vec::with_capacity(grid.len());
    for col in &columns {
        let (m, se) = crate::stats::mean_stderr(col);
        mean.push(m);
        stderr.push(se);
    }
    Ok(ExpectationCurve {
        grid,
        mean,
        stderr,
        n_paths,
    })
}

/// Both sides of the forward-generator identity at `(x, i)`:
/// `lhs = (E f(X_t, I_t) - f(x, i)) / t` against the exact
/// `rhs = grad f . (A x + c) + tr(sigma' P sigma) + sum_j a(x,i,j) (f(x,j) - f(x,i))`.
/// `lhs -> rhs` as `t -> 0` at first order in `t` (affine regimes) plus the
/// Euler-Maruyama step bias for diffusive regimes.
#[derive(Debug, Clone)]
pub struct GeneratorCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub stderr: f64,
    pub t: f64,
}

/// Exact action of the generator on a per-regime quadratic form.
pub fn generator_apply(
    spec: &SwitchingSpec,
    f: &QuadraticForm,
    x: &DVector<f64>,
    i: RegimeId,
) -> Result<f64> {
    f.check(spec)?;
    if x.len() != spec.dim {
        return Err(Error::shape("x has wrong dimension"));
    }
    if i >= spec.n_regimes() {
        return Err(Error::domain(format!("regime {i} out of range")));
    }
    let reg = &spec.regimes[i];
    let drift = reg.a() * x + reg.c();
    let mut total = f.gradient(x, i).dot(&drift);
    if let Some(sigma) = reg.sigma() {
        // (1/2) tr(sigma sigma' Hess f) with Hess = P + P'.
        let p = &f.p[i];
        let sym = (p + p.transpose()) * 0.5;
        total += (sigma.transpose() * sym * sigma).trace();
    }
    let rates = eval_rate_row(spec, x, i);
    let fi = f.eval(x, i);
    for (j, &aj) in rates.iter().enumerate() {
        if aj > 0.0 {
            total += aj * (f.eval(x, j) - fi);
        }
    }
    Ok(total)
}

#[allow(clippy::too_many_arguments)]
pub fn generator_check(
    spec: &SwitchingSpec,
    f: &QuadraticForm,
    x: &DVector<f64>,
    i: RegimeId,
    t: f64,
    n_paths: usize,
    seed: SeedSpec,
    opts: &SimOptions,
) -> Result<GeneratorCheck> {
    if !(t > 0.0) {
        return Err(Error::domain("generator check needs t > 0"));
    }
    let rhs = generator_apply(spec, f, x, i)?;
    let f0 = f.eval(x, i);
    let mut o = opts.clone();
    o.grid = vec![t];
    let curve = estimate_expectation(
        spec,
        x,
        i,
        t,
        &Observable::Quadratic(f.clone()),
        n_paths,
        seed,
        &o,
    )?;
    Ok(GeneratorCheck {
        lhs: (curve.mean[0] - f0) / t,
        rhs,
        stderr: curve.stderr[0] / t,
        t,
    })
}
