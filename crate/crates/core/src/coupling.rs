//! Three couplings of switching processes and the decay statistics built on
//! them.
//!
//! * `couple_constant`: for state-independent rates. Both copies run
//!   independently (own event clocks, own noise) until their regimes first
//!   agree; from then on the regimes are merged and the continuous parts run
//!   synchronously (same flow, shared noise), so the pair distance contracts
//!   at the active regime's rate between switches.
//!
//! * `couple_uniformized`: for state-dependent rates, on a single Poisson
//!   clock of rate `r >= 2 abar`. While the regimes agree, one uniform per
//!   event is split over four intervals: `I` jumps alone (length
//!   `sum_j (aX_j - aY_j)_+ / r`), `J` jumps alone (mirror), both jump to
//!   the same target (`sum_j min(aX_j, aY_j) / r`), nothing happens (the
//!   complement `1 - sum_j max(aX_j, aY_j) / r`). The per-`j` identity
//!   `(p-q)_+ + (q-p)_+ + min = max` makes the four lengths tile `[0, 1]`
//!   exactly. An `I`-alone or `J`-alone draw is a separation event; its
//!   probability is at most `kappa d(X, Y) / r`, which is what makes
//!   separations rare when the copies are close. While the regimes differ
//!   the two thinning decisions are drawn independently.
//!
//! * `couple_with_dominating`: couples one copy of `(X, I)` with a
//!   birth-death chain `L` on the blocks of a partition, so that after the
//!   first time `n_I = L` the block index of `I` never falls below `L`. At
//!   each event an independent fair Bernoulli `B` splits the move budget:
//!   away from coincidence one side moves at doubled probabilities; at
//!   coincidence `B = 1` plays a table that moves `(I, L)` jointly, with the
//!   up-moves of `I` dragging `L` along with probability `b(n)/sum_up` so
//!   that both marginals stay exact.
//!
//! All kernels are pure functions of `(seed, stream)`. The constant coupling
//! uses streams `2s` and `2s + 1` for its independent phase (and the `2s`
//! stream alone after merging); the other kernels use stream `s`.

use nalgebra::DVector;
use rand::prelude::*;
use rayon::prelude::*;

use crate::chain::birth_death_rates;
use crate::model::{eval_rate_row, rate_extrema, validate_spec, RegimeId, SwitchingSpec};
use crate::sim::{flow_step, flow_step_pair_shared, SeedSpec};
use crate::{Error, Result};

/// Controls shared by the coupling kernels. `r` overrides the event rate
/// (validated against the mode's floor), `grid` lists sample times, `delta`
/// scales the tilde cost `min(d^q / delta, 1)`, `rho` enables the
/// contraction-ledger diagnostic for deterministic regimes, `l0` seeds the
/// dominating chain, and `record_partitions` stores the four-interval split
/// at every coincident event.
#[derive(Debug, Clone)]
pub struct CoupleOptions {
    pub r: Option<f64>,
    pub grid: Vec<f64>,
    pub blowup: f64,
    pub delta: f64,
    pub rho: Option<Vec<f64>>,
    pub l0: usize,
    pub record_partitions: bool,
}

impl Default for CoupleOptions {
    fn default() -> Self {
        CoupleOptions {
            r: None,
            grid: Vec::new(),
            blowup: 1e12,
            delta: 1.0,
            rho: None,
            l0: 0,
            record_partitions: false,
        }
    }
}

impl CoupleOptions {
    fn sim_opts(&self) -> crate::sim::SimOptions {
        crate::sim::SimOptions {
            r: self.r,
            grid: self.grid.clone(),
            blowup: self.blowup,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoupleMode {
    Constant,
    Uniformized,
    Dominating,
}

/// One sampled instant of a coupled run. Pair couplings fill `j`, `y`, and
/// `dist`; the dominating coupling fills `l`.
#[derive(Debug, Clone, serde::Serialize)]
pub struct PairSample {
    pub t: f64,
    pub i: RegimeId,
    pub j: Option<RegimeId>,
    pub l: Option<usize>,
    pub x: DVector<f64>,
    pub y: Option<DVector<f64>>,
    pub dist: Option<f64>,
}

/// The four-interval split of a coincident uniformized event, with
/// per-target sub-allocations in regime-index order.
#[derive(Debug, Clone, serde::Serialize)]
pub struct JumpPartition {
    /// `(aX_j - aY_j)_+ / r` per target.
    pub x_alone: Vec<f64>,
    /// `(aY_j - aX_j)_+ / r` per target.
    pub y_alone: Vec<f64>,
    /// `min(aX_j, aY_j) / r` per target.
    pub together: Vec<f64>,
    /// `1 - sum_j max(aX_j, aY_j) / r`.
    pub none: f64,
    pub r: f64,
}

impl JumpPartition {
    /// Interval lengths `[lambda0, lambda1, lambda2, lambda3]`.
    pub fn lambda(&self) -> [f64; 4] {
        [
            self.x_alone.iter().sum(),
            self.y_alone.iter().sum(),
            self.together.iter().sum(),
            self.none,
        ]
    }
}

/// Outcome of one coincident event.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PartitionOutcome {
    XAlone(RegimeId),
    YAlone(RegimeId),
    Both(RegimeId),
    Stay,
}

/// Build the four-part split at a coincident event `(x, i), (y, i)`.
pub fn jump_partition(
    spec: &SwitchingSpec,
    x: &DVector<f64>,
    y: &DVector<f64>,
    i: RegimeId,
    r: f64,
) -> JumpPartition {
    let ax = eval_rate_row(spec, x, i);
    let ay = eval_rate_row(spec, y, i);
    let n = ax.len();
    let mut x_alone = vec![0.0; n];
    let mut y_alone = vec![0.0; n];
    let mut together = vec![0.0; n];
    let mut max_sum = 0.0;
    for j in 0..n {
        x_alone[j] = (ax[j] - ay[j]).max(0.0) / r;
        y_alone[j] = (ay[j] - ax[j]).max(0.0) / r;
        together[j] = ax[j].min(ay[j]) / r;
        max_sum += ax[j].max(ay[j]) / r;
    }
    JumpPartition {
        x_alone,
        y_alone,
        together,
        none: 1.0 - max_sum,
        r,
    }
}

fn sample_partition(part: &JumpPartition, u: f64) -> PartitionOutcome {
    let mut acc = 0.0;
    for (j, &p) in part.x_alone.iter().enumerate() {
        acc += p;
        if u < acc {
            return PartitionOutcome::XAlone(j);
        }
    }
    for (j, &p) in part.y_alone.iter().enumerate() {
        acc += p;
        if u < acc {
            return PartitionOutcome::YAlone(j);
        }
    }
    for (j, &p) in part.together.iter().enumerate() {
        acc += p;
        if u < acc {
            return PartitionOutcome::Both(j);
        }
    }
    PartitionOutcome::Stay
}

/// A coupled run: samples at the grid times plus the meeting, separation,
/// and diagnostics data the invariants talk about.
#[derive(Debug, Clone, serde::Serialize)]
pub struct CoupledRun {
    pub samples: Vec<PairSample>,
    /// First time the regimes agree (0 when they start equal). For the
    /// dominating coupling, first time `n_I = L`.
    pub t_meet: Option<f64>,
    /// First time the regimes separate again after having agreed; `None`
    /// means never.
    pub t_sep: Option<f64>,
    /// Partition records at coincident events, when requested.
    pub partitions: Vec<JumpPartition>,
    /// Largest observed `d_after / (d_before e^{-rho(i) dt})` over
    /// deterministic merged flow intervals, when `rho` was supplied.
    pub contraction_max_ratio: Option<f64>,
    /// Exact minimum of `n_I - L` over event and sample times after the
    /// first coincidence (dominating coupling only).
    pub min_slack_after_coincidence: Option<i64>,
    pub blowup: Option<f64>,
}

fn check_pair_inputs(
    spec: &SwitchingSpec,
    x: &DVector<f64>,
    y: &DVector<f64>,
    i: RegimeId,
    j: RegimeId,
) -> Result<()> {
    if x.len() != spec.dim || y.len() != spec.dim {
        return Err(Error::shape("initial states must match the spec dimension"));
    }
    if i >= spec.n_regimes() || j >= spec.n_regimes() {
        return Err(Error::domain("initial regimes out of range"));
    }
    Ok(())
}

/// Track the contraction ledger over one deterministic merged interval.
struct ContractionLedger<'a> {
    rho: Option<&'a [f64]>,
    max_ratio: f64,
    seen: bool,
}

impl<'a> ContractionLedger<'a> {
    fn new(rho: Option<&'a [f64]>) -> Self {
        ContractionLedger {
            rho,
            max_ratio: 0.0,
            seen: false,
        }
    }

    fn observe(&mut self, spec: &SwitchingSpec, i: RegimeId, dt: f64, d_before: f64, d_after: f64) {
        let Some(rho) = self.rho else { return };
        if dt <= 0.0 || d_before <= 0.0 {
            return;
        }
        if !spec.regimes[i].is_deterministic() {
            return;
        }
        let ratio = d_after / (d_before * (-rho[i] * dt).exp());
        if ratio > self.max_ratio {
            self.max_ratio = ratio;
        }
        self.seen = true;
    }

    fn result(&self) -> Option<f64> {
        if self.seen {
            Some(self.max_ratio)
        } else {
            None
        }
    }
}

/// Coupling for constant-rate specs: independent copies until the regimes
/// first agree, merged regimes and synchronous continuous parts afterwards.
#[allow(clippy::too_many_arguments)]
pub fn couple_constant(
    spec: &SwitchingSpec,
    x0: &DVector<f64>,
    y0: &DVector<f64>,
    i0: RegimeId,
    j0: RegimeId,
    t_end: f64,
    seed: SeedSpec,
    opts: &CoupleOptions,
) -> Result<CoupledRun> {
    let report = validate_spec(spec)?;
    check_pair_inputs(spec, x0, y0, i0, j0)?;
    let (high, low, _) = rate_extrema(spec)?;
    if (&high - &low).abs().max() > 0.0 {
        return Err(Error::domain(
            "constant-rate coupling requires state-independent rates",
        ));
    }
    let r = opts.sim_opts().event_rate(report.abar)?;
    let grid = opts.sim_opts().checked_grid(t_end)?;
    if let Some(rho) = &opts.rho {
        if rho.len() != spec.n_regimes() {
            return Err(Error::shape("rho must cover every regime"));
        }
    }

    let mut rng_x = seed.with_stream(seed.stream.wrapping_mul(2)).rng();
    let mut rng_y = seed
        .with_stream(seed.stream.wrapping_mul(2).wrapping_add(1))
        .rng();

    let mut t = 0.0;
    let mut x = x0.clone();
    let mut y = y0.clone();
    let mut i = i0;
    let mut j = j0;
    let mut gi = 0usize;
    let mut samples = Vec::with_capacity(grid.len());
    let mut ledger = ContractionLedger::new(opts.rho.as_deref());
    let mut t_meet = if i == j { Some(0.0) } else { None };

    let mut e_x = t - (1.0 - rng_x.random::<f64>()).ln() / r;
    let mut e_y = t - (1.0 - rng_y.random::<f64>()).ln() / r;

    let finish = |samples: Vec<PairSample>,
                  t_meet: Option<f64>,
                  max_ratio: Option<f64>,
                  blowup: Option<f64>| CoupledRun {
        samples,
        t_meet,
        t_sep: None,
        partitions: Vec::new(),
        contraction_max_ratio: max_ratio,
        min_slack_after_coincidence: None,
        blowup,
    };

    // Phase 1: independent evolution until the regimes agree.
    while t_meet.is_none() {
        let next_grid = grid.get(gi).copied().unwrap_or(f64::INFINITY);
        let tn = e_x.min(e_y).min(next_grid).min(t_end);
        let dt = tn - t;
        x = flow_step(&spec.regimes[i], &x, dt, &mut rng_x);
        y = flow_step(&spec.regimes[j], &y, dt, &mut rng_y);
        t = tn;
        if x.amax() > opts.blowup || y.amax() > opts.blowup {
            return Ok(finish(samples, t_meet, ledger.result(), Some(t)));
        }
        if tn == next_grid {
            samples.push(PairSample {
                t,
                i,
                j: Some(j),
                l: None,
                x: x.clone(),
                y: Some(y.clone()),
                dist: Some(spec.metric.d(&x, &y)),
            });
            gi += 1;
        } else if tn == t_end {
            return Ok(finish(samples, t_meet, ledger.result(), None));
        } else if tn == e_x {
            let u: f64 = rng_x.random::<f64>() * r;
            let mut acc = 0.0;
            for (k, &a) in eval_rate_row(spec, &x, i).iter().enumerate() {
                acc += a;
                if a > 0.0 && u < acc {
                    i = k;
                    break;
                }
            }
            e_x = t - (1.0 - rng_x.random::<f64>()).ln() / r;
            if i == j {
                t_meet = Some(t);
            }
        } else {
            let u: f64 = rng_y.random::<f64>() * r;
            let mut acc = 0.0;
            for (k, &a) in eval_rate_row(spec, &y, j).iter().enumerate() {
                acc += a;
                if a > 0.0 && u < acc {
                    j = k;
                    break;
                }
            }
            e_y = t - (1.0 - rng_y.random::<f64>()).ln() / r;
            if i == j {
                t_meet = Some(t);
            }
        }
    }

    // Phase 2: merged regimes, synchronous continuous parts, single stream.
    let mut e_next = t - (1.0 - rng_x.random::<f64>()).ln() / r;
    loop {
        let next_grid = grid.get(gi).copied().unwrap_or(f64::INFINITY);
        let tn = e_next.min(next_grid).min(t_end);
        let dt = tn - t;
        let d_before = spec.metric.d(&x, &y);
        let (nx, ny) = flow_step_pair_shared(&spec.regimes[i], &x, &y, dt, &mut rng_x);
        x = nx;
        y = ny;
        ledger.observe(spec, i, dt, d_before, spec.metric.d(&x, &y));
        t = tn;
        if x.amax() > opts.blowup || y.amax() > opts.blowup {
            return Ok(finish(samples, t_meet, ledger.result(), Some(t)));
        }
        if tn == next_grid {
            samples.push(PairSample {
                t,
                i,
                j: Some(j),
                l: None,
                x: x.clone(),
                y: Some(y.clone()),
                dist: Some(spec.metric.d(&x, &y)),
            });
            gi += 1;
        } else if tn == t_end {
            return Ok(finish(samples, t_meet, ledger.result(), None));
        } else {
            // Constant rates: both copies share the same row, so one
            // thinning draw moves them together.
            let u: f64 = rng_x.random::<f64>() * r;
            let mut acc = 0.0;
            for (k, &a) in eval_rate_row(spec, &x, i).iter().enumerate() {
                acc += a;
                if a > 0.0 && u < acc {
                    i = k;
                    j = k;
                    break;
                }
            }
            e_next = t - (1.0 - rng_x.random::<f64>()).ln() / r;
        }
    }
}

/// Single-clock coupling for state-dependent rates; see the module docs for
/// the four-interval construction.
#[allow(clippy::too_many_arguments)]
pub fn couple_uniformized(
    spec: &SwitchingSpec,
    x0: &DVector<f64>,
    y0: &DVector<f64>,
    i0: RegimeId,
    j0: RegimeId,
    t_end: f64,
    seed: SeedSpec,
    opts: &CoupleOptions,
) -> Result<CoupledRun> {
    let report = validate_spec(spec)?;
    check_pair_inputs(spec, x0, y0, i0, j0)?;
    let floor = 2.0 * report.abar;
    let r = match opts.r {
        Some(r) if r < floor => {
            return Err(Error::domain(format!(
                "uniformized coupling needs r >= 2 abar = {floor}, got {r}"
            )));
        }
        Some(r) => r,
        None => floor.max(1.0),
    };
    let grid = opts.sim_opts().checked_grid(t_end)?;
    if let Some(rho) = &opts.rho {
        if rho.len() != spec.n_regimes() {
            return Err(Error::shape("rho must cover every regime"));
        }
    }

    let mut rng = seed.rng();
    let mut t = 0.0;
    let mut x = x0.clone();
    let mut y = y0.clone();
    let mut i = i0;
    let mut j = j0;
    let mut gi = 0usize;
    let mut samples = Vec::with_capacity(grid.len());
    let mut partitions = Vec::new();
    let mut ledger = ContractionLedger::new(opts.rho.as_deref());
    let mut t_meet = if i == j { Some(0.0) } else { None };
    let mut t_sep = None;
    let mut blowup = None;

    'outer: loop {
        let tau = -(1.0 - rng.random::<f64>()).ln() / r;
        let t_event = t + tau;
        loop {
            let next_grid = grid.get(gi).copied().unwrap_or(f64::INFINITY);
            let tn = t_event.min(next_grid).min(t_end);
            let dt = tn - t;
            if i == j {
                let d_before = spec.metric.d(&x, &y);
                let (nx, ny) = flow_step_pair_shared(&spec.regimes[i], &x, &y, dt, &mut rng);
                x = nx;
                y = ny;
                ledger.observe(spec, i, dt, d_before, spec.metric.d(&x, &y));
            } else {
                x = flow_step(&spec.regimes[i], &x, dt, &mut rng);
                y = flow_step(&spec.regimes[j], &y, dt, &mut rng);
            }
            t = tn;
            if x.amax() > opts.blowup || y.amax() > opts.blowup {
                blowup = Some(t);
                break 'outer;
            }
            if tn == next_grid {
                samples.push(PairSample {
                    t,
                    i,
                    j: Some(j),
                    l: None,
                    x: x.clone(),
                    y: Some(y.clone()),
                    dist: Some(spec.metric.d(&x, &y)),
                });
                gi += 1;
                continue;
            }
            if tn == t_end {
                break 'outer;
            }
            break;
        }

        if i == j {
            let part = jump_partition(spec, &x, &y, i, r);
            let u: f64 = rng.random();
            match sample_partition(&part, u) {
                PartitionOutcome::XAlone(k) => {
                    i = k;
                    if t_sep.is_none() {
                        t_sep = Some(t);
                    }
                }
                PartitionOutcome::YAlone(k) => {
                    j = k;
                    if t_sep.is_none() {
                        t_sep = Some(t);
                    }
                }
                PartitionOutcome::Both(k) => {
                    i = k;
                    j = k;
                }
                PartitionOutcome::Stay => {}
            }
            if opts.record_partitions {
                partitions.push(part);
            }
        } else {
            // Independent thinning for the two copies.
            let ux: f64 = rng.random::<f64>() * r;
            let mut acc = 0.0;
            for (k, &a) in eval_rate_row(spec, &x, i).iter().enumerate() {
                acc += a;
                if a > 0.0 && ux < acc {
                    i = k;
                    break;
                }
            }
            let uy: f64 = rng.random::<f64>() * r;
            acc = 0.0;
            for (k, &a) in eval_rate_row(spec, &y, j).iter().enumerate() {
                acc += a;
                if a > 0.0 && uy < acc {
                    j = k;
                    break;
                }
            }
            if i == j && t_meet.is_none() {
                t_meet = Some(t);
            }
        }
    }

    Ok(CoupledRun {
        samples,
        t_meet,
        t_sep,
        partitions,
        contraction_max_ratio: ledger.result(),
        min_slack_after_coincidence: None,
        blowup,
    })
}

/// Coupling of one copy of `(X, I)` with the dominating birth-death chain.
pub fn couple_with_dominating(
    spec: &SwitchingSpec,
    partition: &[Vec<RegimeId>],
    x0: &DVector<f64>,
    i0: RegimeId,
    t_end: f64,
    seed: SeedSpec,
    opts: &CoupleOptions,
) -> Result<CoupledRun> {
    let report = validate_spec(spec)?;
    if x0.len() != spec.dim {
        return Err(Error::shape("initial state must match the spec dimension"));
    }
    if i0 >= spec.n_regimes() {
        return Err(Error::domain("initial regime out of range"));
    }
    let nb = partition.len();
    let block_of = crate::chain::partition_blocks(spec, partition)?;
    if opts.l0 >= nb {
        return Err(Error::domain(format!(
            "initial level {} outside the {} partition blocks",
            opts.l0, nb
        )));
    }

    let bd = birth_death_rates(spec, partition)?;
    for n in 0..nb {
        if n + 1 < nb && bd.b[n] <= 0.0 {
            return Err(Error::domain(format!(
                "dominating chain needs b({n}) > 0, got {}",
                bd.b[n]
            )));
        }
        if n >= 1 && bd.d[n] <= 0.0 {
            return Err(Error::domain(format!(
                "dominating chain needs d({n}) > 0, got {}",
                bd.d[n]
            )));
        }
    }

    // Feasible event rate: the coincident move table spends up to
    // 2 (d(n) + abar) of probability mass per event, and the separate-phase
    // L moves spend 2 (b(l) + d(l)) <= 2 (abar + d_max). Raising r beyond
    // the caller's value is harmless: uniformized marginals do not depend
    // on it.
    let d_max = bd.d.iter().cloned().fold(0.0f64, f64::max);
    let r_user = opts.sim_opts().event_rate(report.abar)?;
    let r = r_user.max(2.0 * (report.abar + d_max)).max(1.0);

    let grid = opts.sim_opts().checked_grid(t_end)?;
    let mut rng = seed.rng();
    let mut t = 0.0;
    let mut x = x0.clone();
    let mut i = i0;
    let mut l = opts.l0;
    let mut gi = 0usize;
    let mut samples = Vec::with_capacity(grid.len());
    let mut t_meet = if block_of[i] == l { Some(0.0) } else { None };
    let mut min_slack: Option<i64> = t_meet.map(|_| block_of[i] as i64 - l as i64);
    let mut blowup = None;

    let note_slack = |i: RegimeId, l: usize, min_slack: &mut Option<i64>| {
        if let Some(ms) = min_slack {
            *ms = (*ms).min(block_of[i] as i64 - l as i64);
        }
    };

    'outer: loop {
        let tau = -(1.0 - rng.random::<f64>()).ln() / r;
        let t_event = t + tau;
        loop {
            let next_grid = grid.get(gi).copied().unwrap_or(f64::INFINITY);
            let tn = t_event.min(next_grid).min(t_end);
            x = flow_step(&spec.regimes[i], &x, tn - t, &mut rng);
            t = tn;
            if x.amax() > opts.blowup {
                blowup = Some(t);
                break 'outer;
            }
            if tn == next_grid {
                samples.push(PairSample {
                    t,
                    i,
                    j: None,
                    l: Some(l),
                    x: x.clone(),
                    y: None,
                    dist: None,
                });
                gi += 1;
                continue;
            }
            if tn == t_end {
                break 'outer;
            }
            break;
        }

        let b_coin: bool = rng.random::<f64>() < 0.5;
        let u: f64 = rng.random();
        let n_i = block_of[i];
        if n_i != l {
            if !b_coin {
                // L moves alone at doubled probabilities.
                let p_up = if l + 1 < nb { 2.0 * bd.b[l] / r } else { 0.0 };
                let p_dn = if l > 0 { 2.0 * bd.d[l] / r } else { 0.0 };
                if u < p_up {
                    l += 1;
                } else if u < p_up + p_dn {
                    l -= 1;
                }
            } else {
                // I moves alone at doubled probabilities.
                let rates = eval_rate_row(spec, &x, i);
                let mut acc = 0.0;
                for (k, &a) in rates.iter().enumerate() {
                    if a <= 0.0 {
                        continue;
                    }
                    acc += 2.0 * a / r;
                    if u < acc {
                        i = k;
                        break;
                    }
                }
            }
            if block_of[i] == l {
                if t_meet.is_none() {
                    t_meet = Some(t);
                }
                if min_slack.is_none() {
                    min_slack = Some(0);
                }
            }
            note_slack(i, l, &mut min_slack);
        } else if b_coin {
            // Coincident move table, probabilities doubled against B = 1/2.
            let rates = eval_rate_row(spec, &x, i);
            let n = n_i;
            let mut acc = 0.0;
            let mut moved = false;
            // Down moves of I drag L down.
            if n > 0 {
                let mut down_sum = 0.0;
                for &k in &partition[n - 1] {
                    let a = rates[k];
                    down_sum += a;
                    if a <= 0.0 {
                        continue;
                    }
                    acc += 2.0 * a / r;
                    if !moved && u < acc {
                        i = k;
                        l = n - 1;
                        moved = true;
                    }
                }
                // L falls alone with the leftover death budget.
                let leftover = (bd.d[n] - down_sum).max(0.0);
                acc += 2.0 * leftover / r;
                if !moved && u < acc {
                    l = n - 1;
                    moved = true;
                }
            }
            // Within-block moves of I leave L in place.
            if !moved {
                for &k in &partition[n] {
                    if k == i {
                        continue;
                    }
                    let a = rates[k];
                    if a <= 0.0 {
                        continue;
                    }
                    acc += 2.0 * a / r;
                    if u < acc {
                        i = k;
                        moved = true;
                        break;
                    }
                }
            }
            // Up moves of I drag L up with probability b(n) / sum_up.
            if !moved && n + 1 < nb {
                let sum_up: f64 = partition[n + 1].iter().map(|&k| rates[k]).sum();
                if sum_up > 0.0 {
                    let p_drag = (bd.b[n] / sum_up).min(1.0);
                    for &k in &partition[n + 1] {
                        let a = rates[k];
                        if a <= 0.0 {
                            continue;
                        }
                        acc += 2.0 * a * p_drag / r;
                        if u < acc {
                            i = k;
                            l = n + 1;
                            moved = true;
                            break;
                        }
                        acc += 2.0 * a * (1.0 - p_drag) / r;
                        if u < acc {
                            i = k;
                            moved = true;
                            break;
                        }
                    }
                }
            }
            let _ = moved;
            note_slack(i, l, &mut min_slack);
        } else {
            note_slack(i, l, &mut min_slack);
        }
    }

    Ok(CoupledRun {
        samples,
        t_meet,
        t_sep: None,
        partitions: Vec::new(),
        contraction_max_ratio: None,
        min_slack_after_coincidence: min_slack,
        blowup,
    })
}

/// Worst-case expansion constant of a tilted sequence: `-min_k q alpha(k)`.
/// Nonpositive when every block contracts.
pub fn worst_case_expansion(q: f64, alpha: &[f64]) -> f64 {
    let min = alpha.iter().cloned().fold(f64::INFINITY, f64::min);
    -(q * min)
}

/// Censored-exponential fit of the regime meeting time under independence.
#[derive(Debug, Clone, serde::Serialize)]
pub struct MeetingRateEstimate {
    /// Fitted rate `theta_c`: met / total observed time.
    pub rate: f64,
    pub stderr: f64,
    pub met: usize,
    pub censored: usize,
}

/// Estimate the exponential meeting-rate constant of two independent copies
/// of the regime chain (constant rates): the first time the chains agree is
/// stochastically bounded by an exponential, and the censored maximum
/// likelihood fit `met / sum min(T, t_max)` recovers its rate.
pub fn estimate_meeting_rate(
    spec: &SwitchingSpec,
    i0: RegimeId,
    j0: RegimeId,
    n_pairs: usize,
    t_max: f64,
    seed: SeedSpec,
) -> Result<MeetingRateEstimate> {
    validate_spec(spec)?;
    let (high, low, _) = rate_extrema(spec)?;
    if (&high - &low).abs().max() > 0.0 {
        return Err(Error::domain(
            "meeting-rate estimation requires state-independent rates",
        ));
    }
    if i0 >= spec.n_regimes() || j0 >= spec.n_regimes() {
        return Err(Error::domain("initial regimes out of range"));
    }
    if n_pairs == 0 || !(t_max > 0.0) {
        return Err(Error::domain("need n_pairs > 0 and t_max > 0"));
    }
    if i0 == j0 {
        return Err(Error::domain(
            "chains starting equal meet at time zero; pick distinct regimes",
        ));
    }

    let n = spec.n_regimes();
    let out_rate: Vec<f64> = (0..n).map(|i| low.row(i).sum()).collect();
    let mut total_time = 0.0;
    let mut met = 0usize;
    for p in 0..n_pairs {
        let mut rng = seed.with_stream(seed.stream.wrapping_add(p as u64)).rng();
        let (mut i, mut j) = (i0, j0);
        let mut t = 0.0;
        loop {
            let lam = out_rate[i] + out_rate[j];
            if lam <= 0.0 {
                t = t_max;
                break;
            }
            t -= (1.0 - rng.random::<f64>()).ln() / lam;
            if t >= t_max {
                t = t_max;
                break;
            }
            let pick_i = rng.random::<f64>() * lam < out_rate[i];
            let moving = if pick_i { i } else { j };
            let u: f64 = rng.random::<f64>() * out_rate[moving];
            let mut acc = 0.0;
            let mut target = moving;
            for k in 0..n {
                acc += low[(moving, k)];
                if low[(moving, k)] > 0.0 && u < acc {
                    target = k;
                    break;
                }
            }
            if pick_i {
                i = target;
            } else {
                j = target;
            }
            if i == j {
                met += 1;
                break;
            }
        }
        total_time += t;
    }
    if met == 0 {
        return Err(Error::numerical(
            "no pair met before t_max; cannot estimate the meeting rate",
        ));
    }
    let rate = met as f64 / total_time;
    Ok(MeetingRateEstimate {
        rate,
        stderr: rate / (met as f64).sqrt(),
        met,
        censored: n_pairs - met,
    })
}

/// Decay curve of the truncated pair costs along a coupling.
#[derive(Debug, Clone, serde::Serialize)]
pub struct DecayCurve {
    pub grid: Vec<f64>,
    /// `E[1_{I != J} + 1_{I = J} min(d^q, 1)]` per grid time.
    pub mean_trunc: Vec<f64>,
    pub stderr_trunc: Vec<f64>,
    /// Same with `min(d^q / delta, 1)` in the coincident branch.
    pub mean_tilde: Vec<f64>,
    pub stderr_tilde: Vec<f64>,
    /// Exponential rate fitted to the tail half of the truncated curve,
    /// with a batched standard error (8 path batches). `None` when the tail
    /// has nonpositive means.
    pub fitted_rate: Option<f64>,
    pub fitted_rate_se: Option<f64>,
    pub n_paths: usize,
}

/// Run `n_paths` coupled pairs and estimate both truncated costs per grid
/// time, plus a tail exponential fit.
#[allow(clippy::too_many_arguments)]
pub fn wasserstein_decay_curve(
    spec: &SwitchingSpec,
    x0: &DVector<f64>,
    y0: &DVector<f64>,
    i0: RegimeId,
    j0: RegimeId,
    t_grid: &[f64],
    n_paths: usize,
    q: f64,
    mode: CoupleMode,
    seed: SeedSpec,
    opts: &CoupleOptions,
) -> Result<DecayCurve> {
    if n_paths < 100 {
        return Err(Error::domain("decay curves need at least 100 paths"));
    }
    if t_grid.is_empty() {
        return Err(Error::domain("decay curves need a nonempty time grid"));
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::domain(format!(
            "cost exponent q = {q} outside (0, 1]"
        )));
    }
    if !(opts.delta > 0.0) {
        return Err(Error::domain("tilde scale delta must be positive"));
    }
    let t_end = *t_grid.last().unwrap();
    let mut run_opts = opts.clone();
    run_opts.grid = t_grid.to_vec();
    run_opts.record_partitions = false;

    let per_path: Vec<Result<(Vec<f64>, Vec<f64>)>> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let s = seed.with_stream(seed.stream.wrapping_add(p as u64));
            let run = match mode {
                CoupleMode::Constant => couple_constant(spec, x0, y0, i0, j0, t_end, s, &run_opts)?,
                CoupleMode::Uniformized => {
                    couple_uniformized(spec, x0, y0, i0, j0, t_end, s, &run_opts)?
                }
                CoupleMode::Dominating => {
                    return Err(Error::unsupported(
                        "decay curves need a pair coupling, not the dominating one",
                    ));
                }
            };
            let mut trunc = Vec::with_capacity(t_grid.len());
            let mut tilde = Vec::with_capacity(t_grid.len());
            for sample in &run.samples {
                let same = sample.j == Some(sample.i);
                let dq = sample.dist.unwrap_or(f64::INFINITY).powf(q);
                trunc.push(if same { dq.min(1.0) } else { 1.0 });
                tilde.push(if same {
                    (dq / opts.delta).min(1.0)
                } else {
                    1.0
                });
            }
            // A blown-up pair is far apart in every truncated cost.
            while trunc.len() < t_grid.len() {
                trunc.push(1.0);
                tilde.push(1.0);
            }
            Ok((trunc, tilde))
        })
        .collect();

    let mut cols_trunc: Vec<Vec<f64>> = vec![Vec::with_capacity(n_paths); t_grid.len()];
    let mut cols_tilde: Vec<Vec<f64>> = vec![Vec::with_capacity(n_paths); t_grid.len()];
    for path in per_path {
        let (tr, ti) = path?;
        for (k, v) in tr.into_iter().enumerate() {
            cols_trunc[k].push(v);
        }
        for (k, v) in ti.into_iter().enumerate() {
            cols_tilde[k].push(v);
        }
    }

    let mut mean_trunc = Vec::new();
    let mut stderr_trunc = Vec::new();
    let mut mean_tilde = Vec::new();
    let mut stderr_tilde = Vec::new();
    for k in 0..t_grid.len() {
        let (m, s) = crate::stats::mean_stderr(&cols_trunc[k]);
        mean_trunc.push(m);
        stderr_trunc.push(s);
        let (m, s) = crate::stats::mean_stderr(&cols_tilde[k]);
        mean_tilde.push(m);
        stderr_tilde.push(s);
    }

    // Tail fit: slope of ln(mean) over the last half of the grid, overall
    // and per path batch for the standard error.
    let tail_start = t_grid.len() / 2;
    let fit_slope = |means: &[f64]| -> Option<f64> {
        let mut ts = Vec::new();
        let mut ys = Vec::new();
        for k in tail_start..t_grid.len() {
            if means[k] > 0.0 {
                ts.push(t_grid[k]);
                ys.push(means[k].ln());
            }
        }
        if ts.len() < 3 {
            return None;
        }
        let (_, slope, _) = crate::stats::ols_line(&ts, &ys);
        Some(-slope)
    };
    let overall_means: Vec<f64> = mean_trunc.clone();
    let fitted_rate = fit_slope(&overall_means);
    let fitted_rate_se = {
        let n_batches = 8.min(n_paths);
        let mut rates = Vec::new();
        for b in 0..n_batches {
            let lo = b * n_paths / n_batches;
            let hi = (b + 1) * n_paths / n_batches;
            if hi <= lo {
                continue;
            }
            let means: Vec<f64> = (0..t_grid.len())
                .map(|k| {
                    let col = &cols_trunc[k][lo..hi];
                    col.iter().sum::<f64>() / col.len() as f64
                })
                .collect();
            if let Some(rb) = fit_slope(&means) {
                rates.push(rb);
            }
        }
        if rates.len() >= 3 {
            let (_, se) = crate::stats::mean_stderr(&rates);
            Some(se)
        } else {
            None
        }
    };

    Ok(DecayCurve {
        grid: t_grid.to_vec(),
        mean_trunc,
        stderr_trunc,
        mean_tilde,
        stderr_tilde,
        fitted_rate,
        fitted_rate_se,
        n_paths,
    })
}
