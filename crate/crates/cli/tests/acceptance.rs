//! End-to-end acceptance gate. One test per shipped claim, each with its
//! stated tolerance; the oracles here (permutation search, direct chain
//! simulation, uniformization series) are written independently of the
//! library routines they check.

use std::process::Command;
use std::time::Instant;

use nalgebra::{dmatrix, dvector, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use switching::certify::{self, hormander_rank, log_norm};
use switching::chain::{
    constant_rate_generator, optimize_q, stationary_distribution, tilted_exponent, BirthDeathRates,
    GeneratorMatrix,
};
use switching::coupling::{
    couple_constant, couple_uniformized, couple_with_dominating, wasserstein_decay_curve,
    CoupleMode, CoupleOptions, CoupledRun,
};
use switching::model::{MetricSpec, RateModel, RegimeDynamics, SwitchingSpec};
use switching::presets;
use switching::sim::{estimate_expectation, Observable, SeedSpec, SimOptions};
use switching::stats::{ks_statistic, ks_threshold, mean_stderr, ols_line};
use switching::transport::{
    cost_matrix, ot_exact, w1_sorted_1d, EmpiricalMeasure, OtRoute, TransportCost,
};

/// Scalar two-regime system with rates that rise with the state through a
/// logistic, used wherever a state-dependent example is needed. Block 0 of
/// the partition is the expanding regime.
fn sigmoid_spec() -> SwitchingSpec {
    SwitchingSpec {
        dim: 1,
        regimes: vec![
            RegimeDynamics::AffineFlow {
                a: dmatrix![-1.0],
                c: dvector![0.0],
            },
            RegimeDynamics::AffineFlow {
                a: dmatrix![1.0],
                c: dvector![0.0],
            },
        ],
        rates: RateModel::Sigmoid {
            base: dmatrix![0.0, 0.3; 2.0, 0.0],
            amplitude: dmatrix![0.0, 0.2; 1.0, 0.0],
            direction: dvector![1.0],
            offset: 0.1,
        },
        metric: MetricSpec {
            m: dmatrix![1.0],
            q: 1.0,
            x0: dvector![0.0],
            trunc: true,
        },
        rho: None,
        partition: Some(vec![vec![1], vec![0]]),
    }
}

fn pair_batch(n: usize, seed: u64, mut f: impl FnMut(SeedSpec) -> CoupledRun) -> Vec<CoupledRun> {
    (0..n)
        .map(|p| f(SeedSpec::new(seed).with_stream(p as u64)))
        .collect()
}

/// Mean and standard error of `f(run)` at sample index `k`.
fn leg_stats(runs: &[CoupledRun], k: usize, f: impl Fn(&CoupledRun, usize) -> f64) -> (f64, f64) {
    let vals: Vec<f64> = runs.iter().map(|r| f(r, k)).collect();
    mean_stderr(&vals)
}

fn assert_within_3se(label: &str, a: (f64, f64), b: (f64, f64)) {
    let gap = (a.0 - b.0).abs();
    let band = 3.0 * (a.1 * a.1 + b.1 * b.1).sqrt();
    assert!(
        gap <= band,
        "{label}: {} vs {} differ by {gap:.5}, band {band:.5}",
        a.0,
        b.0
    );
}

#[test]
fn criterion_01_two_regime_decay_rate_matches_tilted_bound() {
    let spec = presets::elementary(2.0, 1.0);
    let curv = certify::curvature_report(&spec).unwrap();
    let gen = constant_rate_generator(&spec).unwrap();
    let opt = optimize_q(&gen, &curv.rho).unwrap();

    // Closed form for this pair of rates: the optimum sits at q = 1/2 with
    // exponent (3 - 2 sqrt 2) / 2.
    let eta_exact = (3.0 - 8.0f64.sqrt()) / 2.0;
    assert!((opt.q_star - 0.5).abs() <= 1e-4, "q* = {}", opt.q_star);
    assert!(
        (opt.eta_star - eta_exact).abs() <= 1e-8,
        "eta* = {} vs {eta_exact}",
        opt.eta_star
    );

    let grid: Vec<f64> = (0..=40).map(|k| 0.5 * k as f64).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap();
    let start = Instant::now();
    let curve = pool
        .install(|| {
            wasserstein_decay_curve(
                &spec,
                &dvector![1.0],
                &dvector![-1.0],
                0,
                1,
                &grid,
                10_000,
                0.5,
                CoupleMode::Constant,
                SeedSpec::new(11),
                &CoupleOptions::default(),
            )
        })
        .unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    assert!(
        elapsed < 60.0,
        "decay curve took {elapsed:.1} s on one thread"
    );

    let rate = curve.fitted_rate.expect("tail fit available");
    assert!(rate > 0.0, "fitted rate {rate} not positive");
    let rel = (rate - opt.eta_star).abs() / opt.eta_star;
    assert!(
        rel <= 0.20,
        "fitted rate {rate:.5} vs spectral candidate {:.5}: off by {:.1}%",
        opt.eta_star,
        100.0 * rel
    );
    println!(
        "criterion 1: fitted decay rate {rate:.5}, spectral candidate {:.5}, {:.1}% apart, {elapsed:.1} s",
        opt.eta_star,
        100.0 * rel
    );
}

#[test]
fn criterion_02_two_regime_transient_log_slope() {
    // Reversed rates: the chain spends 2/3 of its time in the expanding
    // regime, so log |X_t| grows at (2/3)(+1) + (1/3)(-1) = 1/3.
    let spec = presets::elementary(1.0, 2.0);
    let grid: Vec<f64> = (0..=20).map(|k| 10.0 * k as f64).collect();
    let opts = SimOptions {
        grid: grid.clone(),
        ..SimOptions::default()
    };
    let curve = estimate_expectation(
        &spec,
        &dvector![1.0],
        0,
        200.0,
        &Observable::LogNormX,
        1000,
        SeedSpec::new(17),
        &opts,
    )
    .unwrap();
    let (_, slope, _) = ols_line(&curve.grid, &curve.mean);
    let target = 1.0 / 3.0;
    assert!(
        (slope - target).abs() <= 0.1 * target,
        "log-norm slope {slope:.4} vs {target:.4}"
    );
    println!("criterion 2: mean log-norm slope {slope:.4} (target 1/3)");
}

#[test]
fn criterion_03_spiral_norms_and_switching_rate_scan() {
    let spec1 = presets::spiral(1.0);
    let a_mat = |i: usize| match &spec1.regimes[i] {
        RegimeDynamics::AffineFlow { a, .. } => a.clone(),
        RegimeDynamics::OrnsteinUhlenbeck { .. } => unreachable!(),
    };

    // Each drift contracts at exactly rate 1 in its own norm.
    for (i, m) in [(0usize, presets::spiral_m0()), (1, presets::spiral_m1())] {
        let ln = log_norm(&a_mat(i), &m).unwrap();
        assert!(
            (ln.mu + 1.0).abs() <= 1e-9,
            "matched norm {i}: mu = {}",
            ln.mu
        );
    }

    // Pre-registered rate scan: slow switching contracts, some rate in the
    // scan expands.
    let scan = [0.05, 1.0, 5.0, 20.0, 50.0];
    let mut exponents = Vec::new();
    for (k, &a) in scan.iter().enumerate() {
        let spec = presets::spiral(a);
        let opts = SimOptions {
            grid: vec![100.0],
            ..SimOptions::default()
        };
        let curve = estimate_expectation(
            &spec,
            &dvector![1.0, 0.0],
            0,
            100.0,
            &Observable::LogNormX,
            300,
            SeedSpec::new(23 + k as u64),
            &opts,
        )
        .unwrap();
        // log d(x0, 0) = 0, so the endpoint mean divided by T is the
        // empirical growth exponent.
        exponents.push((a, curve.mean[0] / 100.0));
    }
    assert!(
        exponents[0].1 < -0.5,
        "slow-switching exponent {} at rate {}",
        exponents[0].1,
        exponents[0].0
    );
    let best = exponents
        .iter()
        .cloned()
        .max_by(|u, v| u.1.partial_cmp(&v.1).unwrap())
        .unwrap();
    assert!(
        best.1 > 0.0,
        "no expanding rate in the scan: best {} at rate {}",
        best.1,
        best.0
    );
    println!(
        "criterion 3: exponent {:.3} at rate {}, largest {:.3} at rate {}",
        exponents[0].1, exponents[0].0, best.1, best.0
    );

    // Cross-norm quantities, reported next to the quoted crosscheck
    // constants -74/6 and 3. The discrepancies are expected and logged:
    // the top generalized eigenvalue of drift 0 against the other metric
    // is +31/9 (expansion is the whole point of the mismatched norm), and
    // the quoted 3 is the Euclidean overshoot; in the mismatched quadratic
    // norm the overshoot is 9.
    let wrong = log_norm(&a_mat(0), &presets::spiral_m1()).unwrap();
    let oracle = 31.0 / 9.0;
    assert!(
        (wrong.mu - oracle).abs() <= 1e-9,
        "mismatched-norm rate {} vs 31/9",
        wrong.mu
    );
    println!(
        "criterion 3: mismatched-norm top rate {:.9} (31/9 = {:.9}); quoted crosscheck -74/6 = {:.6}; discrepancy {:.6}",
        wrong.mu,
        oracle,
        -74.0 / 6.0,
        wrong.mu - (-74.0 / 6.0)
    );

    // exp(A0 t) = exp(-t) (cos t I + sin t R) with R^2 = -I, so the
    // normalized flow norm is periodic; scan one period for the suprema.
    let r_mat = dmatrix![0.0, 3.0; -1.0 / 3.0, 0.0];
    let scale = dmatrix![1.0, 0.0; 0.0, 1.0 / 3.0];
    let scale_inv = dmatrix![1.0, 0.0; 0.0, 3.0];
    let mut sup_mismatched = 0.0f64;
    let mut sup_euclid = 0.0f64;
    for k in 0..=6284 {
        let t = 1e-3 * k as f64;
        let g = DMatrix::identity(2, 2) * t.cos() + &r_mat * t.sin();
        sup_euclid = sup_euclid.max(g.singular_values().max());
        let gm = &scale * &g * &scale_inv;
        sup_mismatched = sup_mismatched.max(gm.singular_values().max());
    }
    assert!((sup_mismatched - 9.0).abs() <= 1e-2, "sup {sup_mismatched}");
    assert!((sup_euclid - 3.0).abs() <= 1e-2, "sup {sup_euclid}");
    println!(
        "criterion 3: sup_t e^t ||exp(A0 t)||: mismatched quadratic norm {sup_mismatched:.4} (exact 9), Euclidean {sup_euclid:.4} (quoted crosscheck 3)"
    );
}

/// Direct event-clock simulation of the regime chain alone, accumulating
/// `int alpha` exactly, and the plug-in decay-rate estimate at `t_end`.
fn chain_mc_eta(
    rates: &DMatrix<f64>,
    alpha: &[f64],
    q: f64,
    i0: usize,
    t_end: f64,
    n_paths: usize,
    seed: u64,
) -> f64 {
    let n = rates.nrows();
    let mut total = 0.0;
    for p in 0..n_paths {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(p as u64);
        let mut i = i0;
        let mut t = 0.0;
        let mut s = 0.0;
        loop {
            let out: f64 = rates.row(i).sum();
            let tau = -(1.0 - rng.random::<f64>()).ln() / out;
            if t + tau >= t_end {
                s += alpha[i] * (t_end - t);
                break;
            }
            s += alpha[i] * tau;
            t += tau;
            let mut u = rng.random::<f64>() * out;
            for j in 0..n {
                u -= rates[(i, j)];
                if u < 0.0 && rates[(i, j)] > 0.0 {
                    i = j;
                    break;
                }
            }
        }
        total += (-q * s).exp();
    }
    -(total / n_paths as f64).ln() / t_end
}

#[test]
fn criterion_04_tilted_exponent_matches_chain_monte_carlo() {
    let q = 0.5;
    let t_end = 50.0;
    let mut rng = ChaCha8Rng::seed_from_u64(4004);
    for case in 0..20u64 {
        let n = 2 + (case as usize % 5);
        // One-way ring for irreducibility plus one random extra edge.
        let mut rates = DMatrix::zeros(n, n);
        for i in 0..n {
            rates[(i, (i + 1) % n)] = rng.random_range(0.2..0.8);
        }
        if n > 2 {
            loop {
                let u = rng.random_range(0..n);
                let v = rng.random_range(0..n);
                if u != v && rates[(u, v)] == 0.0 {
                    rates[(u, v)] = rng.random_range(0.2..0.8);
                    break;
                }
            }
        }
        let alpha: Vec<f64> = (0..n).map(|_| rng.random_range(0.15..0.6)).collect();

        let gen = GeneratorMatrix::from_rates(&rates).unwrap();
        let sol = tilted_exponent(&gen, &alpha, q).unwrap();
        assert!(
            sol.residual <= 1e-9,
            "case {case}: residual {}",
            sol.residual
        );

        let mut mc = chain_mc_eta(&rates, &alpha, q, 0, t_end, 30_000, 9000 + case);
        let mut rel = (mc - sol.eta).abs() / sol.eta;
        if rel > 0.05 {
            mc = chain_mc_eta(&rates, &alpha, q, 0, t_end, 100_000, 9000 + case);
            rel = (mc - sol.eta).abs() / sol.eta;
        }
        assert!(
            rel <= 0.05,
            "case {case} (n = {n}): spectral {:.5} vs simulated {mc:.5}, {:.1}% apart",
            sol.eta,
            100.0 * rel
        );
    }
    println!("criterion 4: 20 random chains within 5%, eigen residuals <= 1e-9");
}

/// Minimum average assignment cost by exhaustive permutation search.
fn perm_min(cost: &DMatrix<f64>) -> f64 {
    fn rec(cost: &DMatrix<f64>, row: usize, used: &mut [bool]) -> f64 {
        let n = cost.nrows();
        if row == n {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        for j in 0..n {
            if !used[j] {
                used[j] = true;
                let v = cost[(row, j)] + rec(cost, row + 1, used);
                if v < best {
                    best = v;
                }
                used[j] = false;
            }
        }
        best
    }
    rec(cost, 0, &mut vec![false; cost.nrows()]) / cost.nrows() as f64
}

#[test]
fn criterion_05_transport_matches_permutation_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(5005);
    let costs = [
        TransportCost::PowerMetric,
        TransportCost::TruncatedD,
        TransportCost::WeightedTilde { delta: 0.7 },
    ];

    // Float instances across dimensions, regimes, and all three costs.
    for case in 0..200 {
        let n = rng.random_range(2..=7);
        let dim = rng.random_range(1..=3);
        let q = [0.3, 0.5, 1.0][case % 3];
        let metric = MetricSpec {
            m: DMatrix::identity(dim, dim),
            q,
            x0: DVector::zeros(dim),
            trunc: false,
        };
        let cost = &costs[case % 3];
        let draw = |rng: &mut ChaCha8Rng| {
            (0..n)
                .map(|_| {
                    let i = rng.random_range(0..2usize);
                    let x = DVector::from_fn(dim, |_, _| rng.random_range(-2.0..2.0));
                    (i, x)
                })
                .collect::<Vec<_>>()
        };
        let mu = EmpiricalMeasure::uniform(draw(&mut rng)).unwrap();
        let nu = EmpiricalMeasure::uniform(draw(&mut rng)).unwrap();
        let sol = ot_exact(&mu, &nu, cost, &metric).unwrap();
        assert_eq!(sol.route, OtRoute::Assignment);
        let brute = perm_min(&cost_matrix(&mu, &nu, cost, &metric));
        assert!(
            (sol.value - brute).abs() <= 1e-10,
            "case {case}: solver {} vs search {brute}",
            sol.value
        );
    }

    // Integer coordinates, q = 1, and 2 or 4 atoms: every partial sum is a
    // small dyadic rational, so the two routes must agree bit for bit.
    let metric_1d = MetricSpec {
        m: dmatrix![1.0],
        q: 1.0,
        x0: dvector![0.0],
        trunc: false,
    };
    for case in 0..100 {
        let n = if case % 2 == 0 { 2 } else { 4 };
        let draw = |rng: &mut ChaCha8Rng| {
            (0..n)
                .map(|_| (0usize, dvector![rng.random_range(-8..=8) as f64]))
                .collect::<Vec<_>>()
        };
        let mu = EmpiricalMeasure::uniform(draw(&mut rng)).unwrap();
        let nu = EmpiricalMeasure::uniform(draw(&mut rng)).unwrap();
        let sol = ot_exact(&mu, &nu, &TransportCost::PowerMetric, &metric_1d).unwrap();
        let brute = perm_min(&cost_matrix(
            &mu,
            &nu,
            &TransportCost::PowerMetric,
            &metric_1d,
        ));
        assert!(
            sol.value == brute,
            "case {case}: solver {} != search {brute} on integer data",
            sol.value
        );
    }

    // Sorted one-dimensional shortcut against the full solver.
    for case in 0..100 {
        let n = rng.random_range(2..=40);
        let xs: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let ys: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let fast = w1_sorted_1d(&xs, &ys).unwrap();
        let mu =
            EmpiricalMeasure::uniform(xs.iter().map(|&x| (0usize, dvector![x])).collect()).unwrap();
        let nu =
            EmpiricalMeasure::uniform(ys.iter().map(|&y| (0usize, dvector![y])).collect()).unwrap();
        let sol = ot_exact(&mu, &nu, &TransportCost::PowerMetric, &metric_1d).unwrap();
        assert!(
            (fast - sol.value).abs() <= 1e-12,
            "case {case}: sorted {fast} vs solver {}",
            sol.value
        );
    }
    println!("criterion 5: 200 float + 100 integer-exact + 100 sorted-1d instances agree");
}

#[test]
fn criterion_06_level_chain_product_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(6006);
    for case in 0..100 {
        let nb = rng.random_range(2..=8);
        let mut b = vec![0.0; nb];
        let mut d = vec![0.0; nb];
        for bk in b.iter_mut().take(nb - 1) {
            *bk = rng.random_range(0.1..3.0);
        }
        for dk in d.iter_mut().skip(1) {
            *dk = rng.random_range(0.1..3.0);
        }
        let bd = BirthDeathRates { b, d };
        let nu = switching::chain::birth_death_nu(&bd).unwrap();
        let gen = GeneratorMatrix::birth_death(&bd).unwrap();
        let from_nullspace = stationary_distribution(&gen).unwrap();
        let gap = (&nu - &from_nullspace).abs().max();
        assert!(gap <= 1e-10, "case {case}: laws differ by {gap}");
        let residual = (nu.transpose() * gen.matrix()).abs().max();
        assert!(residual <= 1e-12, "case {case}: residual {residual}");
    }
    println!("criterion 6: product formula matches the null space on 100 chains");
}

/// Occupation law of a continuous-time chain at time `t` from state `row`,
/// by the uniformization series.
fn markov_row(g: &DMatrix<f64>, t: f64, row: usize) -> Vec<f64> {
    let n = g.nrows();
    let r = (0..n).map(|i| -g[(i, i)]).fold(0.0f64, f64::max) * 1.05 + 1e-9;
    let p = DMatrix::identity(n, n) + g / r;
    let mut v = vec![0.0; n];
    v[row] = 1.0;
    let mut acc = vec![0.0; n];
    let mut w = (-r * t).exp();
    let mut wsum = 0.0;
    let mut k = 0usize;
    while wsum < 1.0 - 1e-13 && k < 100_000 {
        for i in 0..n {
            acc[i] += w * v[i];
        }
        wsum += w;
        let mut nv = vec![0.0; n];
        for i in 0..n {
            for j in 0..n {
                nv[j] += v[i] * p[(i, j)];
            }
        }
        v = nv;
        k += 1;
        w *= r * t / k as f64;
    }
    acc
}

#[test]
fn criterion_07_coupling_soundness() {
    let grid = vec![1.0, 5.0];

    // (a) The legs of each coupling must carry the marginal law of the
    // process: compare coordinate means against solo estimates.
    let elem = presets::elementary(2.0, 1.0);
    let opts = CoupleOptions {
        grid: grid.clone(),
        ..CoupleOptions::default()
    };
    let runs = pair_batch(8000, 71, |s| {
        couple_constant(&elem, &dvector![1.2], &dvector![-0.8], 0, 1, 5.0, s, &opts).unwrap()
    });
    for r in &runs {
        assert_eq!(r.samples.len(), grid.len());
    }
    let sim_opts = SimOptions {
        grid: grid.clone(),
        ..SimOptions::default()
    };
    let solo_x = estimate_expectation(
        &elem,
        &dvector![1.2],
        0,
        5.0,
        &Observable::Coordinate(0),
        8000,
        SeedSpec::new(72),
        &sim_opts,
    )
    .unwrap();
    let solo_y = estimate_expectation(
        &elem,
        &dvector![-0.8],
        1,
        5.0,
        &Observable::Coordinate(0),
        8000,
        SeedSpec::new(73),
        &sim_opts,
    )
    .unwrap();
    for (k, &t) in grid.iter().enumerate() {
        let x_leg = leg_stats(&runs, k, |r, k| r.samples[k].x[0]);
        let y_leg = leg_stats(&runs, k, |r, k| r.samples[k].y.as_ref().unwrap()[0]);
        assert_within_3se(
            &format!("merge coupling x-leg at t = {t}"),
            x_leg,
            (solo_x.mean[k], solo_x.stderr[k]),
        );
        assert_within_3se(
            &format!("merge coupling y-leg at t = {t}"),
            y_leg,
            (solo_y.mean[k], solo_y.stderr[k]),
        );
    }

    let sig = sigmoid_spec();
    let runs = pair_batch(8000, 74, |s| {
        couple_uniformized(&sig, &dvector![0.9], &dvector![0.3], 0, 1, 5.0, s, &opts).unwrap()
    });
    let solo_x = estimate_expectation(
        &sig,
        &dvector![0.9],
        0,
        5.0,
        &Observable::Coordinate(0),
        8000,
        SeedSpec::new(75),
        &sim_opts,
    )
    .unwrap();
    let solo_y = estimate_expectation(
        &sig,
        &dvector![0.3],
        1,
        5.0,
        &Observable::Coordinate(0),
        8000,
        SeedSpec::new(76),
        &sim_opts,
    )
    .unwrap();
    for (k, &t) in grid.iter().enumerate() {
        let x_leg = leg_stats(&runs, k, |r, k| r.samples[k].x[0]);
        let y_leg = leg_stats(&runs, k, |r, k| r.samples[k].y.as_ref().unwrap()[0]);
        assert_within_3se(
            &format!("thinned coupling x-leg at t = {t}"),
            x_leg,
            (solo_x.mean[k], solo_x.stderr[k]),
        );
        assert_within_3se(
            &format!("thinned coupling y-leg at t = {t}"),
            y_leg,
            (solo_y.mean[k], solo_y.stderr[k]),
        );
    }

    // Dominating coupling: the x-leg stays the plain process, the level is
    // marginally the two-level chain with the extremal rates, and the level
    // never exceeds the regime's block after coincidence (checked exactly,
    // path by path).
    let partition = sig.partition.clone().unwrap();
    let dom_opts = CoupleOptions {
        grid: grid.clone(),
        l0: 1,
        ..CoupleOptions::default()
    };
    let n_dom = 10_000;
    let runs = pair_batch(n_dom, 77, |s| {
        couple_with_dominating(&sig, &partition, &dvector![1.0], 0, 5.0, s, &dom_opts).unwrap()
    });
    let solo_x = estimate_expectation(
        &sig,
        &dvector![1.0],
        0,
        5.0,
        &Observable::Coordinate(0),
        n_dom,
        SeedSpec::new(78),
        &sim_opts,
    )
    .unwrap();
    let bd = switching::chain::birth_death_rates(&sig, &partition).unwrap();
    let level_gen = GeneratorMatrix::birth_death(&bd).unwrap();
    for (k, &t) in grid.iter().enumerate() {
        let x_leg = leg_stats(&runs, k, |r, k| r.samples[k].x[0]);
        assert_within_3se(
            &format!("dominating coupling x-leg at t = {t}"),
            x_leg,
            (solo_x.mean[k], solo_x.stderr[k]),
        );
        let law = markov_row(level_gen.matrix(), t, 1);
        for (level, &p) in law.iter().enumerate() {
            let hits = runs
                .iter()
                .filter(|r| r.samples[k].l == Some(level))
                .count();
            let phat = hits as f64 / n_dom as f64;
            let band = 3.0 * (p * (1.0 - p) / n_dom as f64).sqrt() + 1e-9;
            assert!(
                (phat - p).abs() <= band,
                "level {level} at t = {t}: {phat:.4} vs {p:.4}"
            );
        }
    }
    for (p, r) in runs.iter().enumerate() {
        let slack = r.min_slack_after_coincidence.unwrap();
        assert!(
            slack >= 0,
            "path {p}: level overtook its block, slack {slack}"
        );
    }

    // (b) With constant rates the two regime clocks are independent until
    // they agree, so the meeting time is exponential at the summed rate,
    // conditioned on meeting before the horizon.
    let t_end = 5.0;
    let runs = pair_batch(4000, 79, |s| {
        couple_constant(
            &elem,
            &dvector![1.0],
            &dvector![-1.0],
            0,
            1,
            t_end,
            s,
            &CoupleOptions {
                grid: vec![t_end],
                ..CoupleOptions::default()
            },
        )
        .unwrap()
    });
    let times: Vec<f64> = runs.iter().filter_map(|r| r.t_meet).collect();
    assert!(
        times.len() >= 3990,
        "only {} of 4000 pairs met",
        times.len()
    );
    let lambda = 3.0;
    let horizon_mass = 1.0 - (-lambda * t_end).exp();
    let d = ks_statistic(&times, |t| (1.0 - (-lambda * t).exp()) / horizon_mass);
    let thresh = ks_threshold(1e-3, times.len());
    assert!(d <= thresh, "meeting-time KS {d:.4} above {thresh:.4}");

    // (d) Separation probability is linear in the initial gap at first
    // order: halving the gap halves the frequency, within 3 combined
    // standard errors.
    let sep_opts = CoupleOptions {
        grid: vec![2.0],
        ..CoupleOptions::default()
    };
    let sep_frac = |delta: f64, seed: u64| {
        let n = 20_000;
        let runs = pair_batch(n, seed, |s| {
            couple_uniformized(
                &sig,
                &dvector![0.5],
                &dvector![0.5 + delta],
                0,
                0,
                2.0,
                s,
                &sep_opts,
            )
            .unwrap()
        });
        let k = runs.iter().filter(|r| r.t_sep.is_some()).count();
        let p = k as f64 / n as f64;
        (p, (p * (1.0 - p) / n as f64).sqrt())
    };
    let (p_full, se_full) = sep_frac(0.2, 80);
    let (p_half, se_half) = sep_frac(0.1, 81);
    assert!(p_full > 0.01, "separation too rare to resolve: {p_full}");
    let gap = (p_half - 0.5 * p_full).abs();
    let band = 3.0 * (se_half * se_half + 0.25 * se_full * se_full).sqrt();
    assert!(
        gap <= band,
        "halving test: {p_half:.4} vs {:.4}, band {band:.4}",
        0.5 * p_full
    );
    println!(
        "criterion 7: marginals within 3 se, meeting-time KS {d:.4} <= {thresh:.4}, level slack >= 0 on {n_dom} paths, halving gap {gap:.4} <= {band:.4}"
    );
}

#[test]
fn criterion_08_bracket_ranks() {
    // Two translated copies of the same linear drift differ by a constant
    // field: everything stays on one line through the starting point.
    let intro = presets::intro_plane();
    let rank = hormander_rank(&intro, &dvector![0.3, 0.4], 4).unwrap();
    assert_eq!(rank.rank, 1, "plane example rank {}", rank.rank);
    let certs = certify::run_all(&intro).unwrap();
    assert!(certs.any_pass());
    for c in &certs.certificates {
        if c.theorem.starts_with("TV") {
            assert_eq!(
                c.verdict, "fail",
                "{} passed despite a degenerate bracket module",
                c.theorem
            );
        }
    }

    // The two spiral drifts differ by a genuinely rotating field.
    let rank = hormander_rank(&presets::spiral(1.0), &dvector![1.0, 0.0], 4).unwrap();
    assert_eq!(rank.rank, 2, "spiral rank {}", rank.rank);
    println!("criterion 8: bracket rank 1 on the plane example, 2 on the spiral");
}

#[test]
fn criterion_09_onoff_and_level_chain_verdicts_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(9009);
    let mut passes = 0usize;
    for case in 0..200 {
        let n = rng.random_range(2..=5);
        // Supplied contraction rates with both signs present, away from 0.
        let rho: Vec<f64> = loop {
            let cand: Vec<f64> = (0..n)
                .map(|_| {
                    let v: f64 = rng.random_range(-1.5..1.5);
                    if v.abs() < 0.05 {
                        v + 0.1
                    } else {
                        v
                    }
                })
                .collect();
            if cand.iter().any(|&v| v > 0.0) && cand.iter().any(|&v| v <= 0.0) {
                break cand;
            }
        };
        let matrix = DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                0.0
            } else {
                rng.random_range(0.1..1.1)
            }
        });
        let f0: Vec<usize> = (0..n).filter(|&i| rho[i] > 0.0).collect();
        let f1: Vec<usize> = (0..n).filter(|&i| rho[i] <= 0.0).collect();
        let spec = SwitchingSpec {
            dim: 1,
            regimes: (0..n)
                .map(|_| RegimeDynamics::AffineFlow {
                    a: dmatrix![-1.0],
                    c: dvector![0.0],
                })
                .collect(),
            rates: RateModel::Constant { matrix },
            metric: MetricSpec {
                m: dmatrix![1.0],
                q: 0.5,
                x0: dvector![0.0],
                trunc: true,
            },
            rho: Some(rho),
            partition: None,
        };
        let curv = certify::curvature_report(&spec).unwrap();
        let onoff = certify::check_onoff(&spec, &curv).unwrap();
        let partition = vec![f1, f0];
        let level = certify::check_birth_death(&spec, &curv, &partition).unwrap();
        assert_eq!(
            onoff.verdict, level.verdict,
            "case {case}: on-off {} vs two-level {} (values {} and {})",
            onoff.verdict, level.verdict, onoff.value, level.value
        );
        if onoff.verdict == "pass" {
            passes += 1;
        }
    }
    assert!(
        passes > 10 && passes < 190,
        "degenerate draw: {passes}/200 passes"
    );
    println!("criterion 9: verdicts agree on 200 specs ({passes} pass)");
}

fn run_cli(args: &[&str]) -> (Vec<u8>, Vec<u8>, i32) {
    let out = Command::new(env!("CARGO_BIN_EXE_switching"))
        .args(args)
        .output()
        .expect("binary runs");
    (out.stdout, out.stderr, out.status.code().unwrap_or(-1))
}

/// Run once with --jobs 1, again with --jobs 1, and again with --jobs 2;
/// every byte of output and the exit code must agree.
fn assert_deterministic(args: &[&str]) {
    let with_jobs = |j: &str| {
        let mut full = vec!["--jobs", j];
        full.extend_from_slice(args);
        run_cli(&full)
    };
    let a = with_jobs("1");
    let b = with_jobs("1");
    let c = with_jobs("2");
    assert_eq!(a.2, b.2, "exit code changed on repeat: {args:?}");
    assert_eq!(a.2, c.2, "exit code changed with --jobs: {args:?}");
    assert!(a.0 == b.0, "stdout differs on repeat: {args:?}");
    assert!(a.0 == c.0, "stdout differs with --jobs: {args:?}");
    assert!(a.1 == b.1, "stderr differs on repeat: {args:?}");
    assert!(a.1 == c.1, "stderr differs with --jobs: {args:?}");
}

#[test]
fn criterion_10_cli_output_is_deterministic() {
    assert_deterministic(&["example", "spiral", "--rate", "0.05"]);
    assert_deterministic(&["certify", "--example", "elementary"]);
    let (_, _, code) = run_cli(&["certify", "--example", "elementary"]);
    assert_eq!(code, 0);
    let (_, _, code) = run_cli(&["certify", "--example", "spiral", "--rate", "0.05"]);
    assert_eq!(code, 1);

    assert_deterministic(&[
        "simulate",
        "--example",
        "elementary",
        "--seed",
        "7",
        "--paths",
        "6",
        "--grid",
        "0:3:12",
    ]);
    assert_deterministic(&[
        "simulate",
        "--example",
        "elementary",
        "--seed",
        "7",
        "--paths",
        "6",
        "--grid",
        "0:3:12",
        "--format",
        "json",
    ]);
    assert_deterministic(&[
        "couple",
        "--example",
        "elementary",
        "--seed",
        "5",
        "--paths",
        "300",
        "--grid",
        "0:6:24",
    ]);
    assert_deterministic(&[
        "couple",
        "--example",
        "elementary",
        "--seed",
        "5",
        "--paths",
        "300",
        "--grid",
        "0:6:24",
        "--format",
        "json",
    ]);
    assert_deterministic(&[
        "couple",
        "--example",
        "elementary",
        "--seed",
        "3",
        "--paths",
        "1",
        "--grid",
        "0:4:8",
    ]);

    let dir = tempfile::tempdir().unwrap();
    let a_path = dir.path().join("a.csv");
    let b_path = dir.path().join("b.csv");
    std::fs::write(&a_path, "0,0.5\n1,1.5\n0,-0.25\n1,2.0\n").unwrap();
    std::fs::write(&b_path, "0,0.75\n0,-1.5\n1,0.25\n0,1.0\n").unwrap();
    let a_str = a_path.to_str().unwrap();
    let b_str = b_path.to_str().unwrap();
    assert_deterministic(&["wasserstein", a_str, b_str, "--cost", "power", "--q", "1.0"]);
    assert_deterministic(&["wasserstein", a_str, b_str, "--cost", "tilde", "--q", "0.5"]);

    // File output runs byte-compare the written artifact as well.
    let out1 = dir.path().join("run1.csv");
    let out2 = dir.path().join("run2.csv");
    for (jobs, path) in [("1", &out1), ("2", &out2)] {
        let (_, _, code) = run_cli(&[
            "--jobs",
            jobs,
            "simulate",
            "--example",
            "elementary",
            "--seed",
            "13",
            "--paths",
            "4",
            "--grid",
            "0:2:8",
            "-o",
            path.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
    }
    let f1 = std::fs::read(&out1).unwrap();
    let f2 = std::fs::read(&out2).unwrap();
    assert!(f1 == f2, "file output differs across --jobs");
    println!("criterion 10: identical bytes across repeats and --jobs for all subcommands");
}
