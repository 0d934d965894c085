//! Small statistical and scalar-optimization helpers shared by the fitting,
//! certification, and test layers: mean/stderr accumulation, one-sample
//! Kolmogorov-Smirnov distance, least-squares lines, and golden-section
//! search.

/// Sample mean and standard error of the mean.
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, f64::INFINITY);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    (mean, (var / n as f64).sqrt())
}

/// One-sample Kolmogorov-Smirnov statistic `sup_t |F_n(t) - F(t)|` against
/// the CDF `f`.
pub fn ks_statistic(samples: &[f64], f: impl Fn(f64) -> f64) -> f64 {
    let mut xs = samples.to_vec();
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len() as f64;
    let mut d = 0.0f64;
    for (k, &x) in xs.iter().enumerate() {
        let c = f(x);
        let lo = (c - k as f64 / n).abs();
        let hi = ((k as f64 + 1.0) / n - c).abs();
        d = d.max(lo).max(hi);
    }
    d
}

/// Asymptotic Kolmogorov-Smirnov acceptance threshold: reject at level
/// `alpha` when `D_n > sqrt(ln(2 / alpha) / 2) / sqrt(n)`. This is the
/// one-sided DKW-style bound, slightly conservative at finite `n`.
pub fn ks_threshold(alpha: f64, n: usize) -> f64 {
    ((2.0 / alpha).ln() / 2.0).sqrt() / (n as f64).sqrt()
}

/// Ordinary least squares for `y = a + b x`; returns `(a, b, se_b)` where
/// `se_b` is the homoskedastic standard error of the slope (NaN when there
/// are fewer than three points).
pub fn ols_line(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(u, v)| (u - mx) * (v - my)).sum();
    let b = sxy / sxx;
    let a = my - b * mx;
    let se_b = if x.len() > 2 {
        let sse: f64 = x.iter().zip(y).map(|(u, v)| (v - a - b * u).powi(2)).sum();
        (sse / (n - 2.0) / sxx).sqrt()
    } else {
        f64::NAN
    };
    (a, b, se_b)
}

/// Golden-section search for the maximum of a unimodal `f` on `[lo, hi]`,
/// stopping when the bracket is shorter than `tol`. Returns `(x, f(x))`.
pub fn golden_max(mut lo: f64, mut hi: f64, tol: f64, mut f: impl FnMut(f64) -> f64) -> (f64, f64) {
    let inv_phi = (5.0f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    while hi - lo > tol {
        if f1 < f2 {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = f(x2);
        } else {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = f(x1);
        }
    }
    let xm = 0.5 * (lo + hi);
    (xm, f(xm))
}
