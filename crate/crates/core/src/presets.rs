//! Built-in example models: a scalar two-regime dilation, a planar
//! two-anchor contraction, a three-regime ring of dilations, and a pair of
//! rotated spiral sinks. Each constructor returns a spec that validates and
//! round-trips through JSON; the CLI exposes them under the same names.

use nalgebra::{dmatrix, dvector, DMatrix};

use crate::model::{MetricSpec, RateModel, RegimeDynamics, SwitchingSpec};

/// Scalar process `x' = I x` with regime labels -1 (contracting, index 0)
/// and +1 (expanding, index 1). `a1` is the jump rate out of the expanding
/// regime, `am1` the rate out of the contracting one; the process is
/// ergodic exactly when `a1 > am1`. Defaults elsewhere are (2, 1).
pub fn elementary(a1: f64, am1: f64) -> SwitchingSpec {
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
        rates: RateModel::Constant {
            matrix: dmatrix![0.0, am1; a1, 0.0],
        },
        metric: MetricSpec {
            m: dmatrix![1.0],
            q: 0.5,
            x0: dvector![0.0],
            trunc: true,
        },
        rho: None,
        // Expanding block first so the per-block rates increase.
        partition: Some(vec![vec![1], vec![0]]),
    }
}

/// Planar process `x' = -(x - (i, 0))` with anchors at (-1, 0) and (1, 0),
/// unit jump rates both ways. Both regimes contract at rate 1, yet the
/// invariant law lives on the horizontal axis: the vertical coordinate
/// decays deterministically, so the bracket rank is 1 and no
/// total-variation certificate can hold.
pub fn intro_plane() -> SwitchingSpec {
    SwitchingSpec {
        dim: 2,
        regimes: vec![
            RegimeDynamics::AffineFlow {
                a: dmatrix![-1.0, 0.0; 0.0, -1.0],
                c: dvector![-1.0, 0.0],
            },
            RegimeDynamics::AffineFlow {
                a: dmatrix![-1.0, 0.0; 0.0, -1.0],
                c: dvector![1.0, 0.0],
            },
        ],
        rates: RateModel::Constant {
            matrix: dmatrix![0.0, 1.0; 1.0, 0.0],
        },
        metric: MetricSpec {
            m: DMatrix::identity(2, 2),
            q: 0.5,
            x0: dvector![0.0, 0.0],
            trunc: true,
        },
        rho: None,
        partition: Some(vec![vec![0, 1]]),
    }
}

/// Scalar dilations `x' = -a(i) x` on a three-regime one-way ring
/// 0 -> 1 -> 2 -> 0 at unit rate, with `a = (3, 1, -1)`. The ring's
/// stationary law is uniform and the averaged contraction rate is
/// (3 + 1 - 1)/3 = 1 > 0, so the averaged criterion passes even though
/// regime 2 expands; the two-sided on-off bound sits exactly on its
/// boundary here and fails strictly.
pub fn dilation_chain() -> SwitchingSpec {
    SwitchingSpec {
        dim: 1,
        regimes: vec![
            RegimeDynamics::AffineFlow {
                a: dmatrix![-3.0],
                c: dvector![0.0],
            },
            RegimeDynamics::AffineFlow {
                a: dmatrix![-1.0],
                c: dvector![0.0],
            },
            RegimeDynamics::AffineFlow {
                a: dmatrix![1.0],
                c: dvector![0.0],
            },
        ],
        rates: RateModel::Constant {
            matrix: dmatrix![0.0, 1.0, 0.0; 0.0, 0.0, 1.0; 1.0, 0.0, 0.0],
        },
        metric: MetricSpec {
            m: dmatrix![1.0],
            q: 0.5,
            x0: dvector![0.0],
            trunc: true,
        },
        rho: None,
        partition: None,
    }
}

/// Two spiral sinks, each exponentially stable in its own elliptical norm
/// (`spiral_m0`, `spiral_m1`), switching at a symmetric constant rate. In
/// the shared identity metric both drifts have log norm +1/3, so every
/// certificate fails there; the genuine behavior depends on the switching
/// rate (stable when slow, explosive when fast) and is only visible to the
/// simulation diagnostics.
pub fn spiral(rate: f64) -> SwitchingSpec {
    SwitchingSpec {
        dim: 2,
        regimes: vec![
            RegimeDynamics::AffineFlow {
                a: dmatrix![-1.0, 3.0; -1.0 / 3.0, -1.0],
                c: dvector![0.0, 0.0],
            },
            RegimeDynamics::AffineFlow {
                a: dmatrix![-1.0, -1.0 / 3.0; 3.0, -1.0],
                c: dvector![0.0, 0.0],
            },
        ],
        rates: RateModel::Constant {
            matrix: dmatrix![0.0, rate; rate, 0.0],
        },
        metric: MetricSpec {
            m: DMatrix::identity(2, 2),
            q: 0.5,
            x0: dvector![0.0, 0.0],
            trunc: true,
        },
        rho: None,
        partition: None,
    }
}

/// Metric matched to the first spiral regime: `(M A + A^T M)/2 = -M`
/// exactly, so the flow contracts at rate 1 in this norm.
pub fn spiral_m0() -> DMatrix<f64> {
    dmatrix![1.0 / 9.0, 0.0; 0.0, 1.0]
}

/// Metric matched to the second spiral regime.
pub fn spiral_m1() -> DMatrix<f64> {
    dmatrix![1.0, 0.0; 0.0, 1.0 / 9.0]
}
