//! Simulation and ergodicity certification for Markov processes with random
//! switching.
//!
//! The object of study is a pair `(X_t, I_t)`: a continuous component `X` in
//! `R^d` driven, between switches, by the dynamics of the current regime
//! `I_t` in a finite set `F`, and a regime component `I` that jumps with
//! state-dependent rates `a(x, i, j)`. Regime dynamics are either
//! deterministic affine flows `x' = A x + c` or Ornstein-Uhlenbeck diffusions
//! with the same drift. The crate covers:
//!
//! * spec validation: rate bounds `abar`, Lipschitz constant `kappa`, lower
//!   rates `alow` and their irreducibility ([`model`]);
//! * finite-chain linear algebra: stationary laws, birth-death reductions,
//!   tilted Perron eigenproblems and the optimal tilt exponent ([`chain`]);
//! * exact-flow uniformized simulation with deterministic seeding ([`sim`]);
//! * three couplings of two copies of the process and empirical Wasserstein
//!   decay curves ([`coupling`]);
//! * exact optimal transport between small empirical measures ([`transport`]);
//! * certification of exponential ergodicity criteria: log-norm curvature per
//!   regime, averaged criteria `sum nu(i) rho(i) > 0` in flat and birth-death
//!   form, Lie-bracket rank at a point, and Lyapunov-exponent fits
//!   ([`certify`]).
//!
//! [`presets`] holds the built-in example systems used by the CLI and the
//! test suite.

// Validation gates are written `!(x > 0.0)` on purpose: NaN must take the
// rejecting branch, which the suggested `x <= 0.0` would let through.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod certify;
pub mod chain;
pub mod coupling;
pub mod model;
pub mod presets;
pub mod sim;
pub mod stats;
pub mod transport;

mod error;

pub use error::{Error, Result};
