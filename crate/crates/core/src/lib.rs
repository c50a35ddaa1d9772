//! Adaptive Markov chain Monte Carlo with exact finite-state diagnostics.
//!
//! * [`kernel`]: stochastic matrices, total variation, ergodicity constants.
//! * [`families`]: finite kernel families sharing an invariant law.
//! * [`poisson`]: Poisson equation solvers, norm bounds, CLT variance.
//! * [`adaptation`]: stochastic-approximation updates and rare schedules.
//! * [`ledger`]: adaptive chains and their martingale decomposition.
//! * [`rwm`]: random-walk Metropolis on a compact box.

// Validation is written as `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adaptation;
pub mod families;
pub mod kernel;
pub mod ledger;
pub mod poisson;
pub mod rwm;
