//! Constrained subspace predictive repetitive control (SPRC) for individual
//! blade pitch control.
//!
//! The pipeline, in loop order:
//!
//! - [`signals`] keeps azimuth-synchronised histories and forms period
//!   differences `s(k) - s(k - P)`, which annihilate the periodic loads.
//! - [`sysid`] estimates the Markov matrix of the differenced predictor with
//!   square-root recursive least squares.
//! - [`lifting`] turns the Markov blocks into a one-period-ahead predictor and,
//!   together with the 1P sinusoidal [`basis`], into an 18-state model that
//!   advances once per rotation.
//! - [`mpc`] builds the receding-horizon QP with pitch angle and pitch rate
//!   limits, solved by the dense active-set [`qpsolver`].
//!
//! [`plant`], [`baselines`], [`metrics`] and [`harness`] provide the surrogate
//! rotor, the comparator controllers, the evaluation instruments and the
//! load-case runner.

// `!(x > 0.0)` is deliberate throughout: it rejects NaN along with the bad values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod basis;
pub mod error;
pub mod harness;
pub mod lifting;
pub mod metrics;
pub mod mpc;
pub mod plant;
pub mod qpsolver;
pub mod signals;
pub mod sysid;

pub use error::{Error, Result};

/// Number of blades. Inputs (pitch) and outputs (root bending moment) are one per blade.
pub const BLADES: usize = 3;
