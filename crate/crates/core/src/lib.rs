//! Lane-tracking control library built around control Lyapunov function QPs.
//!
//! The crate provides:
//!
//! - [`path`]: arc-length parameterized reference paths with piecewise-constant
//!   curvature and global-frame reconstruction.
//! - [`vehicle`]: kinematic bicycle dynamics in path-relative (Frenet) coordinates
//!   plus an RK4 integrator for closed-loop simulation.
//! - [`qp`]: a dense active-set solver for small strictly convex QPs, with
//!   KKT implicit differentiation so the QP can sit inside a trained model.
//! - [`clf`]: quadratic CLFs over the partial state (lateral offset, heading
//!   error) with observation-dependent "stability attention" parameters, and
//!   the relaxed CLF-QP controllers built from them.
//! - [`nmpc`]: a single-shooting nonlinear MPC used as the imitation expert
//!   and as a benchmark upper bound.
//! - [`learner`]: the feature pipeline and MLP head that maps observations to
//!   attention parameters (and optional state estimates), trained end-to-end
//!   through the QP.
//! - [`uncertainty`]: set-based propagation of state-estimate uncertainty
//!   through batched QPs, kernel density estimation over the resulting
//!   controls, and prior-weighted control selection.
//! - [`sim`]: closed-loop episode rollouts, metrics, and paired benchmarking.
//!
//! All numeric code is generic over the scalar type through [`scalar::Scalar`]
//! (any `num_traits::Float` with the usual extras); the crate-root aliases pin
//! the concrete types used by the CLI and the test suites.

pub mod clf;
pub mod controllers;
pub mod error;
pub mod learner;
pub mod linalg;
pub mod nmpc;
pub mod path;
pub mod qp;
pub mod scalar;
pub mod seeds;
pub mod sim;
pub mod uncertainty;
pub mod vehicle;

pub use error::{CoreError, Result};
pub use scalar::Scalar;

/// Default scalar for simulations, training, and the CLI.
pub type Real = f64;
/// Single-precision alternative; the math is generic, but the default
/// tolerances assume `Real`.
pub type Real32 = f32;

/// Reference path instantiated at the default scalar.
pub type Track = path::PathSpec<Real>;
