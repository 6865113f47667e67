//! Glauber dynamics for replicated spin glasses with Gaussian couplings, the
//! matching mean-field flow (interacting-particle and grid forms), and the
//! transport-distance tooling used to compare the two at finite size.
//!
//! The crate is organized bottom-up:
//!
//! * [`rate`], [`model`]: flip-rate functions and model parameters, spin/field
//!   atoms and empirical measures.
//! * [`couplings`]: sampling of the Gaussian coupling matrix, field evaluation
//!   and incremental updates, scaled operator norm, binary dump/load.
//! * [`moments`]: overlap/rate moment matrices of a measure, the drift and
//!   diffusion coefficients built from them.
//! * [`sim`], [`master`]: event-driven simulation of the finite system and a
//!   small-system master-equation integrator used as its oracle.
//! * [`gaussian`]: exact conditional law of the fields over one time block,
//!   in both the direct block form and the reduced per-site form.
//! * [`fixed_point`]: the scalar overlap fixed-point equation, root solving
//!   and bifurcation scans.
//! * [`flow`]: time integrators for the mean-field flow (particle system for
//!   general M, finite-volume grid solver for M = 1) and measure/grid
//!   conversions.
//! * [`transport`]: ground cost, exact assignment-based Wasserstein distance,
//!   and a dual (Kantorovich) lower-bound estimator.
//! * [`config`], [`harness`]: experiment configuration, orchestration, CSV
//!   and manifest output for the `glassflow` binary.

// Negated float comparisons are deliberate throughout: `!(x > 0.0)` rejects
// NaN where `x <= 0.0` would accept it. Index loops in the matrix and grid
// kernels keep explicit indices because the index couples several arrays.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod config;
pub mod couplings;
pub mod fixed_point;
pub mod flow;
pub mod gaussian;
pub mod harness;
pub mod linalg;
pub mod master;
pub mod model;
pub mod moments;
pub mod rate;
pub mod rng;
pub mod sim;
pub mod transport;
