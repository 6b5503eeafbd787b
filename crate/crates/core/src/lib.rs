//! Adversarial estimation of generalized structural equation models.
//!
//! The structural function `f` solves a linear operator equation `Af = b`
//! where `A` is a conditional expectation operator. Estimation is cast as a
//! min-max game between two ReLU networks (the primal `f` and the adversary
//! `u`), trained with projected stochastic gradient descent-ascent and
//! reported as the average of the primal iterates.
//!
//! Modules:
//! - [`nn`]: 2-layer and multi-layer ReLU parametrizations, gradients,
//!   ball projections and local linearization.
//! - [`game`]: the per-sample payoff, its gradients, the training loop and
//!   the averaged estimator.
//! - [`sem`]: seeded generators for IV, dynamic panel and discrete designs.
//! - [`oracle`]: exact discretized operators, Tikhonov solutions and
//!   singular systems used as ground truth.
//! - [`diagnostics`]: experiment sweeps and verification harnesses.
//! - [`cli`]: config-file driven command line front end.

pub mod cli;
pub mod diagnostics;
pub mod error;
pub mod game;
pub mod io;
pub mod nn;
pub mod oracle;
pub mod rng;
pub mod sem;

pub use error::{Error, Result};
