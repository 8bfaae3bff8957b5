//! Learning-based Wasserstein distributionally robust model predictive control
//! for mobile-robot collision avoidance.
//!
//! The pipeline per control stage:
//!
//! 1. [`gp`] regresses each obstacle's velocity field from a sliding window of
//!    observations.
//! 2. [`predict`] propagates a Gaussian belief of the obstacle state over the
//!    horizon with a first-order Taylor expansion of the GP posterior, samples
//!    obstacle states and turns them into normalized half-space descriptions.
//! 3. [`risk`] provides the loss of safety, empirical CVaR, and the finite
//!    dimensional upper bound of the worst-case CVaR over a Wasserstein ball.
//! 4. [`mpc`] assembles the reformulated control problem and solves it with the
//!    local interior-point solver in [`nlp`].
//! 5. [`sim`] closes the loop with a kinematic bicycle robot and scripted
//!    obstacles.

pub mod error;
pub mod gp;
pub mod mpc;
pub mod nlp;
pub mod predict;
pub mod risk;
pub mod sim;

pub use error::{Error, Result};
