//! Statistical inference for repeated risk minimization when the deployed
//! parameter feeds back into the data-generating process.
//!
//! The crate is organized around four pieces:
//!
//! * [`model`] — the performative linear-regression distribution map, its
//!   truncated-Gaussian samplers and the closed-form quantities (underlying
//!   update, stable point, ∇G, smoothness constant) used as ground truth.
//! * [`estimator`] — per-sample loss models, the ridge closed form plus a
//!   damped-Newton fallback, and the trajectory runners (classical and
//!   prediction-powered) that realize the iterate sequence in practice.
//! * [`score`] — gradient-free score matching with policy perturbation; fits
//!   the parametric score family and produces the data-driven ∇G estimate.
//! * [`inference`] — sandwich covariance blocks, the variance recursion for
//!   the iterates' CLT, coordinatewise confidence regions, the bias-aware
//!   region for the stable point, and data-driven λ selection for the
//!   prediction-powered estimator.

pub mod error;
pub mod estimator;
pub mod inference;
mod mat;
pub mod model;
pub mod score;
#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
pub use mat::frobenius;
