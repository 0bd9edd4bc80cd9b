//! Contextuality classification of n-cycle behaviours with standard and
//! Bayesian neural networks.
//!
//! The crate is organised bottom-up:
//!
//! - [`ncycle`]: behaviours, probability tables, non-disturbance and the
//!   odd-parity cycle inequalities that decide contextuality.
//! - [`lp`]: an independent polytope-membership oracle (phase-one simplex
//!   over the deterministic vertices).
//! - [`dataset`]: seeded generators for the behaviour and rhombus tasks,
//!   splitting, and the CSV line format.
//! - [`mlp`]: feed-forward network, softmax / cross-entropy, backpropagation
//!   and mini-batch gradient descent.
//! - [`bayes`]: Gaussian prior, log posterior, leapfrog integrator,
//!   Hamiltonian Monte Carlo and posterior-predictive averaging.
//! - [`uncertainty`]: entropy decomposition into aleatoric and epistemic
//!   parts, misclassification curves and histograms.
//! - [`experiment`]: the experiment pipelines behind the `ncbnn` CLI.

pub mod bayes;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod lp;
pub mod mlp;
pub mod ncycle;
pub mod stats;
pub mod uncertainty;

pub use error::{Error, Result};
