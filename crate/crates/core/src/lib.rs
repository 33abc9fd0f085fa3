//! Exact and Monte Carlo laboratory for importance-sampling ratios in
//! token-level policy gradients.
//!
//! The crate compares four ways of weighting the token-level gradient term
//! of an off-policy sample: the single-token ratio, the cumulative prefix
//! ratio, the full sequence ratio and its geometric mean. Small MDPs make
//! every expectation enumerable, so unbiasedness and variance claims are
//! checked exactly rather than statistically.
//!
//! - [`mdp`]: token MDPs, tabular softmax policies, sampling, enumeration oracles.
//! - [`ratios`]: ratio profiles of a trajectory.
//! - [`estimators`]: IS gradient estimators, exact bias and variance, diagnostics.
//! - [`objectives`]: GRPO, GSPO and CTPO surrogates with analytic gradients.
//! - [`trainer`]: off-policy training loop.
//! - [`harness`]: config-driven experiments writing CSV/JSON artifacts.

pub mod config;
pub mod estimators;
pub mod harness;
pub mod mdp;
pub mod numeric;
pub mod objectives;
pub mod ratios;
pub mod trainer;
