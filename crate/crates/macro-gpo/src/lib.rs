//! Nonmyopic adaptive Bayesian optimization over macro-actions with
//! Gaussian-process beliefs.
//!
//! The crate provides:
//!
//! - [`gp`]: the belief engine (squared-exponential kernel, posterior
//!   inference over noisy outputs, correlated sampling, information gain);
//! - [`env`]: task environments (grid and graph domains, macro-action
//!   generation, ground-truth phenomena, noisy execution, file formats);
//! - [`planner`]: the exact planners (stage reward, Lipschitz and theta
//!   tables, sample-size calculator, stochastic and most-likely value
//!   recursions, the epsilon policy);
//! - [`anytime`]: the incremental search tree with upper/lower value bounds
//!   and the anytime policy it induces;
//! - [`baselines`]: myopic and reduced comparators over the same belief;
//! - [`harness`]: episode runner, metrics, and suite replication;
//! - [`config`]: the experiment config file format.

pub mod anytime;
pub mod baselines;
pub mod config;
pub mod env;
pub mod error;
pub mod gp;
pub mod harness;
pub mod linalg;
pub mod planner;
pub mod rng;
pub mod tables;

pub use error::{Error, Result};
