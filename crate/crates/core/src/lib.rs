//! Equity-aware restoration sequencing after a mass power outage.
//!
//! The crate has two halves. The prediction half fits a quantile regression
//! forest to historical repair durations and calibrates its intervals with
//! split conformal prediction, optionally per income group
//! ([`conformal::Method::Ecqr`]). The decision half is an event-driven
//! repair-crew simulator and a constrained soft actor-critic whose actor
//! attends over the set of still-dark regions, trading average outage
//! against the largest Wasserstein gap between income groups.
//!
//! Runnable walkthroughs live in `examples/`; the `equirestore` binary wires
//! the same stages into a command line.

pub mod baselines;
pub mod cli;
pub mod conformal;
pub mod datagen;
pub mod domain;
pub mod eval;
pub mod forest;
pub mod metrics;
pub mod nnet;
pub mod simenv;
pub mod stasac;
