//! Batch learning of decentralized macro-action finite-state controllers.
//!
//! The crate is organised around the learning pipeline:
//!
//! - [`fsc`]: stochastic Mealy controllers (sampling, likelihoods, policy files)
//! - [`dataset`]: episode records, the JSON-lines format, and the
//!   importance-weighted empirical value estimator
//! - [`poem`]: the batch EM trainer (forward-backward E-step, closed-form M-step)
//! - [`isem`]: concurrent random-restart wrapper with epsilon retention
//! - [`sim`]: grid-world search-and-rescue simulator used to produce data and
//!   to roll out learned controllers
//! - [`behavior`]: expert heuristic, rho-mixture behavior policy, dataset generation
//! - [`cli`]: the `isem` command-line front end, manifests, and benchmark sweeps

pub mod behavior;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod fsc;
pub mod isem;
pub mod poem;
pub mod rng;
pub mod sim;
pub mod stats;

pub use error::{Error, Result};
