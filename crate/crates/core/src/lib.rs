//! Quasimetric constrained policy optimization for navigation over terrain
//! with asymmetric traversal costs.
//!
//! The crate is organised bottom-up:
//!
//! - [`diffmath`]: dense networks with reverse-mode gradients and Adam.
//! - [`terrain`]: procedural heightmaps and per-pose features.
//! - [`envs`]: continuous navigation environments with asymmetric costs.
//! - [`quasimetric`]: asymmetric norm, embedding, contrastive training.
//! - [`cpo`]: policy/value networks, trust-region constrained updates.
//! - [`oracle`]: exact solvers on small discrete problems.
//! - [`harness`]: evaluation metrics, ablations, reports and plots.
//! - [`cli`]: the `qnav` command-line front end.

pub mod cli;
pub mod cpo;
pub mod diffmath;
pub mod envs;
pub mod error;
pub mod harness;
pub mod oracle;
pub mod quasimetric;
pub mod rng;
pub mod terrain;

pub use error::{Error, Result};
