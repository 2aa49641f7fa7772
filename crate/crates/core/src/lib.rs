//! Generative flow networks with intrinsic intermediate rewards.
//!
//! The crate trains flow models on a sparse-reward hypergrid with the
//! classical flow-matching, detailed-balance and trajectory-balance
//! objectives and with their intrinsic-reward augmented variants, and
//! checks them against exact dynamic-programming oracles.

pub mod autodiff;
pub mod cli_runner;
pub mod config;
pub mod env;
pub mod error;
pub mod flow_model;
pub mod intrinsic;
pub mod objectives;
pub mod oracle;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
