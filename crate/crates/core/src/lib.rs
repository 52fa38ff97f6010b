//! Task-driven policy gradient: policies whose actions flow through a learned
//! set of task-relevant variables, trained to trade expected cost against the
//! mutual information those variables carry about the state.

pub mod autodiff;
pub mod envs;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod mine;
pub mod nets;
pub mod tdpg;

pub use error::{Error, Result};
