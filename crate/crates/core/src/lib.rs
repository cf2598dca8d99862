pub mod adapterfarm;
pub mod autograd;
pub mod baselines;
pub mod cli;
pub mod data;
pub mod error;
pub mod evalkit;
pub mod fixture;
pub mod io;
pub mod nn;
pub mod objectives;
pub mod paramgen;
pub mod pipeline;
pub mod recmodel;
pub mod service;

pub use error::{Error, Result};
