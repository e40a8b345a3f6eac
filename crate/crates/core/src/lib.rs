//! Robust mean-field games on finite state spaces.

pub mod converge;
pub mod domain;
mod dpp;
pub mod error;
pub mod io;
pub mod mfg;
pub mod models;
pub mod nagent;
pub mod policy;
pub mod simplex;
pub mod uncertainty;

pub use error::{Error, Result};
