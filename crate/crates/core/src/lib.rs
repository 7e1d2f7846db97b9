pub mod augment;
pub mod cli;
pub mod config;
pub mod cycle;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod models;
pub mod nncore;
pub mod rng;
pub mod ssda;

pub use error::{Error, ErrorKind, Result};
