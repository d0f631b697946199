//! Desk-scale, trainable hierarchical sparse attention with verification
//! oracles and an analytical decode cost model.
//!
//! The operator combines three attention branches per query position:
//! block compression, blockwise top-n selection, and a sliding window,
//! merged through learned sigmoid gates. Everything runs in f64 on the
//! CPU so that analytic gradients can be checked against finite
//! differences to tight tolerances.

pub mod attention;
pub mod cli;
pub mod eval;
pub mod io;
pub mod numeric;
pub mod nsa;
pub mod sim;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
