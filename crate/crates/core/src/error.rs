use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("invalid dimensions: {0}")]
    Dimension(String),

    #[error("degenerate filter: coefficients vanish after normalization")]
    DegenerateFilter,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("stale match assignment: layer {layer} kernel {kernel} channel {channel} recorded distance {recorded} but current weights give {current}")]
    StaleAssignment {
        layer: usize,
        kernel: usize,
        channel: usize,
        recorded: f64,
        current: f64,
    },

    #[error("non-finite value in {what}{}", at_iteration(.iteration))]
    Numeric { what: String, iteration: Option<u64> },

    #[error(transparent)]
    Io(#[from] io::Error),
}

fn at_iteration(iteration: &Option<u64>) -> String {
    iteration.map(|i| format!(" at iteration {i}")).unwrap_or_default()
}

pub type Result<T> = std::result::Result<T, Error>;
