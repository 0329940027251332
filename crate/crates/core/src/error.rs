use thiserror::Error;

/// Errors raised by the inference engine.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("parameter {index} = {value} outside domain [{lower}, {upper}]")]
    Domain {
        index: usize,
        value: f64,
        lower: f64,
        upper: f64,
    },
    #[error("parameter has dimension {got}, model expects {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid control: {0}")]
    Control(String),
    #[error("invalid model specification: {0}")]
    Spec(String),
    #[error("outcome must be 0 or 1, got {0}")]
    Outcome(i64),
    #[error("gradient is singular: likelihood {likelihood:e} too close to zero")]
    GradientSingularity { likelihood: f64 },
    #[error("ensemble degenerate: every particle has zero likelihood")]
    DegenerateEnsemble,
    #[error("ensemble degenerate at iteration {iteration}")]
    DegenerateAt { iteration: usize },
    #[error("weights not normalized (sum = {0})")]
    Unnormalized(f64),
    #[error("uncertainty is zero; cannot invert")]
    DegenerateUncertainty,
    #[error("control variates singular: datum {index} has zero likelihood at the reference point")]
    ControlVariateSingularity { index: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("fit error: {0}")]
    Fit(String),
    #[error("dataset line {line}: {message}")]
    Dataset { line: usize, message: String },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;
