use thiserror::Error;

/// Errors raised by the library. The CLI maps these onto exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error("invalid label {label} (dataset has {num_labels} labels)")]
    Label { label: usize, num_labels: usize },

    #[error("value {value} outside [{lo}, {hi}] for {what}")]
    Range {
        what: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("schedule error: mid-point time {mid} is negative (t={t}, dt={dt})")]
    Schedule { t: f64, dt: f64, mid: f64 },

    #[error("non-finite state at step {step}")]
    Numeric { step: usize },

    #[error("strategy {strategy} failed: non-finite state at step {step}")]
    StrategyFailed { strategy: String, step: usize },

    #[error("shape mismatch: expected {expected} parameters, got {actual}")]
    Shape { expected: usize, actual: usize },

    #[error("training diverged at epoch {epoch} (last finite epoch: {last_finite:?})")]
    NanLoss { epoch: usize, last_finite: Option<usize> },

    #[error("invalid input: {0}")]
    Input(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
