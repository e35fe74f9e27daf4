use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("quantizer needs dim >= 1 and levels >= 2, got dim={dim} levels={levels}")]
    InvalidQuantizer { dim: usize, levels: usize },
    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(&'static str),
    #[error("invalid source: {0}")]
    InvalidSource(&'static str),
    #[error("{objective} objective is inconsistent with tradeoff weights lambda_c={lambda_c} lambda_p={lambda_p}")]
    InconsistentTradeoff {
        objective: &'static str,
        lambda_c: f64,
        lambda_p: f64,
    },
    #[error("constraint region is empty")]
    EmptyRegion,
    #[error("instance too large for the requested oracle routine: {0}")]
    TooLarge(&'static str),
}
