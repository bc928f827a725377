use thiserror::Error;

/// Errors surfaced by construction and evaluation of weight programs.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid leaky slope alpha={0}, must lie in (0, 1]")]
    InvalidAlpha(f64),
    #[error("shape mismatch: {0}")]
    ShapeError(String),
    #[error("input does not match block layout: {0}")]
    LayoutError(String),
    #[error("invalid filter constant: {0}")]
    InvalidConstant(String),
    #[error("indicator vector is not one-hot: {0}")]
    InvalidIndicator(String),
    #[error("skill index {index} out of range 1..={count}")]
    InvalidSkill { index: usize, count: usize },
    #[error("prompt state error: {0}")]
    PromptStateError(String),
    #[error("sequence length {n} exceeds encoding capacity {max}")]
    CapacityError { n: usize, max: usize },
    #[error("gradient step size {0} out of stable range")]
    InvalidStep(f64),
    #[error("iteration bound undefined for infinite condition number")]
    UnboundedIterations,
    #[error("layer {layer} is underdetermined: feature matrix is rank deficient")]
    UnderdeterminedLayer { layer: usize },
}

pub type Result<T> = std::result::Result<T, Error>;
