use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("root of backward pass must be scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("operation `{0}` does not support differentiable (higher-order) gradients")]
    NotTwiceDifferentiable(&'static str),

    #[error("conjugate gradient did not converge after {iterations} iterations (residual norm {residual:e})")]
    CgNonConvergence { iterations: usize, residual: f64 },

    #[error("operator `{0}` is not diagonalizable in the Fourier basis")]
    UnsupportedOperator(&'static str),

    #[error("chain diverged at layer {layer}: non-finite {what}")]
    ChainDivergence { layer: usize, what: &'static str },

    #[error("training diverged at step {step}: non-finite {what}")]
    TrainingDivergence { step: u64, what: &'static str },

    #[error("quadrature grid too coarse: refinement changed {what} by {drift:e}")]
    GridTooCoarse { what: &'static str, drift: f64 },

    #[error("undefined correlation: {0} map is constant")]
    ConstantMap(&'static str),

    #[error("format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
