use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("{solver} did not converge after {iterations} iterations (last residual {residual:e})")]
    NonConvergence { solver: &'static str, iterations: usize, residual: f64, history: Vec<f64> },

    #[error("singular pivot {pivot:e} at row {row} in {context}")]
    SingularPivot { context: &'static str, row: usize, pivot: f64 },

    #[error("internal consistency check failed: {0}")]
    Consistency(String),

    #[error("positivity regime violated at node {node}: rho^beta * v = {value}")]
    Regime { node: usize, value: f64 },

    #[error("Fredholm alternative violated: lambda = {lambda} is within tolerance of eigenvalue {eigenvalue} and f has relative component {component:e} along its eigenspace")]
    AlternativeViolation { lambda: f64, eigenvalue: f64, component: f64 },

    #[error("remainder rate did not improve after subtracting rate {rate}: before {before}, after {after}")]
    Stagnation { rate: f64, before: f64, after: f64 },

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
