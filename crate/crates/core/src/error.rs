use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
    #[error("fields live on different grids")]
    ContextMismatch,
    #[error("eps = {0} is not a dyadic rational 2^-k")]
    NotDyadic(f64),
    #[error("target lattice overflow: {0}")]
    LatticeOverflow(String),
    #[error("coefficient field outside the unit L-infinity ball (|u|_inf = {0:.3e})")]
    LinfBall(f64),
    #[error("Neumann series diverges: measured contraction factor {factor:.3e} >= 1")]
    DivergentNeumann { factor: f64 },
    #[error("no convergence after {iterations} iterations (last residual {residual:.3e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("state outside the working ball: {0}")]
    OutsideBall(String),
    #[error("reference integrator diverged at t = {t:.4}")]
    Diverged { t: f64 },
    #[error("iterate left the domain ball at step {step} (norm {norm:.3e} > {radius:.3e})")]
    BallEscape { step: usize, norm: f64, radius: f64 },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("system fails transparency: {0}")]
    NonTransparent(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
