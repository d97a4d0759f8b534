use thiserror::Error;

#[derive(Debug, Error)]
pub enum MatwError {
    #[error("point {0:?} lies on the singular set of the weight")]
    SingularPoint(Vec<f64>),
    #[error("matrix is not symmetric (asymmetry {0:.3e})")]
    NotSymmetric(f64),
    #[error("quadrature failure: {0}")]
    QuadratureFailure(String),
    #[error("stopping threshold a = {0} is too small: levels overlap")]
    ThresholdTooSmall(f64),
    #[error("input function is identically zero")]
    ZeroInput,
    #[error("exponent out of range: {0}")]
    ExponentOutOfRange(String),
    #[error("resolution too low: need at least {need} cells per axis, got {got}")]
    ResolutionTooLow { need: usize, got: usize },
    #[error("function does not vanish near the boundary (max boundary value {0:.3e})")]
    SupportViolation(f64),
    #[error("annulus contains no lattice cells")]
    EmptyAnnulus,
    #[error("coefficient is not elliptic at element {0}")]
    NonEllipticSample(usize),
    #[error("linear solver did not converge after {iterations} iterations (residual {residual:.3e})")]
    SolverFailure { iterations: usize, residual: f64 },
    #[error("line search failed at iteration {0}")]
    LineSearchFailure(usize),
    #[error("energy minimisation did not converge after {0} iterations")]
    NonConvergence(usize),
    #[error("ball does not fit inside the domain")]
    BallOutsideDomain,
    #[error("need at least 3 radii, got {0}")]
    TooFewRadii(usize),
    #[error("point pair lies outside the admissible ball")]
    PairOutsideBall,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("report not found: {}", .0.display())]
    MissingReport(std::path::PathBuf),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MatwError>;
