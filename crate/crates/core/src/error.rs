use thiserror::Error;

use crate::bb::BbSolution;
use crate::lti_feedback::FeasibilityReport;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    // measures
    #[error("density is identically zero")]
    AllZeroDensity,
    #[error("density has a negative value {value} at cell {index}")]
    NegativeDensity { index: usize, value: f64 },
    #[error("density integrates to {mass}, expected 1")]
    UnnormalizedInput { mass: f64 },
    #[error("particle {index} lies outside the grid box")]
    PointOutOfBounds { index: usize },
    #[error("particle ensemble carries no density values")]
    MissingDensityValues,
    #[error("ensemble of {n} particles is degenerate in dimension {dim}")]
    DegenerateEnsemble { n: usize, dim: usize },
    #[error("covariance is not positive semidefinite (min eigenvalue {min_eigenvalue})")]
    NonPsdCovariance { min_eigenvalue: f64 },
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),

    // discrete-ot
    #[error("marginal masses differ: source {source_mass}, target {target_mass}")]
    InfeasibleMarginals { source_mass: f64, target_mass: f64 },
    #[error("transportation simplex stalled after {pivots} pivots")]
    SolverStall { pivots: usize },
    #[error("brute-force enumeration limited to 8 atoms, got {n}")]
    TooLarge { n: usize },
    #[error("brute-force oracle needs equal uniform weights on equal-size supports")]
    UnequalWeights,

    // gaussian-ot
    #[error("matrix is not symmetric positive semidefinite (min eigenvalue {min_eigenvalue})")]
    NonPsdInput { min_eigenvalue: f64 },
    #[error("covariance is singular (min eigenvalue {min_eigenvalue}, trace {trace})")]
    SingularCovariance { min_eigenvalue: f64, trace: f64 },
    #[error("interpolation parameter {0} outside [0, 1]")]
    SOutOfRange(f64),

    // lti-feedback
    #[error("steering infeasible{}: residuals {:.3e} / {:.3e}",
        horizon.map(|h| format!(" at horizon {h}")).unwrap_or_default(),
        report.residual_mat, report.residual_vec)]
    InfeasibleSteering {
        horizon: Option<usize>,
        report: FeasibilityReport,
    },

    // benamou-brenier
    #[error("source and target grids differ in geometry")]
    GeometryMismatch,
    #[error("only {inner_fraction} of the mass lies more than two cells from the boundary")]
    MassNearBoundary { inner_fraction: f64 },
    #[error("dynamic transport solver did not converge in {} iterations", .0.iterations)]
    NotConverged(Box<BbSolution>),

    // liouville
    #[error("point {point:?} outside the tabulated field domain")]
    OutOfDomain { point: Vec<f64> },
    #[error("trajectory diverged at t = {time}")]
    BlowUp { time: f64 },

    // io
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
