use thiserror::Error;

pub type Result<T, E = FpcaError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FpcaError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("parse error at row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("degenerate domain [{lower}, {upper}]")]
    DegenerateDomain { lower: f64, upper: f64 },
    #[error("local linear fit failed at t = {at}: {message}")]
    Estimation { at: String, message: String },
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("no positive eigenvalues")]
    NoPositiveEigenvalues,
    #[error("requested {requested} components but only {available} are available")]
    TooManyComponents { requested: usize, available: usize },
    #[error("singular covariance for subject `{0}`")]
    SingularCovariance(String),
    #[error("matrix not positive semidefinite: eigenvalue {0:e}")]
    NotPsd(f64),
    #[error("grids do not match")]
    GridMismatch,
    #[error("quantile function is not monotone near p = {0}")]
    NonMonotoneQuantile(f64),
    #[error("division by vanishing eigenvalue at component {0}")]
    VanishingEigenvalue(usize),
    #[error("eigen solver did not converge")]
    NoConvergence,
    #[error("degenerate ellipse: covariance is singular")]
    DegenerateEllipse,
    #[error("{0}")]
    Experiment(String),
}
