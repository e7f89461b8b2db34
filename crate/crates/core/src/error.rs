use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("misaligned time axes: {0}")]
    Alignment(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("success probability {value} out of [0, 1] at day {t}")]
    Probability { t: usize, value: f64 },
    #[error("beta-binomial dispersion infeasible at day {t}: rho = {rho}")]
    DispersionInfeasible { t: usize, rho: f64 },
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("non-finite objective contribution at row {t}")]
    Numeric { t: usize },
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("matrix is not positive definite (pivot {0})")]
    NotPositiveDefinite(usize),
    #[error("tuning failed: {0}")]
    Tuning(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Stable machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Alignment(_) => "alignment",
            Error::Parameter(_) => "parameter",
            Error::Degenerate(_) => "degenerate",
            Error::Probability { .. } => "probability",
            Error::DispersionInfeasible { .. } => "dispersion_infeasible",
            Error::Validation(_) => "validation",
            Error::Numeric { .. } => "numeric",
            Error::Infeasible(_) => "infeasible",
            Error::NotPositiveDefinite(_) => "not_positive_definite",
            Error::Tuning(_) => "tuning",
            Error::Parse(_) => "parse",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
        }
    }
}
