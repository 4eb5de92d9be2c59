use thiserror::Error;

/// Every failure the library can report.
///
/// Variants are grouped loosely by the stage that raises them: ingestion,
/// weight fitting, estimation, variance and inference.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum MaicError {
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("non-numeric value {value:?} in column `{column}` (data row {row})")]
    NonNumericValue {
        column: String,
        row: usize,
        value: String,
    },
    #[error("invalid arm code {value} (data row {row}); IPD arms must be 0 or 1")]
    InvalidArmCode { row: usize, value: f64 },
    #[error("binary outcome expected 0/1 but found {value} (data row {row})")]
    InvalidOutcome { row: usize, value: f64 },
    #[error("study contains no records in the active arm")]
    EmptyStudy,
    #[error("schema error: {0}")]
    SchemaError(String),
    #[error("negative variance in `{0}`")]
    NegativeVariance(String),
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: String,
        expected: usize,
        found: usize,
    },
    #[error("covariate names differ between IPD {ipd:?} and AGD {agd:?}")]
    CovariateMismatch { ipd: Vec<String>, agd: Vec<String> },
    #[error("covariate variances required for second-moment matching are missing on the {0} arm")]
    MissingVariance(String),
    #[error("weights did not converge after {iterations} iterations (balance residual {residual:.3e} on `{covariate}`)")]
    NonConvergence {
        iterations: usize,
        residual: f64,
        covariate: String,
    },
    #[error("covariate `{0}` is constant in the IPD but its target differs")]
    DegenerateCovariate(String),
    #[error("weights must be a nonempty list of positive values")]
    EmptyWeights,
    #[error("proportion {0} is on the boundary; the logit link needs a value in (0, 1)")]
    BoundaryProportion(f64),
    #[error("no active arm available")]
    NoActiveArm,
    #[error("no common comparator arm available ({0})")]
    NoComparatorArm(&'static str),
    #[error("logistic outcome fit separated (max |coefficient| {0:.1})")]
    SeparationError(f64),
    #[error("outcome regression design matrix is singular")]
    SingularDesign,
    #[error("balance Jacobian is singular")]
    SingularJacobian,
    #[error("AGD outcome variance is missing on the {0} arm")]
    MissingAgdVariance(&'static str),
    #[error("standard error strategy `{strategy}` is not available for {method}")]
    VarianceUnavailable {
        method: &'static str,
        strategy: &'static str,
    },
    #[error("full two-study IPD is required for this quantity")]
    RequiresFullIpd,
    #[error("confidence level {0} must lie strictly between 0 and 1")]
    InvalidLevel(f64),
    #[error("standard error must be positive for a Wald test")]
    ZeroSe,
    #[error("cell (trial {trial}, arm {arm}) has {available} members, {required} required")]
    InsufficientCell {
        trial: u8,
        arm: u8,
        available: usize,
        required: usize,
    },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl MaicError {
    /// Numerical failures (as opposed to bad input) get their own exit code in the CLI.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            MaicError::NonConvergence { .. }
                | MaicError::SeparationError(_)
                | MaicError::SingularDesign
                | MaicError::SingularJacobian
                | MaicError::DegenerateCovariate(_)
        )
    }
}

impl From<std::io::Error> for MaicError {
    fn from(e: std::io::Error) -> Self {
        MaicError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, MaicError>;
