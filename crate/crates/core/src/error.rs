use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("quadrature sum is not finite for link `{link}` (order {order})")]
    NonFiniteIntegral { link: String, order: usize },
    #[error("derivative order {0} is not in 0..=3")]
    InvalidOrder(usize),
    #[error("index covariance is not positive semi-definite: {0}")]
    NonPSDCovariance(String),
    #[error("dataset is empty or too small: {0}")]
    EmptyDataset(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("covariance factorization failed: {0}")]
    SingularSigma(String),
    #[error("coordinate index {index} out of range 1..={p}")]
    IndexOutOfRange { index: usize, p: usize },
    #[error("estimand requires the treatment/missingness column `a`")]
    MissingResponseA,
    #[error("non-finite value in {0}")]
    NonFiniteValue(String),
    #[error("moment `{0}` is missing from the moment set")]
    MissingMoment(String),
    #[error("forward map is not strictly monotone on the search interval: {0}")]
    NonMonotoneMap(String),
    #[error("Jacobian is singular (|det| = {det:e}) at lambda = {lambda}, gamma2 = {gamma2}")]
    SingularJacobian { det: f64, lambda: f64, gamma2: f64 },
    #[error("solver did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("linear stage is singular (condition number {condition:e})")]
    SingularLinearStage { condition: f64 },
    #[error("g1 * f1 = {0:e} is too small to extract the cross term")]
    DegenerateG1(f64),
    #[error("f1 = {0:e} is too small to rescale a coordinate estimate")]
    DegenerateF1(f64),
    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),
    #[error("sample Gram matrix is not invertible")]
    SingularGram,
    #[error("design matrix is rank deficient")]
    RankDeficientDesign,
    #[error("column `a` must be binary (0/1); found {0}")]
    NonBinaryA(f64),
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("need at least {needed} replicates, got {got}")]
    TooFewReplicates { needed: usize, got: usize },
    #[error("unknown identity `{0}`")]
    UnknownIdentity(String),
    #[error("unknown link `{0}`")]
    UnknownLink(String),
    #[error("invalid option: {0}")]
    InvalidOption(String),
    #[error("malformed input: {0}")]
    Parse(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    /// Stable identifier of the variant, used on the CLI diagnostic stream.
    pub fn name(&self) -> &'static str {
        match self {
            Error::NonFiniteIntegral { .. } => "NonFiniteIntegral",
            Error::InvalidOrder(_) => "InvalidOrder",
            Error::NonPSDCovariance(_) => "NonPSDCovariance",
            Error::EmptyDataset(_) => "EmptyDataset",
            Error::DimensionMismatch(_) => "DimensionMismatch",
            Error::SingularSigma(_) => "SingularSigma",
            Error::IndexOutOfRange { .. } => "IndexOutOfRange",
            Error::MissingResponseA => "MissingResponseA",
            Error::NonFiniteValue(_) => "NonFiniteValue",
            Error::MissingMoment(_) => "MissingMoment",
            Error::NonMonotoneMap(_) => "NonMonotoneMap",
            Error::SingularJacobian { .. } => "SingularJacobian",
            Error::NoConvergence { .. } => "NoConvergence",
            Error::SingularLinearStage { .. } => "SingularLinearStage",
            Error::DegenerateG1(_) => "DegenerateG1",
            Error::DegenerateF1(_) => "DegenerateF1",
            Error::InsufficientSamples(_) => "InsufficientSamples",
            Error::SingularGram => "SingularGram",
            Error::RankDeficientDesign => "RankDeficientDesign",
            Error::NonBinaryA(_) => "NonBinaryA",
            Error::ConfigInvalid(_) => "ConfigInvalid",
            Error::TooFewReplicates { .. } => "TooFewReplicates",
            Error::UnknownIdentity(_) => "UnknownIdentity",
            Error::UnknownLink(_) => "UnknownLink",
            Error::InvalidOption(_) => "InvalidOption",
            Error::Parse(_) => "Parse",
            Error::Io(_) => "Io",
        }
    }

    /// True for failures of the numerical solve itself, as opposed to bad input.
    pub fn is_solver_failure(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteIntegral { .. }
                | Error::NonPSDCovariance(_)
                | Error::NonMonotoneMap(_)
                | Error::SingularJacobian { .. }
                | Error::NoConvergence { .. }
                | Error::SingularLinearStage { .. }
                | Error::DegenerateG1(_)
                | Error::DegenerateF1(_)
                | Error::SingularGram
                | Error::RankDeficientDesign
                | Error::SingularSigma(_)
        )
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
