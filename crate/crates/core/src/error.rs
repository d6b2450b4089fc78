use thiserror::Error;

/// Errors raised anywhere in the decomposition pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("missing value in column `{column}` at row {row}")]
    MissingValue { column: String, row: usize },
    #[error("unknown treatment label `{0}`")]
    UnknownTreatmentLabel(String),
    #[error("unknown column `{0}`")]
    UnknownColumn(String),
    #[error("treatment label `{0}` is assigned to more than one arm")]
    OverlappingArms(String),
    #[error("arm `{0}` contains no units")]
    EmptyArm(String),
    #[error("group `{0}` contains no units")]
    EmptyGroup(String),
    #[error("unknown arm `{0}`")]
    UnknownArm(String),
    #[error("unknown group `{0}`")]
    UnknownGroup(String),
    #[error("empty cell (t={label}, g={group})")]
    EmptyCell { label: String, group: String },
    #[error("dose {0} lies outside every bin and atom")]
    OutOfRangeDose(f64),
    #[error("invalid partition: {0}")]
    InvalidPartition(String),
    #[error("invalid fold count K={k} for n={n} (need 2 <= K <= n)")]
    InvalidK { k: usize, n: usize },
    #[error("treatment `{label}` is absent from the training split of fold {fold}; lower K or merge labels")]
    LabelAbsentInFold { label: String, fold: usize },
    #[error("learner failure: {0}")]
    LearnerFailure(String),
    #[error("degenerate denominator in {what}: {value:e}")]
    DegenerateDenominator { what: String, value: f64 },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("zero variance for the requested contrast")]
    ZeroVariance,
    #[error("covariance matrix is singular")]
    SingularCovariance,
    #[error("invalid significance level {0}")]
    InvalidAlpha(f64),
    #[error("invalid preset `{0}`")]
    InvalidPreset(String),
    #[error("quadrature failure: {0}")]
    QuadratureFailure(String),
    #[error("zero-probability conditioning event: {0}")]
    ZeroProbabilityCell(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

impl Error {
    /// Errors caused by malformed inputs rather than by the estimation itself.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::MissingValue { .. }
                | Error::UnknownTreatmentLabel(_)
                | Error::UnknownColumn(_)
                | Error::OverlappingArms(_)
                | Error::UnknownArm(_)
                | Error::UnknownGroup(_)
                | Error::OutOfRangeDose(_)
                | Error::InvalidPartition(_)
                | Error::InvalidK { .. }
                | Error::InvalidAlpha(_)
                | Error::InvalidPreset(_)
                | Error::InvalidInput(_)
        )
    }

    /// Name of the module that raised the error, used in CLI diagnostics.
    pub fn module(&self) -> &'static str {
        match self {
            Error::MissingValue { .. }
            | Error::UnknownTreatmentLabel(_)
            | Error::UnknownColumn(_)
            | Error::OverlappingArms(_)
            | Error::EmptyArm(_)
            | Error::EmptyGroup(_)
            | Error::UnknownArm(_)
            | Error::UnknownGroup(_)
            | Error::OutOfRangeDose(_)
            | Error::InvalidPartition(_)
            | Error::InvalidInput(_) => "model",
            Error::InvalidK { .. } | Error::LabelAbsentInFold { .. } | Error::LearnerFailure(_) => "nuisance",
            Error::EmptyCell { .. } | Error::DegenerateDenominator { .. } | Error::NonFinite(_) => "moments",
            Error::ZeroVariance => "decomp",
            Error::SingularCovariance | Error::InvalidAlpha(_) => "homogeneity",
            Error::ZeroProbabilityCell(_) => "oracle",
            Error::InvalidPreset(_) | Error::QuadratureFailure(_) => "simulate",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
