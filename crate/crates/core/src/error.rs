use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing required column `{0}`")]
    MissingColumn(String),

    #[error("malformed row {row}: {message}")]
    MalformedRow { row: usize, message: String },

    #[error("dataset contains no events")]
    EmptyDataset,

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("event {seq_index} of student `{student_id}` is tagged with {n_skills} skills; the contextual slip model needs single-skill events")]
    MultiSkillUnsupported {
        student_id: String,
        seq_index: usize,
        n_skills: usize,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("degenerate Bayes update (zero evidence denominator)")]
    DegenerateUpdate,

    #[error("no observations for skill `{0}`")]
    NoData(String),

    #[error("no BKT parameters for skill `{0}`")]
    MissingParams(String),

    #[error("event at seq_index {seq_index} of student `{student_id}` lacks two same-skill follow-up opportunities")]
    InsufficientLookahead { student_id: String, seq_index: usize },

    #[error("unknown skill `{0}`")]
    UnknownSkill(String),

    #[error("optimizer did not converge after {iterations} iterations (gradient norm {grad_norm:.3e})")]
    NonConvergence { iterations: usize, grad_norm: f64 },

    #[error("feature manifest mismatch: model expects {expected}, got {found}")]
    ManifestMismatch { expected: String, found: String },

    #[error("carelessness standardization needs non-constant omega")]
    ZeroVariance,

    #[error("coefficient file schema error: {0}")]
    SchemaError(String),

    #[error("training set is empty")]
    EmptyTrainingSet,

    #[error("cross-validation needs at least {needed} students with labelled rows, found {found}")]
    TooFewStudents { needed: usize, found: usize },

    #[error("input is constant; rank correlation undefined")]
    ConstantInput,

    #[error("design matrix is rank deficient")]
    RankDeficient,

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("missing artifact `{0}`; run the preceding stage first")]
    MissingArtifact(String),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors caused by bad input or configuration rather than a
    /// failure while computing.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::MissingColumn(_)
                | Error::MalformedRow { .. }
                | Error::EmptyDataset
                | Error::InvalidDataset(_)
                | Error::MultiSkillUnsupported { .. }
                | Error::InvalidConfig(_)
                | Error::SchemaError(_)
                | Error::MissingArtifact(_)
                | Error::ManifestMismatch { .. }
                | Error::InvalidInput(_)
                | Error::Csv(_)
                | Error::Json(_)
        )
    }

    /// Stable variant name for diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::MissingColumn(_) => "MissingColumn",
            Error::MalformedRow { .. } => "MalformedRow",
            Error::EmptyDataset => "EmptyDataset",
            Error::InvalidDataset(_) => "InvalidDataset",
            Error::MultiSkillUnsupported { .. } => "MultiSkillUnsupported",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::DegenerateUpdate => "DegenerateUpdate",
            Error::NoData(_) => "NoData",
            Error::MissingParams(_) => "MissingParams",
            Error::InsufficientLookahead { .. } => "InsufficientLookahead",
            Error::UnknownSkill(_) => "UnknownSkill",
            Error::NonConvergence { .. } => "NonConvergence",
            Error::ManifestMismatch { .. } => "ManifestMismatch",
            Error::ZeroVariance => "ZeroVariance",
            Error::SchemaError(_) => "SchemaError",
            Error::EmptyTrainingSet => "EmptyTrainingSet",
            Error::TooFewStudents { .. } => "TooFewStudents",
            Error::ConstantInput => "ConstantInput",
            Error::RankDeficient => "RankDeficient",
            Error::InvalidInput(_) => "InvalidInput",
            Error::MissingArtifact(_) => "MissingArtifact",
            Error::Csv(_) => "Csv",
            Error::Json(_) => "Json",
            Error::Io(_) => "Io",
        }
    }
}
