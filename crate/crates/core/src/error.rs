use thiserror::Error;

pub type Result<T> = std::result::Result<T, SemError>;

#[derive(Debug, Error)]
pub enum SemError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("unknown operator `{op}` at line {line}")]
    UnknownOperator { op: String, line: usize },

    #[error("conflicting declaration of `{param}` at line {line}")]
    DuplicateDeclaration { param: String, line: usize },

    #[error("model is empty")]
    EmptyModel,

    #[error("name `{0}` is used both as a latent and as an observed variable")]
    NameCollision(String),

    #[error("variable `{0}` is not part of the observed variable order")]
    UnknownVariable(String),

    #[error("matrix is not symmetric (max deviation {0:e})")]
    Asymmetric(f64),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("I - A is singular at the supplied parameter vector")]
    SingularPaths,

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("non-finite value in data at row {row}, column {column}")]
    NonFinite { row: usize, column: usize },

    #[error("malformed data: {0}")]
    MalformedData(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("optimizer did not converge after {iterations} iterations (gradient norm {gradient_norm:e})")]
    NotConverged {
        iterations: usize,
        gradient_norm: f64,
    },

    #[error("information matrix J is singular; the model is probably not identified")]
    SingularInformation,

    #[error("design matrix is rank deficient")]
    RankDeficient,

    #[error("group `{0}` is empty")]
    EmptyGroup(String),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("unknown column `{0}`")]
    UnknownColumn(String),

    #[error("duplicate column name `{0}`")]
    ColumnCollision(String),

    #[error("parameter `{0}` is not equality-constrained across groups")]
    NotEqualityConstrained(String),

    #[error("invalid simulation condition: {0}")]
    InvalidCondition(String),

    #[error("{failed} of {total} replications failed for method {method}")]
    TooManyFailures {
        method: String,
        failed: usize,
        total: usize,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
