use thiserror::Error;

/// Errors produced by the cpab library.
#[derive(Debug, Error)]
pub enum CpabError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A computation produced non-finite values, usually from an extreme θ.
    #[error("numeric failure: {0}")]
    NumericFailure(String),

    #[error("rank deficient: {0}")]
    RankDeficient(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl CpabError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        CpabError::InvalidArgument(msg.into())
    }

    /// Stable snake_case name of the variant, for machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self {
            CpabError::InvalidArgument(_) => "invalid_argument",
            CpabError::NumericFailure(_) => "numeric_failure",
            CpabError::RankDeficient(_) => "rank_deficient",
            CpabError::Internal(_) => "internal",
            CpabError::Format(_) => "format",
            CpabError::Io(_) => "io",
            CpabError::Json(_) => "json",
            CpabError::Image(_) => "image",
        }
    }

    /// True for errors caused by bad inputs rather than numerics.
    pub fn is_input_error(&self) -> bool {
        !matches!(self, CpabError::NumericFailure(_) | CpabError::Internal(_))
    }
}

pub type Result<T> = std::result::Result<T, CpabError>;
