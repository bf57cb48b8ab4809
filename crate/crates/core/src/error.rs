use std::io;

use thiserror::Error;

/// Errors raised by every stage of the engine.
///
/// The variants group into three families that the command-line front end maps
/// onto distinct exit codes: configuration problems, data problems and
/// numerical failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("panel does not cover year {year} (needed for event year {event_year})")]
    Coverage { year: i32, event_year: i32 },

    #[error("sample error: {0}")]
    Sample(String),

    #[error("common support is empty: treated scores [{t_min}, {t_max}], control scores [{c_min}, {c_max}]")]
    Support { t_min: f64, t_max: f64, c_min: f64, c_max: f64 },

    #[error("logistic fit failed: perfect separation on covariate `{covariate}`")]
    Separation { covariate: String },

    #[error("insufficient data: {0}")]
    Insufficient(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("fold {fold}: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }

    /// Process exit code: 2 configuration, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Json(_) => 2,
            Error::Domain(_) | Error::Numeric(_) | Error::Separation { .. } => 4,
            Error::Fold { source, .. } | Error::Stage { source, .. } => source.exit_code(),
            Error::Data(_)
            | Error::Coverage { .. }
            | Error::Sample(_)
            | Error::Support { .. }
            | Error::Insufficient(_)
            | Error::Io { .. }
            | Error::Csv(_) => 3,
        }
    }
}
