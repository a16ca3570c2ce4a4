use thiserror::Error;

/// Errors raised anywhere in the matching pipeline.
///
/// Messages lead with the module that raised them so that CLI output can be
/// traced back without a backtrace.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dataset: i/o error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("dataset: parse error at data row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("dataset: schema error: {0}")]
    Schema(String),

    #[error("{module}: dimension error: {message}")]
    Dimension {
        module: &'static str,
        message: String,
    },

    #[error(
        "index_model: Newton iterations did not converge after {iterations} steps \
         (score norm {score_norm:.3e}); last iterate {last_iterate:?}"
    )]
    NonConvergence {
        iterations: usize,
        score_norm: f64,
        last_iterate: Vec<f64>,
    },

    #[error(
        "index_model: apparent perfect separation: |beta|_inf = {max_abs_coef:.3} exceeds the \
         cap {cap} while the score norm is still {score_norm:.3e}"
    )]
    Separation {
        max_abs_coef: f64,
        cap: f64,
        score_norm: f64,
    },

    #[error(
        "{module}: ill-conditioned {what} (condition number {condition:.3e}); \
         the covariates look nearly collinear or the index nearly degenerate; consider trimming covariates that contribute little"
    )]
    Conditioning {
        module: &'static str,
        what: &'static str,
        condition: f64,
    },

    #[error("{module}: {message}")]
    Invalid {
        module: &'static str,
        message: String,
    },

    #[error("caliper: internal consistency error: {0}")]
    Consistency(String),

    #[error("effect: {0}")]
    Effect(String),

    #[error("output: {0}")]
    Output(String),
}

impl Error {
    pub(crate) fn invalid(module: &'static str, message: impl Into<String>) -> Self {
        Error::Invalid {
            module,
            message: message.into(),
        }
    }

    pub(crate) fn dimension(module: &'static str, message: impl Into<String>) -> Self {
        Error::Dimension {
            module,
            message: message.into(),
        }
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Output(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Output(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
