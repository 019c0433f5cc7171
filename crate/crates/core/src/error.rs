use thiserror::Error;

#[derive(Debug, Error)]
pub enum AcktError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: u64, msg: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl AcktError {
    /// True for failures caused by input data or artifacts rather than by
    /// invalid arguments or configuration.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            AcktError::Parse { .. } | AcktError::Data(_) | AcktError::Checkpoint(_) | AcktError::Io(_)
        )
    }

    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        AcktError::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}

pub type Result<T> = std::result::Result<T, AcktError>;
