use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two objects that must share a layout (weights, masks, batches) disagree.
    #[error("layout mismatch in {context}: expected {expected}, found {found}")]
    Layout {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    /// A client payload disagrees with what the round protocol dictates.
    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("decode error at byte {offset}: {reason}")]
    Decode { offset: usize, reason: String },

    #[error("non-finite loss for client {client} in round {round} at local iteration {iteration}")]
    NonFinite {
        client: u32,
        round: u32,
        iteration: usize,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn layout(context: &'static str, expected: usize, found: usize) -> Self {
        Error::Layout {
            context,
            expected,
            found,
        }
    }
}
