use thiserror::Error;

/// Crate-wide error type. Variants map onto the process exit codes used by
/// the CLI: user-facing problems (config, input, file format) exit with 1,
/// internal failures (shape bugs, protocol violations, oracle failures)
/// exit with 2.
#[derive(Error, Debug)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("label error: {0}")]
    Label(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("corrupt file at byte offset {offset}: {detail}")]
    Corrupt { offset: u64, detail: String },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("oracle error: {0}")]
    Oracle(String),

    #[error("shard {shard_id} failed: {detail}")]
    Shard { shard_id: usize, detail: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 1 for user/config errors, 2 for
    /// internal or oracle failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::Input(_)
            | Error::Format(_)
            | Error::Usage(_)
            | Error::Io(_) => 1,
            Error::Shape(_)
            | Error::Label(_)
            | Error::Corrupt { .. }
            | Error::Protocol(_)
            | Error::Oracle(_)
            | Error::Shard { .. } => 2,
        }
    }
}
