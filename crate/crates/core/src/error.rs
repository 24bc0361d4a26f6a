use thiserror::Error;

/// Crate-wide error type.
///
/// Variant choice mirrors how failures surface operationally: configuration
/// problems, missing on-disk state, malformed files, I/O, and internal
/// contract violations are kept distinct so callers (notably the CLI) can map
/// them to exit codes without string matching.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes incompatible with the requested operation.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// An operation precondition was violated by the caller.
    #[error("contract violation in {op}: {detail}")]
    Contract { op: &'static str, detail: String },

    /// A tape variable was used with a tape it does not belong to.
    #[error("graph error: {0}")]
    Graph(String),

    /// Invalid configuration values.
    #[error("config error: {0}")]
    Config(String),

    /// Required state (running stats, checkpoints, artifacts) is missing.
    #[error("state error: {0}")]
    State(String),

    /// Malformed binary container (bad magic, wrong layout).
    #[error("format error: {0}")]
    Format(String),

    /// Unsupported container version.
    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    /// Container shorter than its header promises.
    #[error("truncated buffer: {0}")]
    Truncated(String),

    /// A dataset file failed to decode.
    #[error("ingest error for {path}: {detail}")]
    Ingest { path: String, detail: String },

    /// Training loss became non-finite.
    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Contract { op, detail: detail.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
