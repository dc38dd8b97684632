//! One error type for the whole crate. Variants are grouped by the module
//! that raises them; the FFI layer maps them onto stable integer codes, so
//! add new variants at the end.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shapes do not line up for the requested operation.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// An operation produced NaN or infinity.
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    /// A tensor was used with a tape it was not recorded on, or a gradient
    /// was requested for something the tape never saw.
    #[error("tape misuse: {0}")]
    Tape(String),

    /// Configuration value out of its documented range.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// The step controller drove the step size below its floor.
    #[error("step size underflow at t = {t:.6e}: |h| = {h:.6e} fell below h_min = {h_min:.6e}")]
    StepUnderflow { t: f64, h: f64, h_min: f64 },

    /// The integrator hit its step budget before reaching t_end.
    #[error("step limit exceeded: {max_steps} steps used, integration stalled at t = {t:.6e}")]
    StepLimit { max_steps: usize, t: f64 },

    /// The assignment problem admits no feasible solution under its caps.
    #[error("infeasible assignment problem: {0}")]
    Infeasible(String),

    /// Training loss left the realm of finite numbers.
    #[error("training diverged: non-finite loss at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed input file (JSON, JSONL, TOML, binary parameter file, ...).
    #[error("failed to parse {what}: {detail}")]
    Parse { what: String, detail: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn parse(what: impl Into<String>, detail: impl std::fmt::Display) -> Self {
        Error::Parse { what: what.into(), detail: detail.to_string() }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
