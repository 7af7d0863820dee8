use thiserror::Error;

/// Errors produced anywhere in the simulation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("mesh topology error: {0}")]
    Topology(String),

    #[error("port resolution failed: {0}")]
    PortResolution(String),

    #[error("assembly error: {0}")]
    Assembly(String),

    #[error("linear solver did not converge after {iterations} iterations (relative residual {residual:.3e})")]
    SolverFailure { iterations: usize, residual: f64 },

    #[error("nonlinear iteration failed at step {step}: {detail} (last residual {residual:.3e})")]
    Nonlinear {
        step: usize,
        residual: f64,
        detail: String,
    },

    #[error("circuit topology error: {0}")]
    CircuitTopology(String),

    #[error("netlist parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("archive horizon exceeded: step {step} needs {step_plus_one} lags but archive holds {n_t}")]
    HorizonExceeded {
        step: usize,
        step_plus_one: usize,
        n_t: usize,
    },

    #[error("corrupt archive: {0}")]
    CorruptArchive(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
