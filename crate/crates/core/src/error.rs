use thiserror::Error;

/// Errors raised by the solver, the simulator and the file formats.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid parameter `{name}` = {value}: {reason}")]
    InvalidParameter {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("characteristic polynomial has complex roots (discriminant {discriminant})")]
    ComplexRoots { discriminant: f64 },

    #[error("derivative of order {0} is not supported (max 2)")]
    UnsupportedOrder(u32),

    #[error("{what} must be positive, got {value}")]
    Domain { what: &'static str, value: f64 },

    #[error(
        "exponent {alpha} is numerically close to a root of Q but not a root \
         (|Q| = {q}, |Q'| = {dq}); refusing to pick a multiplicity"
    )]
    AmbiguousMultiplicity { alpha: f64, q: f64, dq: f64 },

    #[error("forcing term #{index} ({coeff} x^{exponent} ln^{log_power} x): {source}")]
    Term {
        index: usize,
        coeff: f64,
        exponent: f64,
        log_power: u32,
        #[source]
        source: Box<Error>,
    },

    #[error("x = {x} lies below the deepest segment (depth {depth} reaches down to {lowest})")]
    DepthExceeded { x: f64, depth: usize, lowest: f64 },

    #[error("x = {x} is outside the continuation region (0, {x_star})")]
    OutOfContinuation { x: f64, x_star: f64 },

    #[error("depth {depth} exceeds the supported maximum {max}")]
    DepthOverflow { depth: usize, max: usize },

    #[error("no threshold found: {trace}")]
    NoRootFound { trace: String },

    #[error("boundary system is singular: {0}")]
    SingularElimination(String),

    #[error("non-finite value while {0}")]
    NonFinite(&'static str),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("model has no segments")]
    EmptyModel,

    #[error("i/o: {0}")]
    Io(String),
}

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::AmbiguousMultiplicity { .. } => 3,
            Error::Term { source, .. } => source.exit_code(),
            Error::DepthExceeded { .. } | Error::DepthOverflow { .. } => 4,
            Error::NoRootFound { .. } | Error::SingularElimination(_) => 6,
            _ => 2,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
