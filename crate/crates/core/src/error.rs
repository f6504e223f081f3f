use std::path::PathBuf;

/// Errors surfaced by the quantizer, allocation and simulation layers.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("probability {0} outside (0, 0.5]")]
    Domain(f64),

    #[error("target BER {target} not reachable for m = {m} on SNR bracket [{lo:e}, {hi:e}]")]
    Bracket {
        m: u32,
        target: f64,
        lo: f64,
        hi: f64,
    },

    #[error("latent {index} with variance {variance} cannot meet its distortion target with b <= {b_max}")]
    InfeasibleTarget {
        index: usize,
        variance: f64,
        b_max: u32,
    },

    #[error("no BER target yields a feasible operating point")]
    NoFeasibleRate,

    #[error("degenerate equalizer input: power {power}, |h|^2 {gain}")]
    DegenerateEqualizer { power: f64, gain: f64 },

    #[error("library format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("malformed {what}: {detail}")]
    Malformed { what: &'static str, detail: String },

    #[error("internal accounting error: {0}")]
    Internal(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
