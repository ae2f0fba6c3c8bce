use thiserror::Error;

/// Errors produced by the design, simulation, estimation and analysis stages.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid design: {0}")]
    InvalidDesign(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("control synthesis failed: {0}")]
    Synthesis(String),

    #[error("simulation diverged at period {period}: non-finite state")]
    NonFiniteState { period: usize },

    #[error("non-finite control observation")]
    NonFiniteObservation,

    #[error("under-determined calibration: {rows} usable rows for {unknowns} unknowns (need {required})")]
    UnderDetermined {
        rows: usize,
        unknowns: usize,
        required: usize,
    },

    #[error("calibration did not converge after {iterations} iterations (relative residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("channel mismatch: trace has {trace} channels, filter expects {filter}")]
    ChannelMismatch { trace: usize, filter: usize },

    #[error("sequence too short: have {have}, need {need}")]
    TooShort { have: usize, need: usize },

    #[error("band [{lo}, {hi}] exceeds the spectrum span")]
    BandOutOfRange { lo: f64, hi: f64 },

    #[error("no notch found (depth {depth_db:.1} dB)")]
    NoNotch { depth_db: f64 },

    #[error("unstable run: state reached {max_state:.3e}")]
    Unstable { max_state: f64 },

    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;
