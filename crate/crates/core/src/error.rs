use alloc::string::String;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Malformed or inconsistent input data (shapes, grids, non-finite values).
    #[error("input error: {0}")]
    Input(String),
    /// A required evaluator or setting is missing.
    #[error("configuration error: {0}")]
    Config(String),
    /// A computation produced non-finite values.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// The state left the blow-up guard.
    #[error("solver diverged at step {step} (particle {particle}, |x| = {magnitude:e})")]
    Diverged {
        step: usize,
        particle: usize,
        magnitude: f64,
    },
    /// A causal sampler asked for idiosyncratic noise beyond the current step.
    #[error("causality violation at step {step}: requested noise up to node {requested}")]
    Causality { step: usize, requested: usize },
    /// Too much quadrature mass left the dynamic-programming lattice.
    #[error("lattice too small: escape mass {escape:.4} exceeds {limit:.4}")]
    LatticeTooSmall { escape: f64, limit: f64 },
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! input_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Input(alloc::format!($($arg)*))
    };
}
pub(crate) use input_err;
