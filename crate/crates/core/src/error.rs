use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("direction is degenerate (residual norm {residual:e})")]
    DegenerateDirection { residual: f64 },

    #[error("layer {layer} has vanishing representation energy {energy:e}")]
    DegenerateLayer { layer: usize, energy: f64 },

    #[error("eigensolver did not converge after {sweeps} sweeps")]
    NoConvergence { sweeps: usize },

    #[error("activation trace does not belong to this network: {0}")]
    MissingTrace(String),

    #[error("training diverged at step {step}")]
    Diverged { step: usize },

    #[error("network is undertrained: loss {loss} exceeds required {required}")]
    Undertrained { loss: f64, required: f64 },

    #[error("retention undefined: clean probe accuracy is zero")]
    UndefinedRetention,
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
