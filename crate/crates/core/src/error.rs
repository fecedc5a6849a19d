use thiserror::Error;

/// Errors raised by the numerical core.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("time {t} outside the admissible domain [{lo}, {hi}]")]
    Domain { t: f64, lo: f64, hi: f64 },

    #[error("{what} = {value} is outside the representable range [{lo}, {hi}]")]
    Range {
        what: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("model error: {0}")]
    Model(String),

    #[error("configuration error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("non-finite value at step {step} (stage `{stage}`)")]
    Divergence { step: usize, stage: &'static str },

    #[error("adjoint integration became non-finite at backward step {step} (t = {t})")]
    AdjointInstability { step: usize, t: f64 },

    #[error("quadrature failed to reach tolerance {tol:e}: estimated error {estimate:e}")]
    Accuracy { tol: f64, estimate: f64 },

    #[error("operation `{0}` is not supported by this backend")]
    Unsupported(&'static str),

    #[error("training diverged at step {step}: last finite loss {last_loss}")]
    Training { step: usize, last_loss: f64 },

    #[error("guided sampling diverged at step {step}: last finite loss {last_loss}")]
    GuidanceDivergence { step: usize, last_loss: f64 },

    #[error("training finished but held-out loss {heldout} did not beat threshold {threshold}")]
    TrainingThreshold { heldout: f64, threshold: f64 },

    #[error("greedy iteration did not converge at t = {t}: final residual {residual:e} after {iterations} iterations")]
    NonConvergence {
        t: f64,
        residual: f64,
        iterations: usize,
    },

    #[error("weights file: {0}")]
    Format(String),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by a numerical blow-up rather than bad input.
    pub fn is_divergence(&self) -> bool {
        matches!(
            self,
            Error::Divergence { .. }
                | Error::AdjointInstability { .. }
                | Error::Training { .. }
                | Error::GuidanceDivergence { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
