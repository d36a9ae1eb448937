use alloc::string::String;

/// Errors raised by the core library.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Tensor shapes do not line up; `detail` names the offending axes.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// A value is outside the domain an operation accepts.
    #[error("invalid input: {0}")]
    Input(String),

    /// An API was called in an order or state it does not support.
    #[error("usage error: {0}")]
    Usage(String),

    /// A model or block configuration failed validation.
    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    /// Training produced a NaN or infinite loss.
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    /// Parameter names in a restored state do not match the model.
    #[error("incompatible parameter set: missing [{missing}], extra [{extra}]")]
    Incompatible { missing: String, extra: String },
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn dim_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Dimension { op, detail: detail.into() }
}
