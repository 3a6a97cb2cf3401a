use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("constraint set too large for brute force: {len} > {limit}")]
    TooManyConstraints { len: usize, limit: usize },

    #[error("training diverged at epoch {epoch}, step {step}: prediction loss {pred_loss}, explanation loss {exp_loss}")]
    Divergence {
        epoch: usize,
        step: usize,
        pred_loss: f64,
        exp_loss: f64,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
