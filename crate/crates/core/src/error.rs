use alloc::string::String;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid system parameters: {0}")]
    InvalidSystem(String),
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("trajectory diverged at step {step}")]
    Diverged { step: usize },
    #[error("subject {subject}: trajectory diverged at step {step}")]
    SubjectDiverged { subject: usize, step: usize },
    #[error("training diverged (batch element {element}) after {retries} retries")]
    TrainingDiverged { element: usize, retries: usize },
    #[error("sequence length {t_seq} exceeds subject {subject} length {t_max}")]
    SequenceTooLong {
        subject: usize,
        t_seq: usize,
        t_max: usize,
    },
    #[error("every run diverged")]
    AllDiverged,
}

pub type Result<T> = core::result::Result<T, Error>;
