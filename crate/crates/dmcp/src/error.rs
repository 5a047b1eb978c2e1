use std::fmt;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by tensor math, network validation, training and sampling.
#[derive(Clone, Debug, PartialEq)]
pub enum Error {
    /// An operation received tensors whose shapes cannot be combined.
    Shape { op: &'static str, detail: String },
    /// A class label lies outside the logit range.
    LabelOutOfRange { label: usize, num_classes: usize },
    /// A network specification violates a structural invariant.
    Validation(String),
    /// A configuration field failed validation.
    Config { field: String, detail: String },
    /// Direct sampling exhausted its attempt budget without an accepted
    /// structure. Carries the empirical FLOPs of the rejected draws.
    SamplingExhausted {
        attempts: usize,
        target: u64,
        gamma: f64,
        observed_flops: Vec<u64>,
    },
    /// A loss or activation became non-finite during training.
    NonFinite { context: String },
    /// An operation was called in the wrong gate mode.
    GateMode { expected: &'static str, got: &'static str },
    /// Wrapper around I/O failures.
    Io(String),
    /// Wrapper around document parse failures.
    Parse(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "shape error in {op}: {detail}"),
            Error::LabelOutOfRange { label, num_classes } => {
                write!(f, "label {label} out of range for {num_classes} classes")
            }
            Error::Validation(msg) => write!(f, "invalid network spec: {msg}"),
            Error::Config { field, detail } => write!(f, "invalid config field `{field}`: {detail}"),
            Error::SamplingExhausted { attempts, target, gamma, observed_flops } => {
                let (lo, hi, mean) = flops_summary(observed_flops);
                write!(
                    f,
                    "direct sampling exhausted {attempts} attempts without a structure in \
                     [{:.0}, {target}]; observed FLOPs min {lo} max {hi} mean {mean:.0}",
                    gamma * *target as f64
                )
            }
            Error::NonFinite { context } => write!(f, "non-finite value: {context}"),
            Error::GateMode { expected, got } => {
                write!(f, "gate mode mismatch: operation requires {expected} mode, gate is {got}")
            }
            Error::Io(msg) => write!(f, "io error: {msg}"),
            Error::Parse(msg) => write!(f, "parse error: {msg}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

fn flops_summary(flops: &[u64]) -> (u64, u64, f64) {
    if flops.is_empty() {
        return (0, 0, 0.0);
    }
    let lo = *flops.iter().min().unwrap();
    let hi = *flops.iter().max().unwrap();
    let mean = flops.iter().map(|&v| v as f64).sum::<f64>() / flops.len() as f64;
    (lo, hi, mean)
}
