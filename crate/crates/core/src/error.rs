use alloc::boxed::Box;
use alloc::string::String;
use core::fmt;

/// Errors raised by the inference toolkit.
#[derive(Clone, Debug, PartialEq)]
pub enum Error {
    /// No sample carries a One/Zero label for the property.
    NoLabeledSamples { property: String },
    /// Not enough samples of a class to reach the requested ratio.
    InfeasibleRatio {
        ratio: f64,
        required_one: usize,
        available_one: usize,
        required_zero: usize,
        available_zero: usize,
    },
    InvalidPropertySpec(String),
    InvalidVocab(String),
    UnknownWord(String),
    InvalidArgument(String),
    /// Every label of a prompt's generations was N/A.
    AllNotApplicable,
    AllPromptsInvalid,
    ParseFailure(String),
    Transport(String),
    ScoringUnsupported(String),
    EmptySequence,
    EmptyGenerationSet { prompt: String },
    LengthMismatch { left: usize, right: usize },
    TooFewSamples { needed: usize, got: usize },
    DimensionMismatch { expected: usize, got: usize },
    DegenerateTraining(String),
    HoldoutContamination { index: usize },
    EmptyHoldout,
    ShadowBuildFailed(String),
    OutOfRange(f64),
    /// A pipeline stage failed.
    Stage { stage: &'static str, source: Box<Error> },
}

impl Error {
    pub(crate) fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Innermost error, with stage tags stripped.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            e => e,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::NoLabeledSamples { property } => {
                write!(f, "no sample carries a 0/1 label for property `{property}`")
            }
            Error::InfeasibleRatio {
                ratio,
                required_one,
                available_one,
                required_zero,
                available_zero,
            } => write!(
                f,
                "ratio {ratio} infeasible: need {required_one} positive (have {available_one}) \
                 and {required_zero} negative (have {available_zero})"
            ),
            Error::InvalidPropertySpec(m) => write!(f, "invalid property spec: {m}"),
            Error::InvalidVocab(m) => write!(f, "invalid vocabulary spec: {m}"),
            Error::UnknownWord(w) => write!(f, "word `{w}` is not in the model vocabulary"),
            Error::InvalidArgument(m) => write!(f, "invalid argument: {m}"),
            Error::AllNotApplicable => write!(f, "all labels are N/A"),
            Error::AllPromptsInvalid => write!(f, "every prompt produced only N/A labels"),
            Error::ParseFailure(m) => write!(f, "could not parse a ratio from response: {m:?}"),
            Error::Transport(m) => write!(f, "transport error: {m}"),
            Error::ScoringUnsupported(m) => write!(f, "endpoint `{m}` does not expose token log-probabilities"),
            Error::EmptySequence => write!(f, "text tokenizes to an empty sequence"),
            Error::EmptyGenerationSet { prompt } => {
                write!(f, "generation set for prompt {prompt:?} is empty")
            }
            Error::LengthMismatch { left, right } => {
                write!(f, "length mismatch: {left} vs {right}")
            }
            Error::TooFewSamples { needed, got } => {
                write!(f, "need at least {needed} samples, got {got}")
            }
            Error::DimensionMismatch { expected, got } => {
                write!(f, "expected dimension {expected}, got {got}")
            }
            Error::DegenerateTraining(m) => write!(f, "degenerate training data: {m}"),
            Error::HoldoutContamination { index } => {
                write!(f, "holdout sample {index} has a label contradicting its set")
            }
            Error::EmptyHoldout => write!(f, "holdout set is empty"),
            Error::ShadowBuildFailed(m) => write!(f, "shadow model build failed: {m}"),
            Error::OutOfRange(v) => write!(f, "value {v} outside [0, 1]"),
            Error::Stage { stage, source } => write!(f, "{stage}: {source}"),
        }
    }
}

impl core::error::Error for Error {
    fn source(&self) -> Option<&(dyn core::error::Error + 'static)> {
        match self {
            Error::Stage { source, .. } => Some(&**source),
            _ => None,
        }
    }
}

pub type Result<T> = core::result::Result<T, Error>;
