use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("face {face} is degenerate (area {area:e})")]
    DegenerateFace { face: usize, area: f64 },
    #[error("polar gradient is near-singular at this point")]
    NearSingular,
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),
    #[error("invalid part mask: {0}")]
    InvalidPartMask(String),
    #[error("pruning would remove every splat")]
    EmptySet,
    #[error("perpendicular bisectors are parallel (|sin| = {0:e})")]
    ParallelBisectors(f64),
    #[error("reflection axis has zero length")]
    DegenerateAxis,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("backward called without a cached forward pass")]
    NoForwardCache,
    #[error("face {0} has no face-set assignment")]
    UnassignedFace(usize),
    #[error("image shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("part {0} has no faces")]
    EmptyPart(usize),
    #[error("threshold assignment needs at least 2 non-mouth parts, got {0}")]
    TooFewParts(usize),
    #[error("adaptive pre-allocation already ran at step {0}")]
    AlreadyRan(u64),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("gradient check sampled inside an exclusion zone: {0}")]
    SampledAtKink(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
