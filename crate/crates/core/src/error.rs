use std::path::PathBuf;

/// Every fallible operation in the crate reports one of these.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("schedule singularity: alpha_bar {alpha_bar:e} is below the floor {floor:e}")]
    ScheduleSingularity { alpha_bar: f64, floor: f64 },
    #[error("oracle produced non-finite values")]
    NonFiniteOracle,
    #[error("flow endpoint singularity: epsilon-to-velocity conversion at t = 1")]
    FlowEndpointSingularity,
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("incompatible oracle and schedule: {0}")]
    Incompatible(String),
    #[error("shape mismatch in {context}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("length mismatch in {context}: {left} vs {right}")]
    LengthMismatch {
        context: &'static str,
        left: usize,
        right: usize,
    },
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("non-finite intermediate at step {step}: {what}")]
    NonFiniteAtStep { step: usize, what: &'static str },
    #[error("invalid renoise weight {0} (must lie in [0, 1])")]
    InvalidRenoiseWeight(f64),
    #[error("empty valid region")]
    EmptyValidRegion,
    #[error("degenerate viewpoint: {0}")]
    DegenerateViewpoint(String),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),
    #[error("alignment underdetermined: {0}")]
    AlignmentUnderdetermined(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
