use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("vector norm {norm:e} is at or below the zero-norm threshold")]
    ZeroNorm { norm: f64 },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    #[error("momentum {0} is outside [0, 1]")]
    BadMomentum(f64),

    #[error("invalid queue: {0}")]
    InvalidQueue(String),

    #[error("push of {batch} keys does not evenly divide queue capacity {capacity}")]
    BatchTooLarge { batch: usize, capacity: usize },

    #[error("key {index} has norm {norm}, expected unit norm")]
    NormViolation { index: usize, norm: f64 },

    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("label {label} outside [0, {classes})")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("class has no samples")]
    EmptyClass,

    #[error("prototype bank is empty")]
    EmptyBank,

    #[error("bank lacks fine-grained prototype (session {session}, class {class}, transform {transform})")]
    MissingFineGrained {
        session: u32,
        class: u32,
        transform: u32,
    },

    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}: ce={ce} ssc={ssc} moti={moti}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        ce: f64,
        ssc: f64,
        moti: f64,
    },

    #[error("session order violation: expected session {expected}, got {got}")]
    SessionOrderViolation { expected: u32, got: u32 },

    #[error("could not place {classes} class means with min separation {min_angle_deg} deg after {attempts} attempts")]
    SeparationUnsatisfiable {
        classes: usize,
        min_angle_deg: f64,
        attempts: usize,
    },

    #[error("bank has no prototype for class {class} present in the test split")]
    CoverageGap { class: u32 },

    #[error("nothing to aggregate")]
    Empty,

    #[error("decode error: {0}")]
    Decode(String),

    #[error("config parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
