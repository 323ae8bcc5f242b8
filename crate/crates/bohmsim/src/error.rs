use thiserror::Error;

/// Errors produced by the simulator library.
#[derive(Debug, Error)]
pub enum BsimError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("wave function has zero or non-finite norm")]
    ZeroNorm,
    #[error("grids do not match")]
    GridMismatch,
    #[error("axis subset is empty")]
    EmptyAxisSet,
    #[error("particle groups have inconsistent dimensions")]
    InconsistentParticleDims,
    #[error("propagation method incompatible with grid: {0}")]
    MethodGridMismatch(String),
    #[error("snapshot spacing is nonuniform at index {0}")]
    SnapshotGap(usize),
    #[error("conditional slice has null norm at the given environment point")]
    NullSlice,
    #[error("axis groups overlap or do not tile the target grid: {0}")]
    AxisOverlap(String),
    #[error("density is not normalized")]
    NotNormalized,
    #[error("sample point lies outside the binning domain")]
    OutOfDomain,
    #[error("empirical and theoretical densities use different binnings")]
    BinningMismatch,
    #[error("test spec is invalid: {0}")]
    InvalidTestSpec(String),
    #[error("pointer branch supports overlap beyond threshold (residual mass {0:.3e})")]
    BranchOverlap(f64),
    #[error("no effective wave function at the given environment point")]
    NotEffective,
    #[error("state preparation failed: conditional wave function fidelity {0:.6} below threshold")]
    PreparationFailed(f64),
    #[error("fewer complete runs than required: got {got}, need {need}")]
    InsufficientRuns { got: usize, need: usize },
    #[error("selection predicate matched no ensemble members")]
    EmptySelection,
    #[error("serialization error: {0}")]
    Serialization(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, BsimError>;
