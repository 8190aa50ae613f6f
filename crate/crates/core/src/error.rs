use thiserror::Error;

/// Errors shared across the crate.
#[derive(Debug, Error)]
pub enum CmError {
    #[error("expression parse error: {0}")]
    ExprParse(String),

    #[error("placement failure: {attempts} consecutive rejections while placing inclusion {placed} of {requested}")]
    PlacementFailure {
        attempts: u64,
        placed: usize,
        requested: usize,
    },

    #[error("conductivity bound violation: a({x:?}) = {value} outside [{lo}, {hi}]")]
    ConductivityBound {
        x: [f64; 3],
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("degenerate grid: axis {axis} has {nodes} nodes (need >= 3)")]
    DegenerateGrid { axis: usize, nodes: usize },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("empty region: {0}")]
    EmptyRegion(String),

    #[error("empty ensemble: empirical density model received no configurations")]
    EmptyEnsemble,

    #[error("sphere outside domain: center {center:?}, radius {radius}")]
    SphereOutsideDomain { center: [f64; 3], radius: f64 },

    #[error("under-resolved inclusion: epsilon {epsilon} < 4h = {min}")]
    UnderResolvedInclusion { epsilon: f64, min: f64 },

    #[error("under-resolved gap: gap {gap} < 4h = {min}")]
    UnderResolvedGap { gap: f64, min: f64 },

    #[error("no convergence after {iterations} iterations (relative residual {residual:.3e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("singular evaluation: {0}")]
    SingularEvaluation(String),

    #[error("coincident points in Green's function evaluation")]
    CoincidentPoints,

    #[error("unsupported domain: {0}")]
    UnsupportedDomain(String),

    #[error("invalid configuration: {0}")]
    InvalidConfiguration(String),

    #[error("insufficient levels: need {need}, got {got}")]
    InsufficientLevels { need: usize, got: usize },

    #[error("pair budget exceeded: {pairs} pair solves > cap {cap}")]
    PairBudgetExceeded { pairs: usize, cap: usize },

    #[error("reflection iteration diverged after {sweeps} sweeps (increment {increment:.3e})")]
    ReflectionDiverged { sweeps: usize, increment: f64 },

    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, CmError>;
