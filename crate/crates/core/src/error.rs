use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },

    #[error("{what} is not Hermitian (defect {defect:.3e})")]
    NotHermitian { what: &'static str, defect: f64 },

    #[error("state trace {trace} deviates from 1 beyond tolerance")]
    TraceDeviation { trace: f64 },

    #[error("state has a negative eigenvalue {min_eigenvalue:.3e}")]
    NotPositive { min_eigenvalue: f64 },

    #[error("state vector norm {norm} deviates from 1 beyond tolerance")]
    NotNormalized { norm: f64 },

    #[error("non-finite entry encountered in {0}")]
    NonFinite(&'static str),

    #[error("channel rate {0} is negative")]
    NegativeRate(f64),

    #[error("efficiency out of [0,1]: {0}")]
    EfficiencyOutOfRange(f64),

    #[error("unphysical bath: |M|^2 = {m_abs_sq} exceeds N(N+1) = {bound}")]
    UnphysicalBath { m_abs_sq: f64, bound: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("model has no monitored channel")]
    NoMonitoredChannel,

    #[error("jump requested from a dark state (<c^dag c> = {0:.3e})")]
    DarkStateJump(f64),

    #[error("time step too large: click probability {0:.3} per step")]
    StepTooLarge(f64),

    #[error("step {step} rejected: trace drift {drift:.3e} exceeds tolerance")]
    StepRejected { step: usize, drift: f64 },

    #[error("superoperator of dimension {dim} exceeds the dense limit {limit}")]
    TooLarge { dim: usize, limit: usize },

    #[error("matrix is not Hurwitz (max real eigenvalue part {max_real:.3e})")]
    NotHurwitz { max_real: f64 },

    #[error("{what} did not converge within {iterations} iterations (residual {residual:.3e})")]
    NonConvergent {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("singular linear system in {0}")]
    Singular(&'static str),

    #[error("feedback cannot reach phase-space direction {direction} (residual {residual:.3e})")]
    UnreachableDirection { direction: String, residual: f64 },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("physicality violation in trajectory {trajectory} at step {step}: min eigenvalue {min_eigenvalue:.3e}")]
    Physicality {
        trajectory: usize,
        step: usize,
        min_eigenvalue: f64,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
