use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("truncation discards probability {0:e} (limit 1e-8)")]
    TailTooHeavy(f64),
    #[error("invalid state spec: {0}")]
    InvalidSpec(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("phase-space series diverges for s = {0}")]
    SeriesDiverges(f64),
    #[error("deconvolution refused: target ordering {target} exceeds input ordering {input}")]
    DeconvolutionRefused { input: f64, target: f64 },
    #[error("two-mode truncation overflow: input occupies the top Fock layer")]
    TruncationOverflow,
    #[error("grid too narrow for index {n}: needs |x| up to {needed:.3}, has {have:.3}")]
    GridTooNarrow { n: usize, needed: f64, have: f64 },
    #[error("efficiency {0} out of range (requires eta > 0.5)")]
    EtaOutOfRange(f64),
    #[error("kernel sum not converged: tail {0:e}")]
    NotConverged(f64),
    #[error("phase {0} has no samples")]
    EmptyPhase(usize),
    #[error("unstable request: s = {s} exceeds 1 - 1/eta = {limit}")]
    UnstableRequest { s: f64, limit: f64 },
    #[error("insufficient phase coverage: {0}")]
    InsufficientPhaseCoverage(String),
    #[error("phase deficit: {got} phases given, {required} required")]
    PhaseDeficit { got: usize, required: usize },
    #[error("z range too short: |Psi| = {0:e} at the last point")]
    ZRangeTooShort(f64),
    #[error("ill-conditioned block s = {s} (condition {cond:e})")]
    IllConditioned { s: usize, cond: f64 },
    #[error("kernel truncation {n_sum} below state support {support}")]
    KernelTruncationTooLow { n_sum: usize, support: usize },
    #[error("degenerate frequencies at indices {0:?}")]
    DegenerateFrequencies(Vec<usize>),
    #[error("normal matrix near singular (condition {0:e})")]
    NearSingular(f64),
    #[error("all modes cut (largest eigenvalue {0:e})")]
    AllModesCut(f64),
    #[error("solver diverged after {iterations} iterations (last gradient norm {grad_norm:e})")]
    SolverDiverged { iterations: usize, grad_norm: f64 },
    #[error("io: {0}")]
    Io(String),
    #[error("format: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}
