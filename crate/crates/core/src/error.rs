use thiserror::Error;

/// Errors surfaced by the lattice model, the solvers and the checks.
#[derive(Debug, Error)]
pub enum GevalError {
    #[error("invalid lattice spec: {0}")]
    InvalidSpec(String),
    #[error("capacity exceeded: {nodes} leaves over cap 2^{cap}")]
    CapacityExceeded { nodes: u128, cap: u32 },
    #[error("time order violated: s={s} > t={t}")]
    TimeOrder { s: usize, t: usize },
    #[error("lattice mismatch: {0}")]
    LatticeMismatch(String),
    #[error("candidate is not a stopping time")]
    NotAStoppingTime,
    #[error("stopping order violated: sigma > tau on some path")]
    StoppingOrder,
    #[error("random variable is not measurable at its declared time")]
    NotMeasurable,
    #[error("implicit step unsolvable: mu*dt = {0} >= 1")]
    StepTooLarge(f64),
    #[error("monotonicity guard tripped: mu*sqrt(dt) = {0} > 0.5")]
    MonotonicityViolated(f64),
    #[error("iteration failed to converge: {0}")]
    NoConvergence(String),
    #[error("unknown builtin driver: {0}")]
    UnknownBuiltin(String),
    #[error("bad driver parameters: {0}")]
    BadParams(String),
    #[error("degenerate sample grid: all pairs coincide")]
    DegenerateGrid,
    #[error("segments do not partition the grid: {0}")]
    BadPartition(String),
    #[error("process is not a supermartingale (worst defect {0})")]
    NotSupermartingale(f64),
    #[error("root bracket failure at step {k}, node {node}")]
    RootBracketFailure { k: usize, node: usize },
    #[error("levels invalid: a={a} >= b={b}")]
    BadLevels { a: f64, b: f64 },
    #[error("evaluation failed axiom checks: {0}")]
    AxiomsFailed(String),
    #[error("representation extraction inconsistent: {0}")]
    ExtractInconsistent(String),
    #[error("operation unsupported on this lattice topology: {0}")]
    Unsupported(String),
}

pub type Result<T> = std::result::Result<T, GevalError>;
