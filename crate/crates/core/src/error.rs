use thiserror::Error;

/// Failures while building spaces, forms and Green operators.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum FormError {
    #[error("state space is empty")]
    EmptySpace,
    #[error("only dimensions 1 and 2 are supported, got {0}")]
    UnsupportedDimension(usize),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("axis {axis}: extent {extent} is not an integer multiple of h = {h}")]
    ExtentNotMultiple { axis: usize, extent: f64, h: f64 },
    #[error("cell measure at node {node} is not positive")]
    NonPositiveCell { node: usize },
    #[error("node {node} out of range for a space of {len} nodes")]
    NodeOutOfRange { node: usize, len: usize },
    #[error("node {0} listed twice")]
    DuplicateNode(usize),
    #[error("kernel coefficient is not symmetric at nodes ({0}, {1})")]
    KernelNotSymmetric(usize, usize),
    #[error("coefficient {value} at nodes ({i}, {j}) lies outside the declared bounds [{lower}, {upper}]")]
    CoefficientOutOfBounds { i: usize, j: usize, value: f64, lower: f64, upper: f64 },
    #[error("diffusion tensor is not symmetric positive definite at {0:?}")]
    NotElliptic(Vec<f64>),
    #[error("cross-diffusion terms are not supported by the two-point flux scheme")]
    CrossDiffusionUnsupported,
    #[error("stability index {0} must lie in (0, 1)")]
    AlphaOutOfRange(f64),
    #[error("scale function: {0}")]
    InvalidScale(String),
    #[error("a killing region was requested but the space has none")]
    MissingExterior,
    #[error("matrix shape {rows}x{cols} does not match a space of {len} nodes")]
    ShapeMismatch { rows: usize, cols: usize, len: usize },
    #[error("form matrix is not symmetric: |B[{i}][{j}] - B[{j}][{i}]| = {gap:e}")]
    NotSymmetric { i: usize, j: usize, gap: f64 },
    #[error("form is not Markovian: {0}")]
    NotMarkovian(String),
    #[error("form is not transient (matrix is singular or not positive definite)")]
    NotTransient,
    #[error("form is ill-conditioned: estimated condition number {0:e}")]
    IllConditioned(f64),
    #[error("Green operator has a negative entry {value:e} at ({i}, {j})")]
    NegativeGreen { i: usize, j: usize, value: f64 },
    #[error("resolvent parameter must be nonnegative, got {0}")]
    NegativeResolvent(f64),
    #[error("perturbing measure must be nonnegative (node {0})")]
    NegativePerturbation(usize),
    #[error("weight function: {0}")]
    InvalidWeight(String),
    #[error("weight is not excessive: (B rho) at node {node} equals {value:e}")]
    NotExcessive { node: usize, value: f64 },
    #[error("eigen-solver did not converge")]
    EigenFailure,
}

/// Failures in the measure algebra.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeasureError {
    #[error("measures live on different state spaces")]
    SpaceMismatch,
    #[error("node {node} out of range for a space of {len} nodes")]
    NodeOutOfRange { node: usize, len: usize },
    #[error("weight has {got} entries, expected {expected}")]
    WeightLength { got: usize, expected: usize },
    #[error("weight is not strictly positive at node {0}")]
    NonPositiveWeight(usize),
    #[error("non-finite value at node {0}")]
    NonFinite(usize),
    #[error("malformed measure literal: {0}")]
    Parse(String),
}

/// Failures in capacity computations.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum CapacityError {
    #[error("capacity set is empty")]
    EmptySet,
    #[error("node {node} out of range for a space of {len} nodes")]
    NodeOutOfRange { node: usize, len: usize },
    #[error("the form is not transient on the complement of the set")]
    NotTransient,
    #[error("at least three refinement levels are required, got {0}")]
    TooFewLevels(usize),
    #[error("projected gradient did not converge: KKT residual {0:e}")]
    NoConvergence(f64),
    #[error(transparent)]
    Form(#[from] FormError),
}

/// Failures in nonlinearity construction.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum NonlinearityError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("one-sided Lipschitz bound is unavailable on [{lower}, {upper}]")]
    LipschitzUnavailable { lower: f64, upper: f64 },
    #[error("per-node data has {got} entries, expected {expected}")]
    NodeCount { got: usize, expected: usize },
    #[error("tabulated table needs at least two strictly increasing abscissae")]
    BadTable,
    #[error("asymptotic equivalence fails at node {node}, y = {y}: |g|/|f| = {ratio} not in [{lower}, {upper}]")]
    NotEquivalent { node: usize, y: f64, ratio: f64, lower: f64, upper: f64 },
}

/// Failures in solvers and reductions.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolveError {
    #[error("bracket violated at node {node}: lower {lower} > upper {upper}")]
    BracketViolation { node: usize, lower: f64, upper: f64 },
    #[error("lower bound is not a subsolution: residual measure {value:e} at node {node}")]
    NotSubsolution { node: usize, value: f64 },
    #[error("upper bound is not a supersolution: residual measure {value:e} at node {node}")]
    NotSupersolution { node: usize, value: f64 },
    #[error("iteration did not converge after {iterations} steps (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("invariant violated: {0}")]
    InvariantViolation(String),
    #[error("nonlinearity is not defined on the bracket: {0}")]
    Nonlinearity(#[from] NonlinearityError),
    #[error("vector has {got} entries, expected {expected}")]
    Length { got: usize, expected: usize },
    #[error("invalid option: {0}")]
    InvalidOption(String),
    #[error("measure precondition failed: {0}")]
    Precondition(String),
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error(transparent)]
    Form(#[from] FormError),
}
