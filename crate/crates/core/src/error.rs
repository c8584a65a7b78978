use thiserror::Error;

/// Errors raised while building or validating a [`Dataset`](crate::data::Dataset).
#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("config error: {0}")]
    Config(String),
    #[error("schema error: column `{0}` not found in header")]
    MissingColumn(String),
    #[error("parse error at row {row}, column `{column}`: cannot read `{value}` as a number")]
    Parse {
        row: usize,
        column: String,
        value: String,
    },
    #[error("missing value at row {row}, column `{column}`")]
    MissingValue { row: usize, column: String },
    #[error("label error at row {row}, column `{column}`: `{value}` is not a positive integer label")]
    Label {
        row: usize,
        column: String,
        value: String,
    },
    #[error("positivity violated: study-group cell ({study},{group}) has no subjects")]
    Positivity { study: usize, group: usize },
    #[error("covariate `{0}` is constant and cannot be standardized")]
    ConstantCovariate(String),
    #[error("dataset has no subjects")]
    Empty,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

#[derive(Debug, Error)]
pub enum MpsError {
    #[error("Newton iterations did not converge after {iterations} steps (gradient norm {gradient_norm:.3e}); try a larger max_iter or ridge > 0")]
    NonConvergence {
        iterations: usize,
        gradient_norm: f64,
    },
    #[error("(quasi-)separation detected: {0}; refit with ridge > 0 (e.g. 1e-6)")]
    Separation(String),
    #[error("numerically singular Hessian even with ridge {0}")]
    Singular(f64),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid option: {0}")]
    InvalidOption(String),
}

#[derive(Debug, Error)]
pub enum WeightError {
    #[error("invalid pseudo-population: {0}")]
    InvalidSpec(String),
    #[error("non-finite tilt value at subject {0}")]
    NonFiniteTilt(usize),
    #[error("non-finite or non-positive weight at subject {0}")]
    InvalidWeight(usize),
    #[error("empty weight list")]
    Empty,
    #[error("group {0} has zero total weight")]
    DegenerateGroup(usize),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

#[derive(Debug, Error)]
pub enum FlexorError {
    #[error("infeasible constraint set: {0}")]
    Infeasible(String),
    #[error("objective is not finite at the initial point")]
    NonFiniteObjective,
    #[error("no restart converged within {max_outer} outer iterations (best ESS {best_ess:.4})")]
    NonConvergence {
        max_outer: usize,
        best_ess: f64,
        best_trajectory: Vec<f64>,
    },
    #[error(transparent)]
    Weights(#[from] WeightError),
}

#[derive(Debug, Error)]
pub enum EstimationError {
    #[error("invalid feature specification: {0}")]
    InvalidFeature(String),
    #[error("group {0} has zero weighted mass")]
    DegenerateGroup(usize),
    #[error("degenerate variance: standard deviation below 1e-12 for correlation")]
    DegenerateVariance,
    #[error("ratio undefined: zero denominator")]
    RatioUndefined,
    #[error("grid must be sorted ascending and non-empty")]
    InvalidGrid,
}

#[derive(Debug, Error)]
pub enum UncertaintyError {
    #[error("sandwich bread matrix is singular; use bootstrap intervals instead")]
    SingularSandwich,
    #[error("functional gradient is zero at the estimate; report a bootstrap interval instead")]
    DegenerateGradient,
    #[error("invalid confidence level {0}; must lie in (0,1)")]
    InvalidLevel(f64),
    #[error("bootstrap needs at least 2 replicates, got {0}")]
    TooFewReplicates(usize),
    #[error("bootstrap unstable: {failed} of {attempted} replicates failed")]
    BootstrapUnstable { failed: usize, attempted: usize },
    #[error(transparent)]
    Estimation(#[from] EstimationError),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

#[derive(Debug, Error)]
pub enum SimulationError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("k-means failed: {0}")]
    KMeans(String),
    #[error("could not bracket the group intercept root")]
    RootBracket,
    #[error("replicate {replicate} failed: {source}")]
    Replicate {
        replicate: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("{failed} of {total} replicates failed; study aborted")]
    TooManyFailures { failed: usize, total: usize },
}

/// Crate-wide error; the `Display` output names the module that failed.
#[derive(Debug, Error)]
pub enum Error {
    #[error("data: {0}")]
    Data(#[from] DataError),
    #[error("mps: {0}")]
    Mps(#[from] MpsError),
    #[error("weights: {0}")]
    Weights(#[from] WeightError),
    #[error("flexor: {0}")]
    Flexor(#[from] FlexorError),
    #[error("estimation: {0}")]
    Estimation(#[from] EstimationError),
    #[error("uncertainty: {0}")]
    Uncertainty(#[from] UncertaintyError),
    #[error("simulation: {0}")]
    Simulation(#[from] SimulationError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
