//! Multi-study balancing weights for generalized treatment comparisons.
//!
//! The pipeline fits a multinomial propensity model over study-group cells
//! ([`mps`]), turns it into balancing weights for a target pseudo-population
//! ([`weights`], [`flexor`]), estimates group functionals ([`estimation`])
//! and quantifies their uncertainty ([`uncertainty`]). [`simulation`]
//! reproduces the synthetic benchmark study.

pub mod data;
pub mod error;
pub mod estimation;
pub mod flexor;
pub mod mps;
pub mod pipeline;
pub mod simulation;
pub mod uncertainty;
pub mod weights;

pub use data::{cell_table, load_dataset, CellTable, Dataset, Schema};
pub use error::{
    DataError, Error, EstimationError, FlexorError, MpsError, Result, SimulationError, UncertaintyError,
    WeightError,
};
pub use mps::{fit_mps, fit_mps_warm, predict_mps, MpsModel, MpsOptions, MpsProbabilities};
pub use weights::{
    balance_diagnostics, compute_weights, effective_sample_size, evaluate_tilt, BalanceDiagnostics, Ess,
    PseudoPopulationSpec, Tilt, WeightSet, DEFAULT_PROBABILITY_FLOOR,
};
pub use flexor::{
    maximize_over_constraints, optimize_flexor, optimize_gamma_theta, ConstraintSet, FlexorOptions, FlexorResult,
    SimplexMode,
};
pub use estimation::{
    apply_functional, evaluate, group_contrast, weighted_cdf, weighted_feature_mean, weighted_median, EstimateValue,
    FeatureSpec, Functional, GroupMoments, Transform,
};
pub use pipeline::{run_pipeline, AnalysisPlan, Estimand, MethodResult, MethodSpec, PipelineResult};
pub use uncertainty::{
    asymptotic_interval, bootstrap, delta_method, estimand_tau2, known_mps_variance, sigma1_plugin, sigma2_sandwich,
    simultaneous_ci, BootstrapOptions, BootstrapResult, IntervalMethod, IntervalReport, SandwichContext,
    VarianceEstimate, VarianceMethod,
};
pub use simulation::{
    format_tables, generate_replicate, run_study, ScenarioConfig, Similarity, SimulationPool, SimulationReport,
};
