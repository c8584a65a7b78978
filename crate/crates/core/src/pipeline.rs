//! End-to-end analysis: fit the MPS, build each method's weights and evaluate
//! every estimand. Bootstrap replicates rerun the same plan.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Result, WeightError};
use crate::estimation::{evaluate, feature_matrix, moments_from_features, EstimateValue, FeatureSpec, GroupMoments};
use crate::flexor::{optimize_flexor, ConstraintSet, FlexorOptions, FlexorResult, SimplexMode, DEFAULT_SIMPLEX_FLOOR};
use crate::mps::{fit_mps_warm, predict_mps, MpsModel, MpsOptions, MpsProbabilities};
use crate::weights::{compute_weights, PseudoPopulationSpec, Tilt, WeightSet, DEFAULT_PROBABILITY_FLOOR};

/// One weighting method. For FLEXOR, a given `gamma` or `theta` is held
/// fixed and an absent one is optimized; for other tilts an absent vector
/// defaults to uniform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub name: String,
    pub tilt: Tilt,
    #[serde(default)]
    pub gamma: Option<Vec<f64>>,
    #[serde(default)]
    pub theta: Option<Vec<f64>>,
}

impl MethodSpec {
    pub fn new(name: &str, tilt: Tilt) -> Self {
        MethodSpec {
            name: name.to_string(),
            tilt,
            gamma: None,
            theta: None,
        }
    }

    pub fn with_theta(mut self, theta: Vec<f64>) -> Self {
        self.theta = Some(theta);
        self
    }

    pub fn with_gamma(mut self, gamma: Vec<f64>) -> Self {
        self.gamma = Some(gamma);
        self
    }

    pub fn constraints(&self, simplex_floor: f64) -> ConstraintSet {
        let mode = |v: &Option<Vec<f64>>| match v {
            Some(v) => SimplexMode::Fixed(v.clone()),
            None => SimplexMode::Free,
        };
        ConstraintSet::new(mode(&self.gamma), mode(&self.theta), simplex_floor)
    }

    /// Spec for non-optimized tilts.
    pub fn fixed_spec(&self, n_studies: usize, n_groups: usize) -> Result<PseudoPopulationSpec, WeightError> {
        let gamma = self.gamma.clone().unwrap_or(vec![1.0 / n_studies as f64; n_studies]);
        let theta = self.theta.clone().unwrap_or(vec![1.0 / n_groups as f64; n_groups]);
        if gamma.len() != n_studies || theta.len() != n_groups {
            return Err(WeightError::Dimension(format!("method `{}` has wrong gamma/theta length", self.name)));
        }
        PseudoPopulationSpec::new(self.tilt, gamma, theta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimand {
    pub name: String,
    #[serde(flatten)]
    pub feature: FeatureSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalysisPlan {
    pub mps: MpsOptions,
    pub methods: Vec<MethodSpec>,
    pub estimands: Vec<Estimand>,
    pub probability_floor: f64,
    pub simplex_floor: f64,
    pub flexor: FlexorOptions,
}

impl Default for AnalysisPlan {
    fn default() -> Self {
        AnalysisPlan {
            mps: MpsOptions::default(),
            methods: vec![
                MethodSpec::new("FLEXOR", Tilt::Flexor),
                MethodSpec::new("IC", Tilt::Ic),
                MethodSpec::new("IGO", Tilt::Igo),
            ],
            estimands: Vec::new(),
            probability_floor: DEFAULT_PROBABILITY_FLOOR,
            simplex_floor: DEFAULT_SIMPLEX_FLOOR,
            flexor: FlexorOptions::default(),
        }
    }
}

impl AnalysisPlan {
    pub fn validate(&self, d: &Dataset) -> Result<()> {
        for e in &self.estimands {
            e.feature.validate(d.n_outcomes(), d.n_groups())?;
        }
        for m in &self.methods {
            if m.tilt == Tilt::Flexor {
                m.constraints(self.simplex_floor).validate(d.n_studies(), d.n_groups())?;
            } else {
                m.fixed_spec(d.n_studies(), d.n_groups())?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct MethodResult {
    pub name: String,
    pub weights: WeightSet,
    pub flexor: Option<FlexorResult>,
    pub moments: Vec<GroupMoments>,
    pub estimates: Vec<EstimateValue>,
}

#[derive(Debug, Clone)]
pub struct PipelineResult {
    pub model: MpsModel,
    pub probs: MpsProbabilities,
    pub methods: Vec<MethodResult>,
}

impl PipelineResult {
    /// Pseudo-population specs actually used, in method order.
    pub fn specs(&self) -> Vec<PseudoPopulationSpec> {
        self.methods.iter().map(|m| m.weights.spec.clone()).collect()
    }
}

/// Weights for every method given fitted probabilities. With `fixed`, each
/// method uses the given spec instead of its own (no FLEXOR optimization).
pub fn method_weights(
    probs: &MpsProbabilities,
    d: &Dataset,
    plan: &AnalysisPlan,
    fixed: Option<&[PseudoPopulationSpec]>,
) -> Result<Vec<(WeightSet, Option<FlexorResult>)>> {
    plan.methods
        .iter()
        .enumerate()
        .map(|(idx, m)| {
            if let Some(specs) = fixed {
                return Ok((compute_weights(&specs[idx], probs, d, plan.probability_floor)?, None));
            }
            if m.tilt == Tilt::Flexor {
                let opts = FlexorOptions {
                    probability_floor: plan.probability_floor,
                    ..plan.flexor
                };
                let r = optimize_flexor(probs, d, &m.constraints(plan.simplex_floor), &opts)?;
                Ok((r.weights.clone(), Some(r)))
            } else {
                let spec = m.fixed_spec(d.n_studies(), d.n_groups())?;
                Ok((compute_weights(&spec, probs, d, plan.probability_floor)?, None))
            }
        })
        .collect()
}

/// Runs the full plan. `warm` seeds the MPS fit; `fixed` pins each method's
/// pseudo-population (see [`method_weights`]).
pub fn run_pipeline(
    d: &Dataset,
    plan: &AnalysisPlan,
    warm: Option<&MpsModel>,
    fixed: Option<&[PseudoPopulationSpec]>,
) -> Result<PipelineResult> {
    plan.validate(d)?;
    let model = fit_mps_warm(d, &plan.mps, warm)?;
    let probs = predict_mps(&model, d)?;
    let features: Vec<_> = plan.estimands.iter().map(|e| feature_matrix(d, &e.feature.transforms)).collect();
    let methods = method_weights(&probs, d, plan, fixed)?
        .into_iter()
        .zip(&plan.methods)
        .map(|((weights, flexor), m)| {
            let moments = features
                .iter()
                .map(|f| moments_from_features(&weights.rho_tilde, d.group(), d.n_groups(), f))
                .collect::<Result<Vec<_>, _>>()?;
            let estimates = moments
                .iter()
                .zip(&plan.estimands)
                .map(|(g, e)| evaluate(g, &e.feature))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(MethodResult {
                name: m.name.clone(),
                weights,
                flexor,
                moments,
                estimates,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PipelineResult { model, probs, methods })
}
