//! Sampling variability of the weighted estimators.
//!
//! * Known MPS: plug-in covariance of the group moment vector.
//! * Estimated MPS: sandwich covariance from stacking the multinomial-logit
//!   score equations with the weighted moment equations.
//! * Delta method for smooth functionals, Scheffé-type simultaneous bands
//!   and stratified percentile bootstrap intervals.
//!
//! Covariances are on the `sqrt(N)` scale: `Var(estimate) ~ Sigma / N`.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::data::Dataset;
use crate::error::{EstimationError, Result, UncertaintyError};
use crate::estimation::{contrast_gradient, functional_gradient, moments_from_features, FeatureSpec, GroupMoments};
use crate::mps::{probabilities_from_design, MpsModel, MpsObjective};
use crate::pipeline::{run_pipeline, AnalysisPlan, PipelineResult};
use crate::weights::{subject_weight, PseudoPopulationSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceMethod {
    KnownMps,
    EstimatedMps,
    Bootstrap,
}

/// Joint covariance of all group moment vectors, stacked group-major
/// (index `z * M + m`).
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceEstimate {
    pub joint: DMatrix<f64>,
    pub n_groups: usize,
    pub n_moments: usize,
    pub n_subjects: usize,
    pub method: VarianceMethod,
}

impl VarianceEstimate {
    /// `M x M` covariance block of group `z` (0-based).
    pub fn group(&self, z: usize) -> DMatrix<f64> {
        let m = self.n_moments;
        self.joint.view((z * m, z * m), (m, m)).into_owned()
    }
}

fn check_level(level: f64) -> Result<(), UncertaintyError> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(UncertaintyError::InvalidLevel(level))
    }
}

/// Normalized weights `rho_tilde / mean(rho_tilde)` and the weighted group shares.
fn normalize(weights: &[f64], groups: &[usize], n_groups: usize) -> Result<(Vec<f64>, Vec<f64>), UncertaintyError> {
    let n = weights.len() as f64;
    let mean = weights.iter().sum::<f64>() / n;
    let rho: Vec<f64> = weights.iter().map(|w| w / mean).collect();
    let mut share = vec![0.0; n_groups];
    for (r, &z) in rho.iter().zip(groups) {
        share[z] += r / n;
    }
    if let Some(z) = share.iter().position(|&s| !(s > 0.0)) {
        return Err(EstimationError::DegenerateGroup(z + 1).into());
    }
    Ok((rho, share))
}

/// Centered, share-scaled moment contributions `rho_i (Phi_i - lambda_z) / theta_z`
/// placed in the block of the subject's group (`n x K*M`).
fn moment_influence(
    rho: &[f64],
    share: &[f64],
    groups: &[usize],
    features: &DMatrix<f64>,
    g: &GroupMoments,
) -> DMatrix<f64> {
    let m = features.ncols();
    let k = share.len();
    let mut out = DMatrix::zeros(rho.len(), k * m);
    for (i, &z) in groups.iter().enumerate() {
        for j in 0..m {
            out[(i, z * m + j)] = rho[i] * (features[(i, j)] - g.lambda_hat[(z, j)]) / share[z];
        }
    }
    out
}

fn from_influence(inf: &DMatrix<f64>, k: usize, m: usize, method: VarianceMethod) -> VarianceEstimate {
    let n = inf.nrows();
    let mut joint = inf.tr_mul(inf) / n as f64;
    // Exact symmetry.
    joint = (&joint + joint.transpose()) * 0.5;
    VarianceEstimate {
        joint,
        n_groups: k,
        n_moments: m,
        n_subjects: n,
        method,
    }
}

/// Plug-in covariance with the MPS treated as known, all groups at once.
/// Cross-group blocks are zero.
pub fn known_mps_variance(
    weights: &[f64],
    d: &Dataset,
    features: &DMatrix<f64>,
    g: &GroupMoments,
) -> Result<VarianceEstimate, UncertaintyError> {
    if weights.len() != d.n_subjects() || features.nrows() != d.n_subjects() {
        return Err(UncertaintyError::Dimension("weights or features do not match dataset".into()));
    }
    let (rho, share) = normalize(weights, d.group(), d.n_groups())?;
    let inf = moment_influence(&rho, &share, d.group(), features, g);
    Ok(from_influence(&inf, d.n_groups(), features.ncols(), VarianceMethod::KnownMps))
}

/// `Sigma_1` for group `z` (0-based): `(1/theta_z^2) mean(rho^2 1{Z=z} (Phi - lambda)(Phi - lambda)')`.
pub fn sigma1_plugin(
    weights: &[f64],
    d: &Dataset,
    features: &DMatrix<f64>,
    g: &GroupMoments,
    z: usize,
) -> Result<DMatrix<f64>, UncertaintyError> {
    Ok(known_mps_variance(weights, d, features, g)?.group(z))
}

/// Quantities of a fitted MPS shared by every method's sandwich.
pub struct SandwichContext<'a> {
    d: &'a Dataset,
    probs: DMatrix<f64>,
    design: DMatrix<f64>,
    scores: DMatrix<f64>,
    bread: Cholesky<f64, nalgebra::Dyn>,
}

impl<'a> SandwichContext<'a> {
    pub fn new(model: &MpsModel, d: &'a Dataset) -> Result<Self, UncertaintyError> {
        if model.n_cells() != d.n_cells() || model.omega.ncols() != d.n_covariates() + 1 {
            return Err(UncertaintyError::Dimension("model does not match dataset".into()));
        }
        let n = d.n_subjects() as f64;
        let objective = MpsObjective::new(d, model.standardizer(), model.ridge);
        let params = model.scaled_omega();
        let probs = probabilities_from_design(objective.design(), params);
        let mut scores = objective.scores(params);
        let dim = params.ncols();
        if model.ridge > 0.0 {
            for c in 0..params.nrows() {
                for u in 1..dim {
                    let shift = model.ridge * params[(c, u)] / n;
                    for i in 0..d.n_subjects() {
                        scores[(i, c * dim + u)] -= shift;
                    }
                }
            }
        }
        let a_omega = objective.neg_hessian(&probs) / n;
        let bread = Cholesky::new(a_omega).ok_or(UncertaintyError::SingularSandwich)?;
        Ok(SandwichContext {
            d,
            probs,
            design: objective.design().clone(),
            scores,
            bread,
        })
    }

    /// Derivatives of each subject's weight with respect to the linear
    /// predictors of the non-reference cells (`n x (C-1)`).
    fn weight_derivatives(&self, spec: &PseudoPopulationSpec, floor: f64) -> DMatrix<f64> {
        let n = self.d.n_subjects();
        let cells = self.probs.ncols();
        let mut out = DMatrix::zeros(n, cells - 1);
        let mut row = vec![0.0; cells];
        let mut pert = vec![0.0; cells];
        for i in 0..n {
            for c in 0..cells {
                row[c] = self.probs[(i, c)];
            }
            let cell = self.d.cell(i);
            for c in 1..cells {
                let h = 1e-6;
                let mut eval = |step: f64| {
                    let scale = 1.0 - row[c] + row[c] * step.exp();
                    for t in 0..cells {
                        let v = if t == c { row[t] * step.exp() } else { row[t] } / scale;
                        pert[t] = v.max(floor);
                    }
                    subject_weight(spec, &pert, cell)
                };
                out[(i, c - 1)] = (eval(h) - eval(-h)) / (2.0 * h);
            }
        }
        out
    }

    /// Sandwich covariance of all group moments for the weights of `spec`,
    /// with `(gamma, theta)` held at their given values.
    pub fn variance(
        &self,
        spec: &PseudoPopulationSpec,
        floor: f64,
        features: &DMatrix<f64>,
    ) -> Result<(VarianceEstimate, GroupMoments), UncertaintyError> {
        let d = self.d;
        let n = d.n_subjects();
        if features.nrows() != n {
            return Err(UncertaintyError::Dimension("features do not match dataset".into()));
        }
        let cells = self.probs.ncols();
        let weights: Vec<f64> = (0..n)
            .map(|i| {
                let row: Vec<f64> = (0..cells).map(|c| self.probs[(i, c)].max(floor)).collect();
                subject_weight(spec, &row, d.cell(i))
            })
            .collect();
        let g = moments_from_features(&weights, d.group(), d.n_groups(), features)?;
        let (rho, share) = normalize(&weights, d.group(), d.n_groups())?;
        let scale = rho[0] / weights[0];
        let deriv = self.weight_derivatives(spec, floor) * scale;
        let (k, m) = (d.n_groups(), features.ncols());
        let dim = self.design.ncols();
        let q = (cells - 1) * dim;
        // Derivative of the mean share-scaled moment equations with respect to omega.
        let mut a_lw = DMatrix::zeros(k * m, q);
        for i in 0..n {
            let z = d.group()[i];
            for j in 0..m {
                let resid = (features[(i, j)] - g.lambda_hat[(z, j)]) / share[z];
                if resid == 0.0 {
                    continue;
                }
                for c in 0..cells - 1 {
                    let dc = deriv[(i, c)] * resid / n as f64;
                    for u in 0..dim {
                        a_lw[(z * m + j, c * dim + u)] += dc * self.design[(i, u)];
                    }
                }
            }
        }
        // Influence: moment term minus its projection on the MPS scores.
        let lt = self.bread.solve(&a_lw.transpose());
        let mut inf = moment_influence(&rho, &share, d.group(), features, &g);
        inf += &self.scores * lt;
        if inf.iter().any(|v| !v.is_finite()) {
            return Err(UncertaintyError::SingularSandwich);
        }
        Ok((from_influence(&inf, k, m, VarianceMethod::EstimatedMps), g))
    }
}

/// `Sigma_2` for group `z` (0-based) accounting for MPS estimation.
pub fn sigma2_sandwich(
    model: &MpsModel,
    spec: &PseudoPopulationSpec,
    d: &Dataset,
    features: &DMatrix<f64>,
    floor: f64,
    z: usize,
) -> Result<DMatrix<f64>, UncertaintyError> {
    let ctx = SandwichContext::new(model, d)?;
    Ok(ctx.variance(spec, floor, features)?.0.group(z))
}

/// `grad' Sigma grad`; a zero gradient is rejected.
pub fn delta_method(sigma: &DMatrix<f64>, grad: &DVector<f64>) -> Result<f64, UncertaintyError> {
    if sigma.nrows() != grad.len() || sigma.ncols() != grad.len() {
        return Err(UncertaintyError::Dimension("gradient and covariance sizes differ".into()));
    }
    if grad.iter().all(|&v| v == 0.0) {
        return Err(UncertaintyError::DegenerateGradient);
    }
    Ok((grad.transpose() * sigma * grad)[(0, 0)].max(0.0))
}

/// Delta-method variances `tau^2` of every value of an estimand: one per
/// group for per-group functionals, one for a contrast.
pub fn estimand_tau2(v: &VarianceEstimate, g: &GroupMoments, f: &FeatureSpec) -> Result<Vec<f64>, UncertaintyError> {
    if f.functional.is_contrast() {
        let grad = contrast_gradient(g, f)?;
        Ok(vec![delta_method(&v.joint, &grad)?])
    } else {
        (0..g.n_groups())
            .map(|z| delta_method(&v.group(z), &functional_gradient(g, f, z)?))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntervalMethod {
    Asymptotic,
    SimultaneousScheffe,
    BootstrapPercentile,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntervalReport {
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
    pub method: IntervalMethod,
    pub n_bootstrap: Option<usize>,
}

/// Normal-theory interval `point +- z * sqrt(tau2 / n)`.
pub fn asymptotic_interval(point: f64, tau2: f64, n: usize, level: f64) -> Result<IntervalReport, UncertaintyError> {
    check_level(level)?;
    let z = Normal::standard().inverse_cdf(0.5 + level / 2.0);
    let half = z * (tau2 / n as f64).sqrt();
    Ok(IntervalReport {
        point,
        lower: point - half,
        upper: point + half,
        level,
        method: IntervalMethod::Asymptotic,
        n_bootstrap: None,
    })
}

/// Upper-`alpha` quantile of the chi-square distribution with `k` degrees of freedom.
pub fn chi_square_quantile(k: usize, alpha: f64) -> f64 {
    ChiSquared::new(k as f64).expect("positive degrees of freedom").inverse_cdf(1.0 - alpha)
}

/// Interval for `sum_z a_z lambda_zm` valid simultaneously over all
/// coefficient vectors: half-width `sqrt(chi2_K(alpha) sum_z a_z^2 Sigma_mm^(z) / N)`.
pub fn simultaneous_ci(
    g: &GroupMoments,
    v: &VarianceEstimate,
    coeffs: &[f64],
    m: usize,
    level: f64,
) -> Result<IntervalReport, UncertaintyError> {
    check_level(level)?;
    let k = g.n_groups();
    if coeffs.len() != k || m >= g.lambda_hat.ncols() || v.n_groups != k {
        return Err(UncertaintyError::Dimension("coefficients or moment index out of range".into()));
    }
    let point: f64 = (0..k).map(|z| coeffs[z] * g.lambda_hat[(z, m)]).sum();
    let spread: f64 = (0..k).map(|z| coeffs[z].powi(2) * v.group(z)[(m, m)]).sum();
    let half = (chi_square_quantile(k, 1.0 - level) * spread / v.n_subjects as f64).sqrt();
    Ok(IntervalReport {
        point,
        lower: point - half,
        upper: point + half,
        level,
        method: IntervalMethod::SimultaneousScheffe,
        n_bootstrap: None,
    })
}

/// Sample quantile with linear interpolation between order statistics.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BootstrapOptions {
    pub n_boot: usize,
    pub seed: u64,
    pub level: f64,
    /// Re-run the FLEXOR optimization in every replicate.
    pub reoptimize_flexor: bool,
    /// Redraws allowed per replicate after a failed fit.
    pub max_retries: usize,
}

impl Default for BootstrapOptions {
    fn default() -> Self {
        BootstrapOptions {
            n_boot: 100,
            seed: 0,
            level: 0.95,
            reoptimize_flexor: true,
            max_retries: 5,
        }
    }
}

/// Replicate estimates indexed `[method][estimand][value][replicate]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapResult {
    pub samples: Vec<Vec<Vec<Vec<f64>>>>,
    pub n_failed_attempts: usize,
    pub n_attempts: usize,
    pub level: f64,
}

impl BootstrapResult {
    pub fn n_boot(&self) -> usize {
        self.samples
            .first()
            .and_then(|m| m.first())
            .and_then(|e| e.first())
            .map_or(0, |v| v.len())
    }

    /// Percentile interval around `point` for one value.
    pub fn interval(&self, method: usize, estimand: usize, value: usize, point: f64) -> IntervalReport {
        let mut s = self.samples[method][estimand][value].clone();
        s.sort_by(f64::total_cmp);
        let alpha = 1.0 - self.level;
        IntervalReport {
            point,
            lower: quantile_sorted(&s, alpha / 2.0),
            upper: quantile_sorted(&s, 1.0 - alpha / 2.0),
            level: self.level,
            method: IntervalMethod::BootstrapPercentile,
            n_bootstrap: Some(s.len()),
        }
    }

    /// Standard deviation of the replicate estimates.
    pub fn standard_error(&self, method: usize, estimand: usize, value: usize) -> f64 {
        let s = &self.samples[method][estimand][value];
        let mean = s.iter().sum::<f64>() / s.len() as f64;
        (s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (s.len() - 1) as f64).sqrt()
    }
}

/// Resampling draw for one attempt: subjects sampled with replacement
/// within each `(study, group)` cell, cells in index order.
pub fn stratified_indices(d: &Dataset, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut members = vec![Vec::new(); d.n_cells()];
    for i in 0..d.n_subjects() {
        members[d.cell(i)].push(i);
    }
    let mut out = Vec::with_capacity(d.n_subjects());
    for cell in &members {
        for _ in 0..cell.len() {
            out.push(cell[rng.random_range(0..cell.len())]);
        }
    }
    out
}

/// RNG for attempt `attempt` of replicate `b`.
pub fn replicate_rng(seed: u64, b: usize, attempt: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((b as u64) << 16) | attempt as u64);
    rng
}

/// Stratified bootstrap of the whole pipeline, warm-started from `full`.
pub fn bootstrap(
    d: &Dataset,
    plan: &AnalysisPlan,
    full: &PipelineResult,
    options: &BootstrapOptions,
) -> Result<BootstrapResult> {
    check_level(options.level)?;
    if options.n_boot < 2 {
        return Err(UncertaintyError::TooFewReplicates(options.n_boot).into());
    }
    let fixed = (!options.reoptimize_flexor).then(|| full.specs());
    let outcomes: Vec<(Option<Vec<Vec<Vec<f64>>>>, usize)> = (0..options.n_boot)
        .into_par_iter()
        .map(|b| {
            let mut failures = 0;
            for attempt in 0..=options.max_retries {
                let mut rng = replicate_rng(options.seed, b, attempt);
                let idx = stratified_indices(d, &mut rng);
                let run = d
                    .subset(&idx)
                    .map_err(crate::error::Error::from)
                    .and_then(|sub| run_pipeline(&sub, plan, Some(&full.model), fixed.as_deref()));
                match run {
                    Ok(r) => {
                        let vals = r
                            .methods
                            .iter()
                            .map(|m| m.estimates.iter().map(|e| e.values()).collect())
                            .collect();
                        return (Some(vals), failures);
                    }
                    Err(e) => {
                        log::debug!("bootstrap replicate {b} attempt {attempt} failed: {e}");
                        failures += 1;
                    }
                }
            }
            (None, failures)
        })
        .collect();
    let n_failed: usize = outcomes.iter().map(|o| o.1).sum();
    let n_attempts = n_failed + outcomes.iter().filter(|o| o.0.is_some()).count();
    if outcomes.iter().any(|o| o.0.is_none()) || n_failed as f64 > 0.2 * n_attempts as f64 {
        return Err(UncertaintyError::BootstrapUnstable {
            failed: n_failed,
            attempted: n_attempts,
        }
        .into());
    }
    let reps: Vec<Vec<Vec<Vec<f64>>>> = outcomes.into_iter().map(|o| o.0.unwrap()).collect();
    let samples = full
        .methods
        .iter()
        .enumerate()
        .map(|(mi, m)| {
            m.estimates
                .iter()
                .enumerate()
                .map(|(ei, e)| (0..e.values().len()).map(|vi| reps.iter().map(|r| r[mi][ei][vi]).collect()).collect())
                .collect()
        })
        .collect();
    Ok(BootstrapResult {
        samples,
        n_failed_attempts: n_failed,
        n_attempts,
        level: options.level,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimation::{feature_matrix, weighted_feature_mean, Functional, Transform};
    use crate::mps::{fit_mps, MpsOptions};
    use crate::weights::Tilt;

    fn toy(n: usize) -> Dataset {
        let x: Vec<f64> = (0..n).map(|i| ((i * 37) % 101) as f64 / 50.0 - 1.0).collect();
        let y: Vec<f64> = (0..n).map(|i| x[i] * 2.0 + ((i * 13) % 7) as f64 / 7.0 + (i % 2) as f64).collect();
        let group: Vec<usize> = (0..n).map(|i| usize::from(x[i] + ((i * 5) % 3) as f64 * 0.5 > 0.2)).collect();
        Dataset::new(vec![0; n], group, 1, 2, DMatrix::from_vec(n, 1, x), DMatrix::from_vec(n, 1, y)).unwrap()
    }

    #[test]
    fn constant_features_zero_sigma1() {
        let d = toy(20);
        let f = DMatrix::from_element(20, 1, 3.0);
        let w: Vec<f64> = (0..20).map(|i| 1.0 + i as f64 / 10.0).collect();
        let g = moments_from_features(&w, d.group(), 2, &f).unwrap();
        let s = sigma1_plugin(&w, &d, &f, &g, 0).unwrap();
        assert!(s[(0, 0)].abs() < 1e-24);
    }

    #[test]
    fn sigma1_equal_weights_is_classical() {
        let d = toy(30);
        let f = feature_matrix(&d, &[Transform::Component(1)]);
        let w = vec![1.0; 30];
        let g = moments_from_features(&w, d.group(), 2, &f).unwrap();
        for z in 0..2 {
            let s = sigma1_plugin(&w, &d, &f, &g, z).unwrap()[(0, 0)];
            let members: Vec<f64> = (0..30).filter(|&i| d.group()[i] == z).map(|i| f[(i, 0)]).collect();
            let nz = members.len() as f64;
            let mean = members.iter().sum::<f64>() / nz;
            let var = members.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / nz;
            // Var(mean) = var / n_z = Sigma / N.
            assert!((s / 30.0 - var / nz).abs() < 1e-12);
        }
    }

    #[test]
    fn sigma1_hand_three_subjects() {
        let d = Dataset::new(
            vec![0, 0, 0],
            vec![0, 0, 0],
            1,
            1,
            DMatrix::zeros(3, 0),
            DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 4.0]),
        )
        .unwrap();
        let w = [1.0, 2.0, 3.0];
        let f = feature_matrix(&d, &[Transform::Component(1)]);
        let g = moments_from_features(&w, d.group(), 1, &f).unwrap();
        let lambda = (1.0 + 4.0 + 12.0) / 6.0;
        let rho = [0.5, 1.0, 1.5];
        let direct: f64 = rho.iter().zip([1.0, 2.0, 4.0]).map(|(r, y)| r * r * (y - lambda) * (y - lambda)).sum::<f64>() / 3.0;
        let s = sigma1_plugin(&w, &d, &f, &g, 0).unwrap();
        assert!((s[(0, 0)] - direct).abs() < 1e-12);
    }

    #[test]
    fn delta_method_examples() {
        let sigma = DMatrix::identity(3, 3);
        let g = DVector::from_vec(vec![-2.0, -1.0, 1.0]);
        assert!((delta_method(&sigma, &g).unwrap() - 6.0).abs() < 1e-15);
        let s = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 5.0]);
        assert_eq!(delta_method(&s, &DVector::from_vec(vec![0.0, 1.0])).unwrap(), 5.0);
        assert!(matches!(
            delta_method(&s, &DVector::zeros(2)),
            Err(UncertaintyError::DegenerateGradient)
        ));
    }

    #[test]
    fn chi_square_half_widths() {
        assert!((chi_square_quantile(1, 0.05).sqrt() - 1.959964).abs() < 1e-5);
        assert!((chi_square_quantile(2, 0.05) - 5.991465).abs() < 1e-5);
        let g = GroupMoments {
            lambda_hat: DMatrix::from_row_slice(2, 1, &[1.0, 0.5]),
            weighted_group_mass: vec![1.0, 1.0],
        };
        let v = VarianceEstimate {
            joint: DMatrix::identity(2, 2) * 4.0,
            n_groups: 2,
            n_moments: 1,
            n_subjects: 100,
            method: VarianceMethod::KnownMps,
        };
        let ci = simultaneous_ci(&g, &v, &[1.0, -1.0], 0, 0.95).unwrap();
        let expect = (5.991465 * 8.0 / 100.0f64).sqrt();
        assert!((ci.upper - ci.point - expect).abs() < 1e-5);
        assert!(simultaneous_ci(&g, &v, &[1.0, -1.0], 0, 1.5).is_err());
    }

    #[test]
    fn fixed_omega_sandwich_matches_sigma1() {
        let d = toy(60);
        let model = fit_mps(&d, &MpsOptions::default()).unwrap();
        let ctx = SandwichContext::new(&model, &d).unwrap();
        let spec = PseudoPopulationSpec::uniform(Tilt::Igo, 1, 2);
        let f = feature_matrix(&d, &[Transform::Component(1), Transform::Power(1, 2)]);
        let (v2, g) = ctx.variance(&spec, 1e-6, &f).unwrap();
        let w = crate::weights::compute_weights(&spec, &crate::mps::predict_mps(&model, &d).unwrap(), &d, 1e-6).unwrap();
        let v1 = known_mps_variance(&w.rho_tilde, &d, &f, &g).unwrap();
        assert!((&v2.joint - v2.joint.transpose()).amax() < 1e-10);
        // The MPS adjustment changes the variance but both are finite and PSD.
        assert!(v1.joint.clone().symmetric_eigenvalues().min() > -1e-8);
        assert!(v2.joint.clone().symmetric_eigenvalues().min() > -1e-8);
        assert!(v1.joint != v2.joint);
    }

    #[test]
    fn estimand_tau2_contrast_and_groups() {
        let d = toy(40);
        let f = FeatureSpec::new(vec![Transform::Component(1)], Functional::Difference(1, 2));
        let w = vec![1.0; 40];
        let g = weighted_feature_mean(&w, &d, &f).unwrap();
        let v = known_mps_variance(&w, &d, &feature_matrix(&d, &f.transforms), &g).unwrap();
        let tau = estimand_tau2(&v, &g, &f).unwrap();
        assert!((tau[0] - (v.joint[(0, 0)] + v.joint[(1, 1)])).abs() < 1e-12);
    }

    #[test]
    fn type7_quantiles() {
        let s = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_sorted(&s, 0.0), 1.0);
        assert_eq!(quantile_sorted(&s, 1.0), 4.0);
        assert!((quantile_sorted(&s, 0.5) - 2.5).abs() < 1e-15);
    }
}
