//! Tilting functions, multi-study balancing weights and effective sample size.
//!
//! A pseudo-population is identified by study shares `gamma`, group
//! prevalences `theta` and a tilting function. The unnormalized weight of
//! subject `i` in cell `(s, z)` is `gamma_s * theta_z * eta(x_i) / delta_sz(x_i)`.
//! The normalizing constant `E[eta]` is never formed; every downstream
//! estimator is a ratio in these weights.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::WeightError;
use crate::mps::MpsProbabilities;

/// Lower bound applied to cell probabilities before division.
pub const DEFAULT_PROBABILITY_FLOOR: f64 = 1e-6;

/// Fraction of floored probabilities above which a diagnostic is recorded.
const FLOORED_WARNING_FRACTION: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tilt {
    /// Constant tilt (integrative combined).
    Ic,
    /// Harmonic tilt `1 / sum_sz 1/delta_sz` (integrative generalized overlap).
    Igo,
    /// ESS-optimal tilt `(sum_sz gamma_s^2 theta_z^2 / delta_sz)^-1`.
    Flexor,
    /// Covariate density of group `z'` (1-based label): `sum_s delta_sz'`.
    FixedGroup(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoPopulationSpec {
    pub tilt: Tilt,
    pub gamma: Vec<f64>,
    pub theta: Vec<f64>,
}

fn check_simplex(v: &[f64], name: &str) -> Result<(), WeightError> {
    if v.is_empty() {
        return Err(WeightError::InvalidSpec(format!("{name} is empty")));
    }
    if v.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
        return Err(WeightError::InvalidSpec(format!("{name} must have strictly positive entries")));
    }
    let total: f64 = v.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(WeightError::InvalidSpec(format!("{name} sums to {total}, not 1")));
    }
    Ok(())
}

impl PseudoPopulationSpec {
    pub fn new(tilt: Tilt, gamma: Vec<f64>, theta: Vec<f64>) -> Result<Self, WeightError> {
        check_simplex(&gamma, "gamma")?;
        check_simplex(&theta, "theta")?;
        if let Tilt::FixedGroup(z) = tilt {
            if z == 0 || z > theta.len() {
                return Err(WeightError::InvalidSpec(format!("fixed group {z} out of range")));
            }
        }
        Ok(PseudoPopulationSpec { tilt, gamma, theta })
    }

    /// Equal study shares and equal group prevalences.
    pub fn uniform(tilt: Tilt, n_studies: usize, n_groups: usize) -> Self {
        PseudoPopulationSpec {
            tilt,
            gamma: vec![1.0 / n_studies as f64; n_studies],
            theta: vec![1.0 / n_groups as f64; n_groups],
        }
    }

    pub fn validate(&self) -> Result<(), WeightError> {
        Self::new(self.tilt, self.gamma.clone(), self.theta.clone()).map(|_| ())
    }

    fn check_dims(&self, probs: &MpsProbabilities) -> Result<(), WeightError> {
        if self.gamma.len() != probs.n_studies || self.theta.len() != probs.n_groups {
            return Err(WeightError::Dimension(format!(
                "spec is {}x{}, probabilities are {}x{}",
                self.gamma.len(),
                self.theta.len(),
                probs.n_studies,
                probs.n_groups
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TiltValues {
    pub values: Vec<f64>,
    pub n_floored: usize,
    pub warning: Option<String>,
}

/// Tilt value for one subject given floored cell probabilities.
fn tilt_at(tilt: Tilt, gamma: &[f64], theta: &[f64], delta: &[f64]) -> f64 {
    let k = theta.len();
    match tilt {
        Tilt::Ic => 1.0,
        Tilt::Igo => 1.0 / delta.iter().map(|d| 1.0 / d).sum::<f64>(),
        Tilt::Flexor => {
            let mut acc = 0.0;
            for (s, g) in gamma.iter().enumerate() {
                for (z, t) in theta.iter().enumerate() {
                    acc += (g * t).powi(2) / delta[s * k + z];
                }
            }
            1.0 / acc
        }
        Tilt::FixedGroup(zp) => (0..gamma.len()).map(|s| delta[s * k + zp - 1]).sum(),
    }
}

/// Tilt value of a spec at one subject's floored cell probabilities.
pub(crate) fn tilt_value(spec: &PseudoPopulationSpec, delta: &[f64]) -> f64 {
    tilt_at(spec.tilt, &spec.gamma, &spec.theta, delta)
}

/// Unnormalized weight of a subject in cell `cell` from its floored cell probabilities.
pub(crate) fn subject_weight(spec: &PseudoPopulationSpec, delta: &[f64], cell: usize) -> f64 {
    let k = spec.theta.len();
    let eta = tilt_at(spec.tilt, &spec.gamma, &spec.theta, delta);
    spec.gamma[cell / k] * spec.theta[cell % k] * eta / delta[cell]
}

fn floored_row(probs: &MpsProbabilities, i: usize, floor: f64, out: &mut [f64]) -> usize {
    let mut n = 0;
    for c in 0..probs.n_cells() {
        let v = probs.probs[(i, c)];
        out[c] = if v < floor {
            n += 1;
            floor
        } else {
            v
        };
    }
    n
}

pub fn evaluate_tilt(
    spec: &PseudoPopulationSpec,
    probs: &MpsProbabilities,
    floor: f64,
) -> Result<TiltValues, WeightError> {
    spec.check_dims(probs)?;
    let mut row = vec![0.0; probs.n_cells()];
    let mut n_floored = 0;
    let mut values = Vec::with_capacity(probs.n_subjects());
    for i in 0..probs.n_subjects() {
        n_floored += floored_row(probs, i, floor, &mut row);
        let eta = tilt_at(spec.tilt, &spec.gamma, &spec.theta, &row);
        if !eta.is_finite() || eta <= 0.0 {
            return Err(WeightError::NonFiniteTilt(i));
        }
        values.push(eta);
    }
    let total = probs.n_subjects() * probs.n_cells();
    let warning = (n_floored as f64 > FLOORED_WARNING_FRACTION * total as f64).then(|| {
        format!("{n_floored} of {total} cell probabilities were raised to the floor {floor:e}")
    });
    Ok(TiltValues {
        values,
        n_floored,
        warning,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ess {
    pub ess: f64,
    pub percent_ess: f64,
}

/// Kish effective sample size `(sum w)^2 / sum w^2`.
pub fn effective_sample_size(rho_tilde: &[f64]) -> Result<Ess, WeightError> {
    if rho_tilde.is_empty() {
        return Err(WeightError::Empty);
    }
    if let Some(i) = rho_tilde.iter().position(|&w| !(w > 0.0) || !w.is_finite()) {
        return Err(WeightError::InvalidWeight(i));
    }
    // Rescale by the maximum so huge or tiny weights do not overflow.
    let max = rho_tilde.iter().copied().fold(0.0f64, f64::max);
    let (s1, s2) = rho_tilde.iter().fold((0.0, 0.0), |(a, b), &w| {
        let u = w / max;
        (a + u, b + u * u)
    });
    let ess = (s1 * s1 / s2).min(rho_tilde.len() as f64);
    Ok(Ess {
        ess,
        percent_ess: 100.0 * ess / rho_tilde.len() as f64,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightSet {
    pub rho_tilde: Vec<f64>,
    pub ess: f64,
    pub percent_ess: f64,
    pub spec: PseudoPopulationSpec,
    pub tilt_values: Vec<f64>,
    pub n_floored: usize,
    pub warnings: Vec<String>,
}

impl WeightSet {
    /// `rho_tilde / mean(rho_tilde)`, the sample analogue of the normalized weight.
    pub fn normalized(&self) -> Vec<f64> {
        let mean = self.rho_tilde.iter().sum::<f64>() / self.rho_tilde.len() as f64;
        self.rho_tilde.iter().map(|w| w / mean).collect()
    }
}

pub fn compute_weights(
    spec: &PseudoPopulationSpec,
    probs: &MpsProbabilities,
    d: &Dataset,
    floor: f64,
) -> Result<WeightSet, WeightError> {
    spec.validate()?;
    if probs.n_subjects() != d.n_subjects()
        || probs.n_studies != d.n_studies()
        || probs.n_groups != d.n_groups()
    {
        return Err(WeightError::Dimension("probabilities do not match dataset".into()));
    }
    let tilt = evaluate_tilt(spec, probs, floor)?;
    let rho_tilde: Vec<f64> = (0..d.n_subjects())
        .map(|i| {
            let s = d.study()[i];
            let z = d.group()[i];
            let delta = probs.get(i, s, z).max(floor);
            spec.gamma[s] * spec.theta[z] * tilt.values[i] / delta
        })
        .collect();
    let Ess { ess, percent_ess } = effective_sample_size(&rho_tilde)?;
    Ok(WeightSet {
        rho_tilde,
        ess,
        percent_ess,
        spec: spec.clone(),
        tilt_values: tilt.values,
        n_floored: tilt.n_floored,
        warnings: tilt.warning.into_iter().collect(),
    })
}

/// Optimal fixed-(gamma, theta) weight in its closed form:
/// `(1/(g_s t_z)) * (g_s^2 t_z^2 / delta_sz) / sum_tu (g_t^2 t_u^2 / delta_tu)`.
pub fn flexor_weight(gamma: &[f64], theta: &[f64], delta: &[f64], s: usize, z: usize) -> f64 {
    let k = theta.len();
    let mut denom = 0.0;
    for (t, g) in gamma.iter().enumerate() {
        for (u, th) in theta.iter().enumerate() {
            denom += (g * th).powi(2) / delta[t * k + u];
        }
    }
    let gt = gamma[s] * theta[z];
    (gt * gt / delta[s * k + z]) / denom / gt
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupPairSmd {
    pub group_a: usize,
    pub group_b: usize,
    pub smd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateBalance {
    pub covariate: String,
    pub pairs: Vec<GroupPairSmd>,
}

impl CovariateBalance {
    pub fn max_abs_smd(&self) -> f64 {
        self.pairs.iter().map(|p| p.smd.abs()).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceDiagnostics {
    pub covariates: Vec<CovariateBalance>,
    /// Weighted share of each `(s, z)` cell, `J x K`.
    pub cell_proportions: Vec<Vec<f64>>,
}

impl BalanceDiagnostics {
    pub fn max_abs_smd(&self) -> f64 {
        self.covariates.iter().map(|c| c.max_abs_smd()).fold(0.0, f64::max)
    }
}

pub fn balance_diagnostics(w: &WeightSet, d: &Dataset) -> Result<BalanceDiagnostics, WeightError> {
    balance_with_weights(&w.rho_tilde, d)
}

/// Weighted standardized mean differences (group labels 1-based) and weighted
/// cell shares. Uniform weights give the unweighted diagnostics.
pub fn balance_with_weights(weights: &[f64], d: &Dataset) -> Result<BalanceDiagnostics, WeightError> {
    if weights.len() != d.n_subjects() {
        return Err(WeightError::Dimension("weights do not match dataset".into()));
    }
    let k = d.n_groups();
    let mut mass = vec![0.0; k];
    for (i, &w) in weights.iter().enumerate() {
        mass[d.group()[i]] += w;
    }
    if let Some(z) = mass.iter().position(|&m| !(m > 0.0)) {
        return Err(WeightError::DegenerateGroup(z + 1));
    }
    let x = d.covariates();
    let covariates = (0..d.n_covariates())
        .map(|j| {
            let mut mean = vec![0.0; k];
            for i in 0..d.n_subjects() {
                mean[d.group()[i]] += weights[i] * x[(i, j)];
            }
            for z in 0..k {
                mean[z] /= mass[z];
            }
            let mut var = vec![0.0; k];
            for i in 0..d.n_subjects() {
                let z = d.group()[i];
                var[z] += weights[i] * (x[(i, j)] - mean[z]).powi(2);
            }
            for z in 0..k {
                var[z] /= mass[z];
            }
            let pairs = (0..k)
                .flat_map(|a| ((a + 1)..k).map(move |b| (a, b)))
                .map(|(a, b)| {
                    let pooled = ((var[a] + var[b]) / 2.0).sqrt();
                    let diff = mean[a] - mean[b];
                    let smd = if pooled > 0.0 { diff / pooled } else if diff == 0.0 { 0.0 } else { f64::INFINITY };
                    GroupPairSmd {
                        group_a: a + 1,
                        group_b: b + 1,
                        smd,
                    }
                })
                .collect();
            CovariateBalance {
                covariate: d.covariate_names()[j].clone(),
                pairs,
            }
        })
        .collect();
    let total: f64 = weights.iter().sum();
    let mut cell_proportions = vec![vec![0.0; k]; d.n_studies()];
    for (i, &w) in weights.iter().enumerate() {
        cell_proportions[d.study()[i]][d.group()[i]] += w / total;
    }
    Ok(BalanceDiagnostics {
        covariates,
        cell_proportions,
    })
}
