//! Weighted moment estimators and the functionals built on them.
//!
//! A [`FeatureSpec`] lists transforms `Phi_1..Phi_M` of the outcome vector
//! and a functional `psi`. For each group the ratio estimator
//! `sum_i w_i Phi(Y_i) 1{Z_i = z} / sum_i w_i 1{Z_i = z}` estimates the
//! pseudo-population moment vector; `psi` maps one group's moments (or a
//! contrast across groups) to the reported scalar.
//!
//! Descriptors use 1-based outcome and group labels; function arguments
//! (`z`, `l`) are 0-based indices.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::EstimationError;

/// A real-valued transform of the outcome vector (1-based outcome labels).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    Component(usize),
    Product(usize, usize),
    Power(usize, i32),
    IndicatorLe(usize, f64),
}

impl Transform {
    fn outcomes(&self) -> Vec<usize> {
        match *self {
            Transform::Component(l) | Transform::Power(l, _) | Transform::IndicatorLe(l, _) => vec![l],
            Transform::Product(a, b) => vec![a, b],
        }
    }

    pub fn apply(&self, y: &[f64]) -> f64 {
        match *self {
            Transform::Component(l) => y[l - 1],
            Transform::Product(a, b) => y[a - 1] * y[b - 1],
            Transform::Power(l, k) => y[l - 1].powi(k),
            Transform::IndicatorLe(l, t) => {
                if y[l - 1] <= t {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// The functional `psi`. Group and transform labels are 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Functional {
    /// The `m`-th moment itself.
    Identity(usize),
    /// `t1` for a single transform.
    Mean,
    /// `sqrt(t2 - t1^2)` for transforms `(y, y^2)`.
    Sd,
    /// `t3 - t1 t2` for transforms `(y1, y2, y1 y2)`.
    Covariance,
    /// Correlation from transforms `(y1, y2, y1^2, y2^2, y1 y2)`.
    Correlation,
    /// The `m`-th indicator moment.
    CdfAt(usize),
    /// Grid point whose CDF value is closest to 0.5 (ties to the smaller point).
    MedianFromCdfGrid,
    /// `psi_b(z1) - psi_b(z2)`.
    Difference(usize, usize),
    /// `psi_b(z1) / psi_b(z2)`.
    Ratio(usize, usize),
    /// `sum_z a_z psi_b(z)`.
    LinearCombination(Vec<f64>),
    /// `(psi_b(z3) - psi_b(z1)) / (psi_b(z2) - psi_b(z1))`, fields `(z3, z1, z2)`.
    MeanDiffRatio(usize, usize, usize),
}

impl Functional {
    pub fn is_contrast(&self) -> bool {
        matches!(
            self,
            Functional::Difference(..)
                | Functional::Ratio(..)
                | Functional::LinearCombination(_)
                | Functional::MeanDiffRatio(..)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub transforms: Vec<Transform>,
    pub functional: Functional,
    /// Per-group functional that contrasts compare; defaults to the first moment.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base: Option<Functional>,
}

impl FeatureSpec {
    pub fn new(transforms: Vec<Transform>, functional: Functional) -> Self {
        FeatureSpec {
            transforms,
            functional,
            base: None,
        }
    }

    pub fn with_base(mut self, base: Functional) -> Self {
        self.base = Some(base);
        self
    }

    pub fn mean(l: usize) -> Self {
        Self::new(vec![Transform::Component(l)], Functional::Mean)
    }

    pub fn sd(l: usize) -> Self {
        Self::new(vec![Transform::Component(l), Transform::Power(l, 2)], Functional::Sd)
    }

    pub fn covariance(l1: usize, l2: usize) -> Self {
        Self::new(
            vec![Transform::Component(l1), Transform::Component(l2), Transform::Product(l1, l2)],
            Functional::Covariance,
        )
    }

    pub fn correlation(l1: usize, l2: usize) -> Self {
        Self::new(
            vec![
                Transform::Component(l1),
                Transform::Component(l2),
                Transform::Power(l1, 2),
                Transform::Power(l2, 2),
                Transform::Product(l1, l2),
            ],
            Functional::Correlation,
        )
    }

    pub fn cdf_at(l: usize, grid: &[f64], m: usize) -> Self {
        Self::new(grid.iter().map(|&y| Transform::IndicatorLe(l, y)).collect(), Functional::CdfAt(m))
    }

    pub fn median(l: usize, grid: &[f64]) -> Self {
        Self::new(grid.iter().map(|&y| Transform::IndicatorLe(l, y)).collect(), Functional::MedianFromCdfGrid)
    }

    pub fn mean_difference(l: usize, z1: usize, z2: usize) -> Self {
        Self::new(vec![Transform::Component(l)], Functional::Difference(z1, z2))
    }

    pub fn n_moments(&self) -> usize {
        self.transforms.len()
    }

    fn base_functional(&self) -> Functional {
        self.base.clone().unwrap_or(if self.transforms.len() == 1 {
            Functional::Mean
        } else {
            Functional::Identity(1)
        })
    }

    /// Checks labels against the dataset shape and the functional's arity.
    pub fn validate(&self, n_outcomes: usize, n_groups: usize) -> Result<(), EstimationError> {
        let bad = |msg: String| Err(EstimationError::InvalidFeature(msg));
        if self.transforms.is_empty() {
            return bad("no transforms".into());
        }
        for t in &self.transforms {
            if t.outcomes().iter().any(|&l| l == 0 || l > n_outcomes) {
                return bad(format!("{t:?} refers to an outcome outside 1..={n_outcomes}"));
            }
        }
        let group_ok = |z: usize| z >= 1 && z <= n_groups;
        match &self.functional {
            Functional::Difference(a, b) | Functional::Ratio(a, b) => {
                if !group_ok(*a) || !group_ok(*b) {
                    return bad(format!("group labels must lie in 1..={n_groups}"));
                }
            }
            Functional::MeanDiffRatio(a, b, c) => {
                if ![a, b, c].iter().all(|&&z| group_ok(z)) {
                    return bad(format!("group labels must lie in 1..={n_groups}"));
                }
            }
            Functional::LinearCombination(a) => {
                if a.len() != n_groups {
                    return bad(format!("{} coefficients for {n_groups} groups", a.len()));
                }
            }
            f => return self.validate_group_functional(f),
        }
        let base = self.base_functional();
        if base.is_contrast() {
            return bad("contrast base must be a per-group functional".into());
        }
        self.validate_group_functional(&base)
    }

    fn validate_group_functional(&self, f: &Functional) -> Result<(), EstimationError> {
        let m = self.transforms.len();
        let need = |k: usize, name: &str| {
            if m == k {
                Ok(())
            } else {
                Err(EstimationError::InvalidFeature(format!("{name} needs {k} transforms, got {m}")))
            }
        };
        match f {
            Functional::Identity(j) | Functional::CdfAt(j) => {
                if *j == 0 || *j > m {
                    return Err(EstimationError::InvalidFeature(format!("moment index {j} outside 1..={m}")));
                }
                Ok(())
            }
            Functional::Mean => need(1, "mean"),
            Functional::Sd => need(2, "sd"),
            Functional::Covariance => need(3, "covariance"),
            Functional::Correlation => need(5, "correlation"),
            Functional::MedianFromCdfGrid => {
                let grid = median_grid(&self.transforms)?;
                if grid.windows(2).any(|w| w[1] < w[0]) {
                    return Err(EstimationError::InvalidGrid);
                }
                Ok(())
            }
            _ => Err(EstimationError::InvalidFeature("nested contrast".into())),
        }
    }
}

fn median_grid(transforms: &[Transform]) -> Result<Vec<f64>, EstimationError> {
    let mut outcome = None;
    let mut grid = Vec::with_capacity(transforms.len());
    for t in transforms {
        match *t {
            Transform::IndicatorLe(l, y) if outcome.is_none_or(|o| o == l) => {
                outcome = Some(l);
                grid.push(y);
            }
            _ => {
                return Err(EstimationError::InvalidFeature(
                    "median needs indicator transforms of a single outcome".into(),
                ))
            }
        }
    }
    Ok(grid)
}

/// Per-group weighted moment vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMoments {
    /// `K x M`; row `z` is the estimate for group `z`.
    pub lambda_hat: DMatrix<f64>,
    pub weighted_group_mass: Vec<f64>,
}

impl GroupMoments {
    pub fn n_groups(&self) -> usize {
        self.lambda_hat.nrows()
    }

    pub fn group(&self, z: usize) -> Vec<f64> {
        self.lambda_hat.row(z).iter().copied().collect()
    }
}

/// `n x M` matrix of transformed outcomes.
pub fn feature_matrix(d: &Dataset, transforms: &[Transform]) -> DMatrix<f64> {
    let y = d.outcomes();
    let mut row = vec![0.0; d.n_outcomes()];
    let mut out = DMatrix::zeros(d.n_subjects(), transforms.len());
    for i in 0..d.n_subjects() {
        for (l, v) in row.iter_mut().enumerate() {
            *v = y[(i, l)];
        }
        for (m, t) in transforms.iter().enumerate() {
            out[(i, m)] = t.apply(&row);
        }
    }
    out
}

/// Ratio estimator of group moments from a precomputed feature matrix.
pub fn moments_from_features(
    weights: &[f64],
    groups: &[usize],
    n_groups: usize,
    features: &DMatrix<f64>,
) -> Result<GroupMoments, EstimationError> {
    let m = features.ncols();
    let mut lambda = DMatrix::zeros(n_groups, m);
    let mut mass = vec![0.0; n_groups];
    for (i, (&w, &z)) in weights.iter().zip(groups).enumerate() {
        mass[z] += w;
        for j in 0..m {
            lambda[(z, j)] += w * features[(i, j)];
        }
    }
    for z in 0..n_groups {
        if !(mass[z] > 0.0) {
            return Err(EstimationError::DegenerateGroup(z + 1));
        }
        for j in 0..m {
            lambda[(z, j)] /= mass[z];
        }
    }
    Ok(GroupMoments {
        lambda_hat: lambda,
        weighted_group_mass: mass,
    })
}

/// Weighted group moments of the transforms in `f`.
pub fn weighted_feature_mean(weights: &[f64], d: &Dataset, f: &FeatureSpec) -> Result<GroupMoments, EstimationError> {
    if weights.len() != d.n_subjects() {
        return Err(EstimationError::InvalidFeature("weight count does not match dataset".into()));
    }
    f.validate(d.n_outcomes(), d.n_groups())?;
    moments_from_features(weights, d.group(), d.n_groups(), &feature_matrix(d, &f.transforms))
}

/// Grid point whose CDF value is closest to 0.5; ties go to the smaller point.
pub fn median_from_cdf(grid: &[f64], cdf: &[f64]) -> Result<f64, EstimationError> {
    if grid.is_empty() || grid.len() != cdf.len() {
        return Err(EstimationError::InvalidGrid);
    }
    let mut best = 0;
    for m in 1..grid.len() {
        if (cdf[m] - 0.5).abs() < (cdf[best] - 0.5).abs() {
            best = m;
        }
    }
    Ok(grid[best])
}

fn group_psi(f: &Functional, t: &[f64], transforms: &[Transform]) -> Result<f64, EstimationError> {
    Ok(match f {
        Functional::Identity(m) | Functional::CdfAt(m) => t[m - 1],
        Functional::Mean => t[0],
        Functional::Sd => {
            let v = t[1] - t[0] * t[0];
            if v < -1e-12 {
                return Err(EstimationError::DegenerateVariance);
            }
            v.max(0.0).sqrt()
        }
        Functional::Covariance => t[2] - t[0] * t[1],
        Functional::Correlation => {
            let v1 = t[2] - t[0] * t[0];
            let v2 = t[3] - t[1] * t[1];
            if v1.max(0.0).sqrt() < 1e-12 || v2.max(0.0).sqrt() < 1e-12 {
                return Err(EstimationError::DegenerateVariance);
            }
            ((t[4] - t[0] * t[1]) / (v1 * v2).sqrt()).clamp(-1.0, 1.0)
        }
        Functional::MedianFromCdfGrid => median_from_cdf(&median_grid(transforms)?, t)?,
        _ => return Err(EstimationError::InvalidFeature("contrast used as a per-group functional".into())),
    })
}

fn group_psi_gradient(f: &Functional, t: &[f64]) -> Result<Vec<f64>, EstimationError> {
    let mut g = vec![0.0; t.len()];
    match f {
        Functional::Identity(m) | Functional::CdfAt(m) => g[m - 1] = 1.0,
        Functional::Mean => g[0] = 1.0,
        Functional::Sd => {
            let sd = (t[1] - t[0] * t[0]).max(0.0).sqrt();
            if sd < 1e-12 {
                return Err(EstimationError::DegenerateVariance);
            }
            g[0] = -t[0] / sd;
            g[1] = 0.5 / sd;
        }
        Functional::Covariance => {
            g[0] = -t[1];
            g[1] = -t[0];
            g[2] = 1.0;
        }
        Functional::Correlation => {
            let v1 = t[2] - t[0] * t[0];
            let v2 = t[3] - t[1] * t[1];
            if v1.max(0.0).sqrt() < 1e-12 || v2.max(0.0).sqrt() < 1e-12 {
                return Err(EstimationError::DegenerateVariance);
            }
            let s = (v1 * v2).sqrt();
            let r = (t[4] - t[0] * t[1]) / s;
            g[0] = -t[1] / s + r * t[0] / v1;
            g[1] = -t[0] / s + r * t[1] / v2;
            g[2] = -r / (2.0 * v1);
            g[3] = -r / (2.0 * v2);
            g[4] = 1.0 / s;
        }
        // Piecewise constant in the moments.
        Functional::MedianFromCdfGrid => {}
        _ => return Err(EstimationError::InvalidFeature("contrast used as a per-group functional".into())),
    }
    Ok(g)
}

/// `psi` applied to the moments of group `z` (0-based). `f` must be a per-group functional.
pub fn apply_functional(g: &GroupMoments, f: &FeatureSpec, z: usize) -> Result<f64, EstimationError> {
    if f.functional.is_contrast() {
        return Err(EstimationError::InvalidFeature("use group_contrast for contrasts".into()));
    }
    group_psi(&f.functional, &g.group(z), &f.transforms)
}

fn ratio(num: f64, den: f64) -> Result<f64, EstimationError> {
    if den == 0.0 {
        Err(EstimationError::RatioUndefined)
    } else {
        Ok(num / den)
    }
}

/// Scalar contrast of the base functional across groups.
pub fn group_contrast(g: &GroupMoments, f: &FeatureSpec) -> Result<f64, EstimationError> {
    let base = f.base_functional();
    let psi = |z: usize| group_psi(&base, &g.group(z - 1), &f.transforms);
    match &f.functional {
        Functional::Difference(a, b) => Ok(psi(*a)? - psi(*b)?),
        Functional::Ratio(a, b) => ratio(psi(*a)?, psi(*b)?),
        Functional::LinearCombination(coef) => {
            let mut s = 0.0;
            for (z, a) in coef.iter().enumerate() {
                s += a * psi(z + 1)?;
            }
            Ok(s)
        }
        Functional::MeanDiffRatio(c, a, b) => {
            let base_a = psi(*a)?;
            ratio(psi(*c)? - base_a, psi(*b)? - base_a)
        }
        _ => Err(EstimationError::InvalidFeature("not a contrast".into())),
    }
}

/// Point estimates for a feature: one value per group, or a single contrast.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimateValue {
    PerGroup(Vec<f64>),
    Contrast(f64),
}

impl EstimateValue {
    pub fn values(&self) -> Vec<f64> {
        match self {
            EstimateValue::PerGroup(v) => v.clone(),
            EstimateValue::Contrast(c) => vec![*c],
        }
    }
}

pub fn evaluate(g: &GroupMoments, f: &FeatureSpec) -> Result<EstimateValue, EstimationError> {
    if f.functional.is_contrast() {
        group_contrast(g, f).map(EstimateValue::Contrast)
    } else {
        (0..g.n_groups())
            .map(|z| apply_functional(g, f, z))
            .collect::<Result<_, _>>()
            .map(EstimateValue::PerGroup)
    }
}

/// Gradient of `psi` at group `z`'s moments (0-based `z`), length `M`.
pub fn functional_gradient(g: &GroupMoments, f: &FeatureSpec, z: usize) -> Result<DVector<f64>, EstimationError> {
    Ok(DVector::from_vec(group_psi_gradient(&f.functional, &g.group(z))?))
}

/// Gradient of a contrast with respect to all moments stacked group-major
/// (index `z * M + m`), length `K * M`.
pub fn contrast_gradient(g: &GroupMoments, f: &FeatureSpec) -> Result<DVector<f64>, EstimationError> {
    let base = f.base_functional();
    let k = g.n_groups();
    let m = g.lambda_hat.ncols();
    let psi = |z: usize| group_psi(&base, &g.group(z), &f.transforms);
    let grad = |z: usize| group_psi_gradient(&base, &g.group(z));
    let mut coef = vec![0.0; k];
    match &f.functional {
        Functional::Difference(a, b) => {
            coef[a - 1] += 1.0;
            coef[b - 1] -= 1.0;
        }
        Functional::Ratio(a, b) => {
            let (pa, pb) = (psi(a - 1)?, psi(b - 1)?);
            if pb == 0.0 {
                return Err(EstimationError::RatioUndefined);
            }
            coef[a - 1] += 1.0 / pb;
            coef[b - 1] -= pa / (pb * pb);
        }
        Functional::LinearCombination(a) => coef.copy_from_slice(a),
        Functional::MeanDiffRatio(c, a, b) => {
            let (pc, pa, pb) = (psi(c - 1)?, psi(a - 1)?, psi(b - 1)?);
            let den = pb - pa;
            if den == 0.0 {
                return Err(EstimationError::RatioUndefined);
            }
            let num = pc - pa;
            coef[c - 1] += 1.0 / den;
            coef[b - 1] -= num / (den * den);
            coef[a - 1] += -1.0 / den + num / (den * den);
        }
        _ => return Err(EstimationError::InvalidFeature("not a contrast".into())),
    }
    let mut out = DVector::zeros(k * m);
    for z in 0..k {
        if coef[z] != 0.0 {
            let gz = grad(z)?;
            for j in 0..m {
                out[z * m + j] = coef[z] * gz[j];
            }
        }
    }
    Ok(out)
}

/// Weighted CDF of outcome `l` in group `z` (both 0-based) on a sorted grid.
pub fn weighted_cdf(weights: &[f64], d: &Dataset, l: usize, z: usize, grid: &[f64]) -> Result<Vec<f64>, EstimationError> {
    if grid.is_empty() || grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(EstimationError::InvalidGrid);
    }
    if l >= d.n_outcomes() || z >= d.n_groups() || weights.len() != d.n_subjects() {
        return Err(EstimationError::InvalidFeature("outcome, group or weights out of range".into()));
    }
    let y = d.outcomes();
    let mut mass = 0.0;
    let mut cdf = vec![0.0; grid.len()];
    for i in 0..d.n_subjects() {
        if d.group()[i] != z {
            continue;
        }
        mass += weights[i];
        // First grid point at or above the value.
        let first = grid.partition_point(|&g| g < y[(i, l)]);
        if first < grid.len() {
            cdf[first] += weights[i];
        }
    }
    if !(mass > 0.0) {
        return Err(EstimationError::DegenerateGroup(z + 1));
    }
    let mut acc = 0.0;
    for c in &mut cdf {
        acc += *c;
        *c = (acc / mass).min(1.0);
    }
    Ok(cdf)
}

/// Sorted unique observed values of outcome `l` in group `z` (0-based).
pub fn default_grid(d: &Dataset, l: usize, z: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..d.n_subjects())
        .filter(|&i| d.group()[i] == z)
        .map(|i| d.outcomes()[(i, l)])
        .collect();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

/// Weighted median of outcome `l` in group `z` on the default grid.
pub fn weighted_median(weights: &[f64], d: &Dataset, l: usize, z: usize) -> Result<f64, EstimationError> {
    let grid = default_grid(d, l, z);
    let cdf = weighted_cdf(weights, d, l, z, &grid)?;
    median_from_cdf(&grid, &cdf)
}
