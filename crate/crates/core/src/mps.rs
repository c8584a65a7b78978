//! Multiple propensity score: multinomial logistic regression of the
//! `(study, group)` cell on covariates.
//!
//! Cell `(1,1)` is the reference category and an intercept column is always
//! prepended. Fitting happens on internally standardized covariates; the
//! reported coefficients are mapped back to the original covariate scale.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::MpsError;

/// Coefficient magnitude (standardized scale) beyond which an unpenalized fit
/// is declared separated.
const SEPARATION_BOUND: f64 = 30.0;
const MAX_HALVINGS: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MpsOptions {
    /// L2 penalty on non-intercept coefficients (standardized scale).
    pub ridge: f64,
    pub max_iter: usize,
    /// Tolerance on the max-norm of the per-subject average gradient.
    pub grad_tol: f64,
}

impl Default for MpsOptions {
    fn default() -> Self {
        MpsOptions {
            ridge: 0.0,
            max_iter: 100,
            grad_tol: 1e-8,
        }
    }
}

/// Column means and standard deviations used to standardize covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &DMatrix<f64>) -> Self {
        let n = x.nrows() as f64;
        let (means, sds) = x
            .column_iter()
            .map(|col| {
                let mean = col.sum() / n;
                let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                let sd = var.sqrt();
                (mean, if sd > 0.0 { sd } else { 1.0 })
            })
            .unzip();
        Standardizer { means, sds }
    }

    /// Intercept column followed by standardized covariates.
    pub fn design(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let p = x.ncols();
        DMatrix::from_fn(x.nrows(), p + 1, |i, j| {
            if j == 0 {
                1.0
            } else {
                (x[(i, j - 1)] - self.means[j - 1]) / self.sds[j - 1]
            }
        })
    }

    /// Maps standardized-scale coefficient rows to the original scale.
    fn to_original(&self, scaled: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = scaled.clone();
        for r in 0..scaled.nrows() {
            let mut intercept = scaled[(r, 0)];
            for t in 0..self.means.len() {
                let a = scaled[(r, t + 1)] / self.sds[t];
                out[(r, t + 1)] = a;
                intercept -= a * self.means[t];
            }
            out[(r, 0)] = intercept;
        }
        out
    }

    fn from_original(&self, original: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = original.clone();
        for r in 0..original.nrows() {
            let mut intercept = original[(r, 0)];
            for t in 0..self.means.len() {
                out[(r, t + 1)] = original[(r, t + 1)] * self.sds[t];
                intercept += original[(r, t + 1)] * self.means[t];
            }
            out[(r, 0)] = intercept;
        }
        out
    }
}

/// Fitted multinomial-logit model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpsModel {
    /// `(JK-1) x (p+1)` coefficients on the original covariate scale; row `c-1`
    /// belongs to cell `c` (cell 0 is the reference and is implicitly zero).
    pub omega: DMatrix<f64>,
    pub n_studies: usize,
    pub n_groups: usize,
    pub converged: bool,
    pub final_gradient_norm: f64,
    pub n_iterations: usize,
    pub log_likelihood: f64,
    pub ridge: f64,
    scaled_omega: DMatrix<f64>,
    standardizer: Standardizer,
}

impl MpsModel {
    /// Model with given original-scale coefficients and no fitting history.
    pub fn from_coefficients(
        omega: DMatrix<f64>,
        n_studies: usize,
        n_groups: usize,
    ) -> Result<Self, MpsError> {
        if omega.nrows() + 1 != n_studies * n_groups {
            return Err(MpsError::Dimension(format!(
                "omega has {} rows, expected {}",
                omega.nrows(),
                n_studies * n_groups - 1
            )));
        }
        let p = omega.ncols().saturating_sub(1);
        let standardizer = Standardizer {
            means: vec![0.0; p],
            sds: vec![1.0; p],
        };
        Ok(MpsModel {
            scaled_omega: omega.clone(),
            omega,
            n_studies,
            n_groups,
            converged: true,
            final_gradient_norm: 0.0,
            n_iterations: 0,
            log_likelihood: f64::NAN,
            ridge: 0.0,
            standardizer,
        })
    }

    pub fn n_cells(&self) -> usize {
        self.n_studies * self.n_groups
    }

    pub fn standardizer(&self) -> &Standardizer {
        &self.standardizer
    }

    /// Coefficients on the standardized scale used internally.
    pub fn scaled_omega(&self) -> &DMatrix<f64> {
        &self.scaled_omega
    }
}

/// Per-subject cell probabilities, columns ordered `(s, z)` lexicographically.
#[derive(Debug, Clone, PartialEq)]
pub struct MpsProbabilities {
    pub probs: DMatrix<f64>,
    pub n_studies: usize,
    pub n_groups: usize,
}

impl MpsProbabilities {
    pub fn new(probs: DMatrix<f64>, n_studies: usize, n_groups: usize) -> Result<Self, MpsError> {
        if probs.ncols() != n_studies * n_groups {
            return Err(MpsError::Dimension(format!(
                "{} probability columns for {}x{} cells",
                probs.ncols(),
                n_studies,
                n_groups
            )));
        }
        Ok(MpsProbabilities {
            probs,
            n_studies,
            n_groups,
        })
    }
    pub fn n_subjects(&self) -> usize {
        self.probs.nrows()
    }
    pub fn n_cells(&self) -> usize {
        self.probs.ncols()
    }
    pub fn get(&self, i: usize, s: usize, z: usize) -> f64 {
        self.probs[(i, s * self.n_groups + z)]
    }
}

/// Writes softmax probabilities (reference score 0 first) into `out`.
pub(crate) fn softmax_with_reference(scores: &[f64], out: &mut [f64]) {
    let max = scores.iter().copied().fold(0.0f64, f64::max);
    let mut total = (-max).exp();
    out[0] = total;
    for (o, &s) in out[1..].iter_mut().zip(scores) {
        *o = (s - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Cell probabilities for every row of a standardized design matrix.
pub(crate) fn probabilities_from_design(design: &DMatrix<f64>, params: &DMatrix<f64>) -> DMatrix<f64> {
    let n = design.nrows();
    let cells = params.nrows() + 1;
    let scores = design * params.transpose();
    let mut probs = DMatrix::zeros(n, cells);
    let mut row = vec![0.0; cells];
    let mut s = vec![0.0; cells - 1];
    for i in 0..n {
        for c in 0..cells - 1 {
            s[c] = scores[(i, c)];
        }
        softmax_with_reference(&s, &mut row);
        for c in 0..cells {
            probs[(i, c)] = row[c];
        }
    }
    probs
}

/// Penalized multinomial log-likelihood on the standardized design.
#[derive(Debug, Clone)]
pub struct MpsObjective {
    design: DMatrix<f64>,
    cells: Vec<usize>,
    n_cells: usize,
    ridge: f64,
    outer: DMatrix<f64>,
    pairs: Vec<(usize, usize)>,
}

impl MpsObjective {
    pub fn new(d: &Dataset, standardizer: &Standardizer, ridge: f64) -> Self {
        let design = standardizer.design(d.covariates());
        let cells = (0..d.n_subjects()).map(|i| d.cell(i)).collect();
        let dim = design.ncols();
        let pairs: Vec<(usize, usize)> = (0..dim).flat_map(|u| (u..dim).map(move |v| (u, v))).collect();
        let outer = DMatrix::from_fn(design.nrows(), pairs.len(), |i, k| {
            let (u, v) = pairs[k];
            design[(i, u)] * design[(i, v)]
        });
        MpsObjective {
            design,
            cells,
            n_cells: d.n_cells(),
            ridge,
            outer,
            pairs,
        }
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.design
    }

    pub fn n_params(&self) -> usize {
        (self.n_cells - 1) * self.design.ncols()
    }

    fn penalty(&self, params: &DMatrix<f64>) -> f64 {
        let mut s = 0.0;
        for r in 0..params.nrows() {
            for c in 1..params.ncols() {
                s += params[(r, c)].powi(2);
            }
        }
        0.5 * self.ridge * s
    }

    /// Penalized log-likelihood (sum over subjects).
    pub fn value(&self, params: &DMatrix<f64>) -> f64 {
        let probs = probabilities_from_design(&self.design, params);
        let ll: f64 = self
            .cells
            .iter()
            .enumerate()
            .map(|(i, &c)| probs[(i, c)].ln())
            .sum();
        ll - self.penalty(params)
    }

    fn gradient_from_probs(&self, params: &DMatrix<f64>, probs: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.design.nrows();
        let mut resid = DMatrix::zeros(n, self.n_cells - 1);
        for i in 0..n {
            for c in 1..self.n_cells {
                let y = if self.cells[i] == c { 1.0 } else { 0.0 };
                resid[(i, c - 1)] = y - probs[(i, c)];
            }
        }
        let mut g = resid.transpose() * &self.design;
        for r in 0..g.nrows() {
            for c in 1..g.ncols() {
                g[(r, c)] -= self.ridge * params[(r, c)];
            }
        }
        g
    }

    /// Gradient of [`value`](Self::value), same shape as `params`.
    pub fn gradient(&self, params: &DMatrix<f64>) -> DMatrix<f64> {
        let probs = probabilities_from_design(&self.design, params);
        self.gradient_from_probs(params, &probs)
    }

    /// Negative Hessian (positive semidefinite), parameters flattened
    /// cell-major: index `(c-1) * dim + u`.
    pub fn neg_hessian(&self, probs: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.design.nrows();
        let dim = self.design.ncols();
        let m = self.n_cells - 1;
        let block_pairs: Vec<(usize, usize)> = (0..m).flat_map(|a| (a..m).map(move |b| (a, b))).collect();
        let w = DMatrix::from_fn(n, block_pairs.len(), |i, k| {
            let (a, b) = block_pairs[k];
            let pa = probs[(i, a + 1)];
            let pb = probs[(i, b + 1)];
            if a == b {
                pa * (1.0 - pa)
            } else {
                -pa * pb
            }
        });
        let packed = self.outer.tr_mul(&w);
        let q = m * dim;
        let mut h = DMatrix::zeros(q, q);
        for (k, &(a, b)) in block_pairs.iter().enumerate() {
            for (pk, &(u, v)) in self.pairs.iter().enumerate() {
                let val = packed[(pk, k)];
                let (r1, c1) = (a * dim + u, b * dim + v);
                let (r2, c2) = (a * dim + v, b * dim + u);
                h[(r1, c1)] = val;
                h[(c1, r1)] = val;
                h[(r2, c2)] = val;
                h[(c2, r2)] = val;
            }
        }
        for a in 0..m {
            for u in 1..dim {
                h[(a * dim + u, a * dim + u)] += self.ridge;
            }
        }
        h
    }

    /// Per-subject score contributions (n x q), ridge excluded.
    pub fn scores(&self, params: &DMatrix<f64>) -> DMatrix<f64> {
        let probs = probabilities_from_design(&self.design, params);
        let n = self.design.nrows();
        let dim = self.design.ncols();
        DMatrix::from_fn(n, (self.n_cells - 1) * dim, |i, k| {
            let c = k / dim + 1;
            let u = k % dim;
            let y = if self.cells[i] == c { 1.0 } else { 0.0 };
            (y - probs[(i, c)]) * self.design[(i, u)]
        })
    }
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
}

/// Fits the MPS by damped Newton iterations with step halving.
pub fn fit_mps(d: &Dataset, options: &MpsOptions) -> Result<MpsModel, MpsError> {
    fit_mps_warm(d, options, None)
}

/// As [`fit_mps`], starting from the coefficients of `init` when given.
pub fn fit_mps_warm(
    d: &Dataset,
    options: &MpsOptions,
    init: Option<&MpsModel>,
) -> Result<MpsModel, MpsError> {
    if !(options.ridge >= 0.0) || !options.ridge.is_finite() {
        return Err(MpsError::InvalidOption(format!("ridge = {}", options.ridge)));
    }
    if !(options.grad_tol > 0.0) {
        return Err(MpsError::InvalidOption(format!("grad_tol = {}", options.grad_tol)));
    }
    let standardizer = Standardizer::fit(d.covariates());
    let objective = MpsObjective::new(d, &standardizer, options.ridge);
    let n = d.n_subjects() as f64;
    let dim = d.n_covariates() + 1;
    let m = d.n_cells() - 1;

    let mut params = match init {
        Some(model)
            if model.omega.nrows() == m && model.omega.ncols() == dim =>
        {
            standardizer.from_original(&model.omega)
        }
        _ => {
            // Intercepts at log cell-frequency ratios.
            let table = crate::data::cell_table(d);
            let flat: Vec<f64> = table.proportions.iter().flatten().copied().collect();
            let mut p = DMatrix::zeros(m, dim);
            for c in 1..d.n_cells() {
                p[(c - 1, 0)] = (flat[c] / flat[0]).ln();
            }
            p
        }
    };

    let mut probs = probabilities_from_design(objective.design(), &params);
    let ll_of = |probs: &DMatrix<f64>, params: &DMatrix<f64>| -> f64 {
        objective
            .cells
            .iter()
            .enumerate()
            .map(|(i, &c)| probs[(i, c)].ln())
            .sum::<f64>()
            - objective.penalty(params)
    };
    let mut ll = ll_of(&probs, &params);
    let mut iterations = 0;
    loop {
        let grad = objective.gradient_from_probs(&params, &probs);
        let gnorm = max_abs(&grad) / n;
        if gnorm <= options.grad_tol {
            if options.ridge == 0.0 && m > 0 && dim > 1 && max_abs(&params.columns(1, dim - 1).into_owned()) > SEPARATION_BOUND {
                return Err(MpsError::Separation(format!(
                    "coefficient magnitude exceeds {SEPARATION_BOUND} on the standardized scale"
                )));
            }
            let omega = standardizer.to_original(&params);
            return Ok(MpsModel {
                omega,
                n_studies: d.n_studies(),
                n_groups: d.n_groups(),
                converged: true,
                final_gradient_norm: gnorm,
                n_iterations: iterations,
                log_likelihood: ll,
                ridge: options.ridge,
                scaled_omega: params,
                standardizer,
            });
        }
        if iterations >= options.max_iter {
            return Err(MpsError::NonConvergence {
                iterations,
                gradient_norm: gnorm,
            });
        }
        if options.ridge == 0.0 && dim > 1 && max_abs(&params.columns(1, dim - 1).into_owned()) > SEPARATION_BOUND {
            return Err(MpsError::Separation(format!(
                "coefficient magnitude exceeds {SEPARATION_BOUND} on the standardized scale"
            )));
        }
        let h = objective.neg_hessian(&probs);
        let chol = Cholesky::new(h).ok_or(if options.ridge == 0.0 {
            MpsError::Separation("Hessian is numerically singular".into())
        } else {
            MpsError::Singular(options.ridge)
        })?;
        let g_flat = DVector::from_iterator(m * dim, grad.transpose().iter().copied());
        let step_flat = chol.solve(&g_flat);
        let step = DMatrix::from_row_slice(m, dim, step_flat.as_slice());

        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..MAX_HALVINGS {
            let candidate = &params + &step * t;
            let cand_probs = probabilities_from_design(objective.design(), &candidate);
            let cand_ll = ll_of(&cand_probs, &candidate);
            if cand_ll.is_finite() && cand_ll >= ll - 1e-12 * ll.abs().max(1.0) {
                params = candidate;
                probs = cand_probs;
                ll = cand_ll.max(ll);
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        iterations += 1;
        if !accepted {
            // No ascent possible along the Newton direction: treat as stalled.
            let grad = objective.gradient_from_probs(&params, &probs);
            return Err(MpsError::NonConvergence {
                iterations,
                gradient_norm: max_abs(&grad) / n,
            });
        }
    }
}

/// Cell probabilities for every subject of `d`.
pub fn predict_mps(m: &MpsModel, d: &Dataset) -> Result<MpsProbabilities, MpsError> {
    if m.n_studies != d.n_studies() || m.n_groups != d.n_groups() {
        return Err(MpsError::Dimension(format!(
            "model is {}x{}, dataset is {}x{}",
            m.n_studies,
            m.n_groups,
            d.n_studies(),
            d.n_groups()
        )));
    }
    if m.omega.ncols() != d.n_covariates() + 1 {
        return Err(MpsError::Dimension(format!(
            "model has {} covariates, dataset has {}",
            m.omega.ncols() - 1,
            d.n_covariates()
        )));
    }
    let design = m.standardizer.design(d.covariates());
    Ok(MpsProbabilities {
        probs: probabilities_from_design(&design, &m.scaled_omega),
        n_studies: m.n_studies,
        n_groups: m.n_groups,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy(n: usize, j: usize, k: usize, p: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        loop {
            let x = DMatrix::from_fn(n, p, |_, _| rng.random::<f64>() * 2.0 - 1.0);
            let mut study = Vec::new();
            let mut group = Vec::new();
            for i in 0..n {
                let shift = if p > 0 { x[(i, 0)] } else { 0.0 };
                let u: f64 = rng.random();
                let cell = ((u + 0.3 * shift).rem_euclid(1.0) * (j * k) as f64) as usize;
                study.push(cell / k);
                group.push(cell % k);
            }
            if let Ok(d) = Dataset::new(study, group, j, k, x, DMatrix::zeros(n, 1)) {
                return d;
            }
        }
    }

    #[test]
    fn all_zero_omega_is_uniform() {
        let d = toy(12, 2, 3, 2, 1);
        let m = MpsModel::from_coefficients(DMatrix::zeros(5, 3), 2, 3).unwrap();
        let p = predict_mps(&m, &d).unwrap();
        assert!(p.probs.iter().all(|&v| (v - 1.0 / 6.0).abs() < 1e-15));
    }

    #[test]
    fn softmax_arithmetic() {
        let mut out = [0.0; 2];
        softmax_with_reference(&[3f64.ln()], &mut out);
        assert!((out[0] - 0.25).abs() < 1e-15 && (out[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn intercept_only_matches_cell_proportions() {
        let base = toy(60, 2, 2, 1, 3);
        let d = Dataset::new(
            base.study().to_vec(),
            base.group().to_vec(),
            2,
            2,
            DMatrix::zeros(60, 0),
            DMatrix::zeros(60, 1),
        )
        .unwrap();
        let m = fit_mps(&d, &MpsOptions::default()).unwrap();
        let p = predict_mps(&m, &d).unwrap();
        let t = crate::data::cell_table(&d);
        for s in 0..2 {
            for z in 0..2 {
                assert!((p.get(0, s, z) - t.proportions[s][z]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn omega_rows_seven_by_two() {
        let d = toy(700, 7, 2, 3, 5);
        let m = fit_mps(&d, &MpsOptions { ridge: 1e-3, ..Default::default() }).unwrap();
        assert_eq!(m.omega.nrows(), 13);
        assert_eq!(m.omega.ncols(), 4);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let d = toy(80, 2, 2, 3, 7);
        let st = Standardizer::fit(d.covariates());
        let obj = MpsObjective::new(&d, &st, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let params = DMatrix::from_fn(3, 4, |_, _| rng.random::<f64>() * 2.0 - 1.0);
            let g = obj.gradient(&params);
            let h = 1e-5;
            for r in 0..3 {
                for c in 0..4 {
                    let mut up = params.clone();
                    up[(r, c)] += h;
                    let mut dn = params.clone();
                    dn[(r, c)] -= h;
                    let fd = (obj.value(&up) - obj.value(&dn)) / (2.0 * h);
                    let rel = (fd - g[(r, c)]).abs() / g[(r, c)].abs().max(1e-3);
                    assert!(rel < 1e-4, "rel err {rel}");
                }
            }
        }
    }

    #[test]
    fn hessian_matches_gradient_differences() {
        let d = toy(50, 2, 2, 2, 9);
        let st = Standardizer::fit(d.covariates());
        let obj = MpsObjective::new(&d, &st, 0.5);
        let params = DMatrix::from_fn(3, 3, |r, c| 0.1 * (r as f64) - 0.2 * (c as f64));
        let h = obj.neg_hessian(&probabilities_from_design(obj.design(), &params));
        let eps = 1e-6;
        for k in 0..9 {
            let mut up = params.clone();
            up[(k / 3, k % 3)] += eps;
            let mut dn = params.clone();
            dn[(k / 3, k % 3)] -= eps;
            let gd = (obj.gradient(&up) - obj.gradient(&dn)) / (2.0 * eps);
            for j in 0..9 {
                assert!((-gd[(j / 3, j % 3)] - h[(j, k)]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn separation_detected_without_ridge() {
        // Group perfectly determined by the sign of x.
        let x = DMatrix::from_column_slice(8, 1, &[-4.0, -3.0, -2.0, -1.0, 1.0, 2.0, 3.0, 4.0]);
        let d = Dataset::new(vec![0; 8], vec![0, 0, 0, 0, 1, 1, 1, 1], 1, 2, x, DMatrix::zeros(8, 1)).unwrap();
        let err = fit_mps(&d, &MpsOptions::default()).unwrap_err();
        assert!(matches!(err, MpsError::Separation(_)), "{err:?}");
        let ok = fit_mps(&d, &MpsOptions { ridge: 1e-6, max_iter: 200, ..Default::default() });
        assert!(ok.is_ok(), "{ok:?}");
    }

    #[test]
    fn warm_start_reaches_same_optimum() {
        let d = toy(120, 2, 2, 2, 13);
        let opts = MpsOptions::default();
        let cold = fit_mps(&d, &opts).unwrap();
        let warm = fit_mps_warm(&d, &opts, Some(&cold)).unwrap();
        assert!(warm.n_iterations <= 1);
        assert!((&cold.omega - &warm.omega).amax() < 1e-6);
    }

    #[test]
    fn dimension_mismatch() {
        let d = toy(20, 2, 2, 1, 2);
        let m = MpsModel::from_coefficients(DMatrix::zeros(3, 3), 2, 2).unwrap();
        assert!(matches!(predict_mps(&m, &d), Err(MpsError::Dimension(_))));
    }
}
