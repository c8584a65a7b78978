//! ESS-maximizing pseudo-population (FLEXOR).
//!
//! The outer loop alternates two steps. Step I sets the tilt to its
//! closed form `(sum_sz gamma_s^2 theta_z^2 / delta_sz)^-1` at the current
//! `(gamma, theta)`. Step II maximizes the Kish ESS of the resulting weights
//! over the feasible `(gamma, theta)`, with the tilt re-evaluated at each
//! candidate. Free simplex coordinates are mapped to an unconstrained space by
//! `v = floor + (1 - m * floor) * softmax(a)` and optimized with BFGS on a
//! central-difference gradient.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::FlexorError;
use crate::mps::MpsProbabilities;
use crate::weights::{compute_weights, PseudoPopulationSpec, Tilt, WeightSet, DEFAULT_PROBABILITY_FLOOR};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimplexMode {
    Fixed(Vec<f64>),
    Free,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSet {
    pub gamma_mode: SimplexMode,
    pub theta_mode: SimplexMode,
    /// Lower bound on each free simplex coordinate.
    pub floor: f64,
}

pub const DEFAULT_SIMPLEX_FLOOR: f64 = 1e-3;

fn valid_probability_vector(v: &[f64]) -> bool {
    !v.is_empty()
        && v.iter().all(|&x| x > 0.0 && x.is_finite())
        && (v.iter().sum::<f64>() - 1.0).abs() <= 1e-12
}

impl ConstraintSet {
    pub fn new(gamma_mode: SimplexMode, theta_mode: SimplexMode, floor: f64) -> Self {
        ConstraintSet {
            gamma_mode,
            theta_mode,
            floor,
        }
    }

    /// Free study shares, group prevalences fixed at `theta`.
    pub fn known_prevalence(theta: Vec<f64>) -> Self {
        Self::new(SimplexMode::Free, SimplexMode::Fixed(theta), DEFAULT_SIMPLEX_FLOOR)
    }

    pub fn all_free() -> Self {
        Self::new(SimplexMode::Free, SimplexMode::Free, DEFAULT_SIMPLEX_FLOOR)
    }

    pub fn validate(&self, n_studies: usize, n_groups: usize) -> Result<(), FlexorError> {
        if !(self.floor > 0.0) || self.floor * (n_studies.max(n_groups) as f64) >= 1.0 {
            return Err(FlexorError::Infeasible(format!(
                "floor {} must be positive and below 1/max(J, K)",
                self.floor
            )));
        }
        for (mode, len, name) in [(&self.gamma_mode, n_studies, "gamma"), (&self.theta_mode, n_groups, "theta")] {
            if let SimplexMode::Fixed(v) = mode {
                if v.len() != len {
                    return Err(FlexorError::Infeasible(format!(
                        "fixed {name} has length {}, expected {len}",
                        v.len()
                    )));
                }
                if !valid_probability_vector(v) {
                    return Err(FlexorError::Infeasible(format!("fixed {name} is not a probability vector")));
                }
            }
        }
        Ok(())
    }

    fn contains(&self, gamma: &[f64], theta: &[f64]) -> bool {
        let ok = |mode: &SimplexMode, v: &[f64]| match mode {
            SimplexMode::Fixed(f) => f.len() == v.len() && f.iter().zip(v).all(|(a, b)| (a - b).abs() <= 1e-12),
            SimplexMode::Free => valid_probability_vector(v) && v.iter().all(|&x| x >= self.floor * (1.0 - 1e-9)),
        };
        ok(&self.gamma_mode, gamma) && ok(&self.theta_mode, theta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlexorOptions {
    pub outer_tol: f64,
    pub max_outer: usize,
    pub n_restarts: usize,
    pub seed: u64,
    /// Lower bound on cell probabilities, as in [`compute_weights`].
    pub probability_floor: f64,
}

impl Default for FlexorOptions {
    fn default() -> Self {
        FlexorOptions {
            outer_tol: 1e-6,
            max_outer: 50,
            n_restarts: 5,
            seed: 0,
            probability_floor: DEFAULT_PROBABILITY_FLOOR,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestartSummary {
    pub restart: usize,
    pub init_gamma: Vec<f64>,
    pub init_theta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub theta: Vec<f64>,
    pub ess: f64,
    pub converged: bool,
    pub n_outer_iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlexorResult {
    pub spec: PseudoPopulationSpec,
    pub weights: WeightSet,
    /// Sample ESS at the start and after every outer iteration of the winning restart.
    pub trajectory: Vec<f64>,
    pub converged: bool,
    pub n_outer_iterations: usize,
    pub best_restart: usize,
    pub restarts: Vec<RestartSummary>,
}

/// Precomputed reciprocal cell probabilities for fast ESS evaluation.
struct EssProblem {
    inv_delta: Vec<f64>,
    cell: Vec<usize>,
    n_cells: usize,
    n_groups: usize,
}

impl EssProblem {
    fn new(probs: &MpsProbabilities, d: &Dataset, floor: f64) -> Self {
        let n_cells = probs.n_cells();
        let mut inv_delta = Vec::with_capacity(probs.n_subjects() * n_cells);
        for i in 0..probs.n_subjects() {
            for c in 0..n_cells {
                inv_delta.push(1.0 / probs.probs[(i, c)].max(floor));
            }
        }
        EssProblem {
            inv_delta,
            cell: (0..d.n_subjects()).map(|i| d.cell(i)).collect(),
            n_cells,
            n_groups: probs.n_groups,
        }
    }

    fn cell_products(&self, gamma: &[f64], theta: &[f64]) -> Vec<f64> {
        gamma.iter().flat_map(|g| theta.iter().map(move |t| g * t)).collect()
    }

    /// Kish ESS with the closed-form tilt evaluated at `(gamma, theta)`.
    fn ess_coupled(&self, gamma: &[f64], theta: &[f64]) -> f64 {
        let gt = self.cell_products(gamma, theta);
        let sq: Vec<f64> = gt.iter().map(|v| v * v).collect();
        let (mut s1, mut s2) = (0.0, 0.0);
        for (i, &c) in self.cell.iter().enumerate() {
            let row = &self.inv_delta[i * self.n_cells..(i + 1) * self.n_cells];
            let denom: f64 = row.iter().zip(&sq).map(|(a, b)| a * b).sum();
            let w = gt[c] * row[c] / denom;
            s1 += w;
            s2 += w * w;
        }
        s1 * s1 / s2
    }

    /// Kish ESS with per-subject tilt values held fixed.
    fn ess_fixed_tilt(&self, gamma: &[f64], theta: &[f64], eta: &[f64]) -> f64 {
        let k = self.n_groups;
        let (mut s1, mut s2) = (0.0, 0.0);
        for (i, &c) in self.cell.iter().enumerate() {
            let w = gamma[c / k] * theta[c % k] * eta[i] * self.inv_delta[i * self.n_cells + c];
            s1 += w;
            s2 += w * w;
        }
        s1 * s1 / s2
    }
}

/// Maps unconstrained parameters to a simplex whose coordinates are at least `floor`.
#[derive(Debug, Clone)]
struct SimplexMap {
    fixed: Option<Vec<f64>>,
    dim: usize,
    floor: f64,
}

impl SimplexMap {
    fn new(mode: &SimplexMode, dim: usize, floor: f64) -> Self {
        SimplexMap {
            fixed: match mode {
                SimplexMode::Fixed(v) => Some(v.clone()),
                SimplexMode::Free => None,
            },
            dim,
            floor,
        }
    }

    fn n_params(&self) -> usize {
        if self.fixed.is_some() {
            0
        } else {
            self.dim - 1
        }
    }

    fn to_simplex(&self, a: &[f64]) -> Vec<f64> {
        if let Some(v) = &self.fixed {
            return v.clone();
        }
        let max = a.iter().copied().fold(0.0f64, f64::max);
        let mut e: Vec<f64> = std::iter::once(0.0).chain(a.iter().copied()).map(|x| (x - max).exp()).collect();
        let total: f64 = e.iter().sum();
        let scale = 1.0 - self.dim as f64 * self.floor;
        for x in &mut e {
            *x = self.floor + scale * *x / total;
        }
        e
    }

    fn to_params(&self, v: &[f64]) -> Vec<f64> {
        if self.fixed.is_some() {
            return Vec::new();
        }
        let tiny = 1e-300;
        let base = (v[0] - self.floor).max(tiny);
        v[1..].iter().map(|&x| ((x - self.floor).max(tiny) / base).ln()).collect()
    }
}

/// Quasi-Newton maximization with a central-difference gradient and
/// backtracking line search. Never returns a point worse than `x0`.
fn bfgs_maximize(f: &dyn Fn(&[f64]) -> f64, x0: Vec<f64>) -> (Vec<f64>, f64) {
    const MAX_ITER: usize = 500;
    let n = x0.len();
    let mut x = x0;
    let mut fx = f(&x);
    if n == 0 || !fx.is_finite() {
        return (x, fx);
    }
    let neg = |p: &[f64]| -f(p);
    let grad = |p: &[f64]| -> Vec<f64> {
        let mut g = vec![0.0; n];
        let mut q = p.to_vec();
        for j in 0..n {
            let h = 1e-6 * p[j].abs().max(1.0);
            q[j] = p[j] + h;
            let up = neg(&q);
            q[j] = p[j] - h;
            let down = neg(&q);
            q[j] = p[j];
            g[j] = (up - down) / (2.0 * h);
        }
        g
    };
    // Inverse Hessian approximation of the minimized objective -f.
    let mut hinv = vec![0.0; n * n];
    for j in 0..n {
        hinv[j * n + j] = 1.0;
    }
    let mut g = grad(&x);
    let mut fmin = -fx;
    for _ in 0..MAX_ITER {
        let gnorm = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if gnorm < 1e-10 * fmin.abs().max(1.0) {
            break;
        }
        let mut dir: Vec<f64> = (0..n).map(|r| -(0..n).map(|c| hinv[r * n + c] * g[c]).sum::<f64>()).collect();
        let mut slope: f64 = dir.iter().zip(&g).map(|(a, b)| a * b).sum();
        if slope >= 0.0 {
            for j in 0..n * n {
                hinv[j] = 0.0;
            }
            for j in 0..n {
                hinv[j * n + j] = 1.0;
            }
            dir = g.iter().map(|v| -v).collect();
            slope = -g.iter().map(|v| v * v).sum::<f64>();
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let trial: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + step * d).collect();
            let ft = neg(&trial);
            if ft.is_finite() && ft <= fmin + 1e-4 * step * slope {
                accepted = Some((trial, ft));
                break;
            }
            step *= 0.5;
        }
        let Some((xn, fnew)) = accepted else { break };
        let gn = grad(&xn);
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        let improvement = fmin - fnew;
        x = xn;
        g = gn;
        fmin = fnew;
        if sy > 1e-14 {
            let hy: Vec<f64> = (0..n).map(|r| (0..n).map(|c| hinv[r * n + c] * y[c]).sum()).collect();
            let yhy: f64 = y.iter().zip(&hy).map(|(a, b)| a * b).sum();
            let rho = 1.0 / sy;
            for r in 0..n {
                for c in 0..n {
                    hinv[r * n + c] += (1.0 + yhy * rho) * rho * s[r] * s[c] - rho * (hy[r] * s[c] + s[r] * hy[c]);
                }
            }
        }
        if improvement <= 1e-15 * fmin.abs().max(1.0) {
            break;
        }
    }
    fx = -fmin;
    (x, fx)
}

/// Maximizes `objective(gamma, theta)` over the constraint set starting from
/// `init`. The returned value is never below the objective at `init`.
pub fn maximize_over_constraints(
    constraints: &ConstraintSet,
    init: (&[f64], &[f64]),
    objective: &(dyn Fn(&[f64], &[f64]) -> f64 + Sync),
) -> Result<(Vec<f64>, Vec<f64>, f64), FlexorError> {
    let (g0, t0) = init;
    constraints.validate(g0.len(), t0.len())?;
    if !constraints.contains(g0, t0) {
        return Err(FlexorError::Infeasible("initial (gamma, theta) is outside the constraint set".into()));
    }
    let f0 = objective(g0, t0);
    if !f0.is_finite() {
        return Err(FlexorError::NonFiniteObjective);
    }
    let gmap = SimplexMap::new(&constraints.gamma_mode, g0.len(), constraints.floor);
    let tmap = SimplexMap::new(&constraints.theta_mode, t0.len(), constraints.floor);
    let ng = gmap.n_params();
    if ng + tmap.n_params() == 0 {
        return Ok((g0.to_vec(), t0.to_vec(), f0));
    }
    let unpack = |a: &[f64]| (gmap.to_simplex(&a[..ng]), tmap.to_simplex(&a[ng..]));
    let f = |a: &[f64]| {
        let (g, t) = unpack(a);
        objective(&g, &t)
    };
    let mut a0 = gmap.to_params(g0);
    a0.extend(tmap.to_params(t0));
    let (a, fa) = bfgs_maximize(&f, a0);
    if fa.is_finite() && fa >= f0 {
        let (g, t) = unpack(&a);
        Ok((g, t, fa))
    } else {
        Ok((g0.to_vec(), t0.to_vec(), f0))
    }
}

/// Step II: maximizes sample ESS over feasible `(gamma, theta)`.
///
/// With `eta = None` the closed-form tilt is re-evaluated at each candidate;
/// with `Some(eta)` the per-subject tilt values are held fixed.
pub fn optimize_gamma_theta(
    probs: &MpsProbabilities,
    d: &Dataset,
    constraints: &ConstraintSet,
    eta: Option<&[f64]>,
    init: (&[f64], &[f64]),
    probability_floor: f64,
) -> Result<(Vec<f64>, Vec<f64>), FlexorError> {
    check_dims(probs, d)?;
    if let Some(e) = eta {
        if e.len() != d.n_subjects() {
            return Err(FlexorError::Infeasible("tilt values do not match the dataset".into()));
        }
    }
    let problem = EssProblem::new(probs, d, probability_floor);
    let objective = |g: &[f64], t: &[f64]| match eta {
        Some(e) => problem.ess_fixed_tilt(g, t, e),
        None => problem.ess_coupled(g, t),
    };
    let (g, t, _) = maximize_over_constraints(constraints, init, &objective)?;
    Ok((g, t))
}

fn check_dims(probs: &MpsProbabilities, d: &Dataset) -> Result<(), FlexorError> {
    if probs.n_subjects() != d.n_subjects() || probs.n_studies != d.n_studies() || probs.n_groups != d.n_groups() {
        return Err(FlexorError::Infeasible("probabilities do not match the dataset".into()));
    }
    Ok(())
}

/// Feasible starting point: uniform for restart 0, floor-shifted Dirichlet(1) otherwise.
fn initial_point(mode: &SimplexMode, dim: usize, floor: f64, rng: Option<&mut ChaCha8Rng>) -> Vec<f64> {
    match mode {
        SimplexMode::Fixed(v) => v.clone(),
        SimplexMode::Free => match rng {
            None => vec![1.0 / dim as f64; dim],
            Some(rng) => {
                let e: Vec<f64> = (0..dim).map(|_| Exp1.sample(rng)).collect();
                let total: f64 = e.iter().sum();
                let scale = 1.0 - dim as f64 * floor;
                e.iter().map(|x| floor + scale * x / total).collect()
            }
        },
    }
}

struct RestartRun {
    summary: RestartSummary,
    trajectory: Vec<f64>,
}

fn run_restart(
    problem: &EssProblem,
    constraints: &ConstraintSet,
    options: &FlexorOptions,
    restart: usize,
    n_studies: usize,
    n_groups: usize,
) -> Result<RestartRun, FlexorError> {
    let (g0, t0) = if restart == 0 {
        (
            initial_point(&constraints.gamma_mode, n_studies, constraints.floor, None),
            initial_point(&constraints.theta_mode, n_groups, constraints.floor, None),
        )
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
        rng.set_stream(restart as u64);
        let g = initial_point(&constraints.gamma_mode, n_studies, constraints.floor, Some(&mut rng));
        let t = initial_point(&constraints.theta_mode, n_groups, constraints.floor, Some(&mut rng));
        (g, t)
    };
    let objective = |g: &[f64], t: &[f64]| problem.ess_coupled(g, t);
    let (mut gamma, mut theta) = (g0.clone(), t0.clone());
    // Step I at the starting point.
    let mut trajectory = vec![objective(&gamma, &theta)];
    if !trajectory[0].is_finite() {
        return Err(FlexorError::NonFiniteObjective);
    }
    let mut converged = false;
    let mut n_outer = 0;
    while n_outer < options.max_outer {
        n_outer += 1;
        // Step II, followed by Step I at the new (gamma, theta).
        let (g, t, value) = maximize_over_constraints(constraints, (&gamma, &theta), &objective)?;
        gamma = g;
        theta = t;
        let prev = *trajectory.last().unwrap();
        trajectory.push(value.max(prev));
        if (value - prev).abs() <= options.outer_tol * prev.abs() {
            converged = true;
            break;
        }
    }
    Ok(RestartRun {
        summary: RestartSummary {
            restart,
            init_gamma: g0,
            init_theta: t0,
            gamma,
            theta,
            ess: *trajectory.last().unwrap(),
            converged,
            n_outer_iterations: n_outer,
        },
        trajectory,
    })
}

/// Two-step ESS maximization with multiple restarts; the converged run with
/// the largest ESS wins, ties going to the lowest restart index.
pub fn optimize_flexor(
    probs: &MpsProbabilities,
    d: &Dataset,
    constraints: &ConstraintSet,
    options: &FlexorOptions,
) -> Result<FlexorResult, FlexorError> {
    check_dims(probs, d)?;
    let (j, k) = (d.n_studies(), d.n_groups());
    constraints.validate(j, k)?;
    let problem = EssProblem::new(probs, d, options.probability_floor);
    let n_restarts = options.n_restarts.max(1);
    let runs: Vec<Result<RestartRun, FlexorError>> = (0..n_restarts)
        .into_par_iter()
        .map(|r| run_restart(&problem, constraints, options, r, j, k))
        .collect();
    let runs: Vec<RestartRun> = runs.into_iter().collect::<Result<_, _>>()?;
    let mut best: Option<usize> = None;
    for (idx, run) in runs.iter().enumerate() {
        if run.summary.converged && best.is_none_or(|b| run.summary.ess > runs[b].summary.ess) {
            best = Some(idx);
        }
    }
    let Some(best) = best else {
        let top = (0..runs.len())
            .reduce(|a, b| if runs[b].summary.ess > runs[a].summary.ess { b } else { a })
            .unwrap();
        return Err(FlexorError::NonConvergence {
            max_outer: options.max_outer,
            best_ess: runs[top].summary.ess,
            best_trajectory: runs[top].trajectory.clone(),
        });
    };
    let run = &runs[best];
    let spec = PseudoPopulationSpec {
        tilt: Tilt::Flexor,
        gamma: run.summary.gamma.clone(),
        theta: run.summary.theta.clone(),
    };
    let weights = compute_weights(&spec, probs, d, options.probability_floor)?;
    Ok(FlexorResult {
        spec,
        weights,
        trajectory: run.trajectory.clone(),
        converged: true,
        n_outer_iterations: run.summary.n_outer_iterations,
        best_restart: best,
        restarts: runs.into_iter().map(|r| r.summary).collect(),
    })
}
