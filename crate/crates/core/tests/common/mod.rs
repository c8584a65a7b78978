//! Independent oracles and property checks shared by the integration suites.
#![allow(dead_code)]

use flexor_core::estimation::{feature_matrix, moments_from_features, weighted_cdf};
use flexor_core::flexor::{optimize_flexor, ConstraintSet, FlexorOptions};
use flexor_core::mps::{fit_mps, fit_mps_warm, predict_mps, MpsModel, MpsOptions};
use flexor_core::simulation::{generate_replicate, ScenarioConfig, Similarity, SimulationPool};
use flexor_core::uncertainty::{bootstrap, known_mps_variance, BootstrapOptions, SandwichContext};
use flexor_core::{
    compute_weights, evaluate, run_pipeline, AnalysisPlan, Dataset, Estimand, FeatureSpec, MethodSpec,
    PseudoPopulationSpec, Tilt, Transform,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const PROPERTY_CASES: u32 = 256;

/// Random dataset with every cell filled. Cell membership leans on the
/// first covariate so that propensities are not flat.
pub fn random_dataset(n: usize, j: usize, k: usize, p: usize, n_outcomes: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cells = j * k;
    assert!(n >= 2 * cells);
    let x = DMatrix::from_fn(n, p, |_, _| StandardNormal.sample(&mut rng));
    let mut cell = Vec::with_capacity(n);
    for i in 0..n {
        if i < 2 * cells {
            cell.push(i % cells);
        } else {
            let lean = if x[(i, 0)] > 0.0 { cells / 2 } else { 0 };
            let c = if rng.random::<f64>() < 0.4 { (lean + rng.random_range(0..cells.div_ceil(2))) % cells } else { rng.random_range(0..cells) };
            cell.push(c);
        }
    }
    let y = DMatrix::from_fn(n, n_outcomes, |i, l| {
        let e: f64 = StandardNormal.sample(&mut rng);
        x[(i, 0)] * (l + 1) as f64 + (cell[i] % k) as f64 + e
    });
    Dataset::new(cell.iter().map(|c| c / k).collect(), cell.iter().map(|c| c % k).collect(), j, k, x, y).unwrap()
}

// ---------------------------------------------------------------------------
// Multinomial-logit MLE by coordinate-wise grid refinement.

fn raw_log_likelihood(d: &Dataset, params: &[f64]) -> f64 {
    let cells = d.n_cells();
    let dim = d.n_covariates() + 1;
    let mut ll = 0.0;
    for i in 0..d.n_subjects() {
        let mut eta = vec![0.0; cells];
        for c in 1..cells {
            let b = &params[(c - 1) * dim..c * dim];
            eta[c] = b[0] + (0..dim - 1).map(|u| b[u + 1] * d.covariates()[(i, u)]).sum::<f64>();
        }
        let max = eta.iter().copied().fold(f64::MIN, f64::max);
        let lse = max + eta.iter().map(|e| (e - max).exp()).sum::<f64>().ln();
        ll += eta[d.cell(i)] - lse;
    }
    ll
}

fn raw_probabilities(d: &Dataset, params: &[f64], i: usize) -> Vec<f64> {
    let cells = d.n_cells();
    let dim = d.n_covariates() + 1;
    let mut eta = vec![0.0; cells];
    for c in 1..cells {
        let b = &params[(c - 1) * dim..c * dim];
        eta[c] = b[0] + (0..dim - 1).map(|u| b[u + 1] * d.covariates()[(i, u)]).sum::<f64>();
    }
    let max = eta.iter().copied().fold(f64::MIN, f64::max);
    let e: Vec<f64> = eta.iter().map(|v| (v - max).exp()).collect();
    let t: f64 = e.iter().sum();
    e.iter().map(|v| v / t).collect()
}

/// Maximizes the log-likelihood one coordinate at a time: a 21-point grid
/// around the current value, shrunk tenfold until the step is negligible.
pub fn grid_search_mle(d: &Dataset) -> Vec<f64> {
    let q = (d.n_cells() - 1) * (d.n_covariates() + 1);
    let mut params = vec![0.0; q];
    for _ in 0..20_000 {
        let mut moved = 0.0f64;
        for k in 0..q {
            let start = params[k];
            let mut width = 4.0;
            while width > 1e-13 {
                let centre = params[k];
                let step = width / 10.0;
                let mut best = (f64::MIN, centre);
                for g in -10..=10 {
                    params[k] = centre + g as f64 * step;
                    let v = raw_log_likelihood(d, &params);
                    if v > best.0 {
                        best = (v, params[k]);
                    }
                }
                params[k] = best.1;
                width = step;
            }
            moved = moved.max((params[k] - start).abs());
        }
        if moved < 1e-11 {
            break;
        }
    }
    params
}

/// Largest absolute difference between library and grid-search probabilities
/// on a 20-subject, 2-study, 2-group, 1-covariate instance.
pub fn mps_grid_oracle_error() -> f64 {
    let d = random_dataset(20, 2, 2, 1, 1, 11);
    let model = fit_mps(&d, &MpsOptions::default()).unwrap();
    let probs = predict_mps(&model, &d).unwrap();
    let params = grid_search_mle(&d);
    let mut worst = 0.0f64;
    for i in 0..d.n_subjects() {
        let p = raw_probabilities(&d, &params, i);
        for c in 0..d.n_cells() {
            worst = worst.max((p[c] - probs.probs[(i, c)]).abs());
        }
    }
    worst
}

// ---------------------------------------------------------------------------
// ESS-optimal pseudo-population by exhaustive grid.

fn kish(w: &[f64]) -> f64 {
    let s1: f64 = w.iter().sum();
    let s2: f64 = w.iter().map(|v| v * v).sum();
    s1 * s1 / s2
}

/// Sample ESS of the optimal-tilt weights at `(gamma, theta)`, coded from the
/// closed form `gamma_s theta_z eta / delta_sz` with `eta = 1 / sum g^2 t^2 / delta`.
pub fn optimal_tilt_ess(delta: &DMatrix<f64>, d: &Dataset, gamma: &[f64], theta: &[f64]) -> f64 {
    let k = theta.len();
    let w: Vec<f64> = (0..d.n_subjects())
        .map(|i| {
            let mut acc = 0.0;
            for (s, g) in gamma.iter().enumerate() {
                for (z, t) in theta.iter().enumerate() {
                    acc += (g * t).powi(2) / delta[(i, s * k + z)].max(1e-6);
                }
            }
            let c = d.cell(i);
            gamma[c / k] * theta[c % k] / (acc * delta[(i, c)].max(1e-6))
        })
        .collect();
    kish(&w)
}

/// `(library ESS, grid ESS)` on a 60-subject, 2-study, 2-group instance with
/// both simplices free, grid step 0.01.
pub fn flexor_grid_oracle() -> (f64, f64) {
    let d = random_dataset(60, 2, 2, 1, 1, 5);
    let model = fit_mps(&d, &MpsOptions::default()).unwrap();
    let probs = predict_mps(&model, &d).unwrap();
    let opts = FlexorOptions::default();
    let r = optimize_flexor(&probs, &d, &ConstraintSet::all_free(), &opts).unwrap();
    let floor = 1e-3;
    let mut grid: Vec<f64> = (1..100).map(|v| v as f64 / 100.0).collect();
    grid.insert(0, floor);
    grid.push(1.0 - floor);
    let mut best = 0.0f64;
    for &g in &grid {
        for &t in &grid {
            best = best.max(optimal_tilt_ess(&probs.probs, &d, &[g, 1.0 - g], &[t, 1.0 - t]));
        }
    }
    (r.weights.ess, best)
}

/// Hand-evaluated ratio sums on 3-subject cases; returns whether all agree exactly.
pub fn three_subject_hand_sums() -> bool {
    let y: DMatrix<f64> = DMatrix::from_row_slice(3, 1, &[1.0, 2.0, 3.0]);
    let groups = [0usize, 0, 0];
    // Weights (1,2,1): mean (1+4+3)/4 = 2, second moment (1+8+9)/4 = 4.5.
    let m = moments_from_features(&[1.0, 2.0, 1.0], &groups, 1, &DMatrix::from_fn(3, 2, |i, j| y[(i, 0)].powi(j as i32 + 1))).unwrap();
    let a = m.lambda_hat[(0, 0)] == 2.0 && m.lambda_hat[(0, 1)] == 4.5;
    // Two groups, weights (1,3,2): group 1 holds y = 1, 2 -> (1+6)/4, group 2 holds y = 3.
    let m2 = moments_from_features(&[1.0, 3.0, 2.0], &[0, 0, 1], 2, &y).unwrap();
    let b = m2.lambda_hat[(0, 0)] == 1.75 && m2.lambda_hat[(1, 0)] == 3.0;
    // Indicator feature 1{y <= 2} with weights (1,3,0.5): (1+3)/4.5.
    let ind = DMatrix::from_fn(3, 1, |i, _| f64::from(y[(i, 0)] <= 2.0));
    let m3 = moments_from_features(&[1.0, 3.0, 0.5], &groups, 1, &ind).unwrap();
    let c = m3.lambda_hat[(0, 0)] == 4.0 / 4.5;
    a && b && c
}

// ---------------------------------------------------------------------------
// Sandwich oracles.

/// One study, two groups, a bounded covariate and a logistic group
/// propensity with slope `slope`.
pub fn single_study_dataset(n: usize, slope: f64, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
    let mut z: Vec<usize> = x
        .iter()
        .map(|&v| usize::from(rng.random::<f64>() < 1.0 / (1.0 + (-slope * v).exp())))
        .collect();
    z[0] = 0;
    z[1] = 1;
    let y: Vec<f64> = (0..n)
        .map(|i| {
            let e: f64 = StandardNormal.sample(&mut rng);
            1.5 * x[i] + z[i] as f64 + 0.5 * e
        })
        .collect();
    Dataset::new(vec![0; n], z, 1, 2, DMatrix::from_vec(n, 1, x), DMatrix::from_vec(n, 1, y)).unwrap()
}

pub fn ic_group_mean(d: &Dataset, z: usize) -> f64 {
    let model = fit_mps(d, &MpsOptions::default()).unwrap();
    let probs = predict_mps(&model, d).unwrap();
    let w = compute_weights(&PseudoPopulationSpec::uniform(Tilt::Ic, 1, 2), &probs, d, 1e-6).unwrap();
    let f = feature_matrix(d, &[Transform::Component(1)]);
    moments_from_features(&w.rho_tilde, d.group(), 2, &f).unwrap().lambda_hat[(z, 0)]
}

/// `(sandwich variance, delete-one jackknife variance)` of the IC-weighted
/// group-1 mean on a 1-study, 2-group, 50-subject instance (raw scale).
pub fn jackknife_oracle() -> (f64, f64) {
    jackknife_oracle_seeded(0)
}

pub fn jackknife_oracle_seeded(seed: u64) -> (f64, f64) {
    let d = single_study_dataset(50, 0.5, seed);
    let n = d.n_subjects();
    let model = fit_mps(&d, &MpsOptions::default()).unwrap();
    let f = feature_matrix(&d, &[Transform::Component(1)]);
    let ctx = SandwichContext::new(&model, &d).unwrap();
    let (v, _) = ctx.variance(&PseudoPopulationSpec::uniform(Tilt::Ic, 1, 2), 1e-6, &f).unwrap();
    let sandwich = v.group(0)[(0, 0)] / n as f64;
    let loo: Vec<f64> = (0..n)
        .map(|i| {
            let keep: Vec<usize> = (0..n).filter(|&t| t != i).collect();
            ic_group_mean(&d.subset(&keep).unwrap(), 0)
        })
        .collect();
    let mean = loo.iter().sum::<f64>() / n as f64;
    let jack = (n - 1) as f64 / n as f64 * loo.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
    (sandwich, jack)
}

fn flexor_weight_raw(gamma: &[f64], theta: &[f64], p: &[f64], cell: usize) -> f64 {
    let k = theta.len();
    let acc: f64 = (0..p.len()).map(|c| (gamma[c / k] * theta[c % k]).powi(2) / p[c]).sum();
    gamma[cell / k] * theta[cell % k] / (acc * p[cell])
}

/// Stacked estimating equations of the raw-scale MPS coefficients and the
/// FLEXOR-weighted group moments, with a finite-difference Jacobian.
/// Returns the maximum relative difference between the library sandwich
/// and `A^-1 B A^-T` on the moment block.
pub fn stacked_sandwich_oracle() -> f64 {
    let d = random_dataset(120, 2, 2, 1, 1, 21);
    let model = fit_mps(&d, &MpsOptions::default()).unwrap();
    let gamma = [0.35, 0.65];
    let theta = [0.55, 0.45];
    let spec = PseudoPopulationSpec::new(Tilt::Flexor, gamma.to_vec(), theta.to_vec()).unwrap();
    let transforms = [Transform::Component(1), Transform::Power(1, 2)];
    let feats = feature_matrix(&d, &transforms);
    let (n, cells, k, m) = (d.n_subjects(), d.n_cells(), d.n_groups(), transforms.len());
    let dim = d.n_covariates() + 1;
    let q = (cells - 1) * dim;
    let omega: Vec<f64> = (0..cells - 1).flat_map(|c| (0..dim).map(move |u| (c, u))).map(|(c, u)| model.omega[(c, u)]).collect();
    let ctx = SandwichContext::new(&model, &d).unwrap();
    let (lib, g) = ctx.variance(&spec, 1e-6, &feats).unwrap();
    let mut theta_all = omega.clone();
    for z in 0..k {
        for j in 0..m {
            theta_all.push(g.lambda_hat[(z, j)]);
        }
    }
    let psi = |par: &[f64], i: usize| -> Vec<f64> {
        let p = raw_probabilities(&d, &par[..q], i);
        let cell = d.cell(i);
        let mut out = Vec::with_capacity(par.len());
        for c in 1..cells {
            let y = f64::from(cell == c);
            for u in 0..dim {
                let xu = if u == 0 { 1.0 } else { d.covariates()[(i, u - 1)] };
                out.push((y - p[c]) * xu);
            }
        }
        let w = flexor_weight_raw(&gamma, &theta, &p, cell);
        let z = d.group()[i];
        for zz in 0..k {
            for j in 0..m {
                let lam = par[q + zz * m + j];
                out.push(if zz == z { w * (feats[(i, j)] - lam) } else { 0.0 });
            }
        }
        out
    };
    let dimall = theta_all.len();
    let mut a = DMatrix::zeros(dimall, dimall);
    let mut b = DMatrix::zeros(dimall, dimall);
    for i in 0..n {
        let base = DVector::from_vec(psi(&theta_all, i));
        b += &base * base.transpose();
        for col in 0..dimall {
            let h = 1e-6 * theta_all[col].abs().max(1.0);
            let mut up = theta_all.clone();
            let mut dn = theta_all.clone();
            up[col] += h;
            dn[col] -= h;
            let (pu, pd) = (psi(&up, i), psi(&dn, i));
            for row in 0..dimall {
                a[(row, col)] -= (pu[row] - pd[row]) / (2.0 * h);
            }
        }
    }
    a /= n as f64;
    b /= n as f64;
    let ainv = a.try_inverse().unwrap();
    let v = &ainv * b * ainv.transpose();
    let mut worst = 0.0f64;
    let scale = lib.joint.iter().fold(0.0f64, |acc, x| acc.max(x.abs()));
    for r in 0..k * m {
        for c in 0..k * m {
            worst = worst.max((v[(q + r, q + c)] - lib.joint[(r, c)]).abs() / scale);
        }
    }
    worst
}

// ---------------------------------------------------------------------------
// Bootstrap resampling oracle.

fn type7(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// `(library interval, oracle interval)` for the IC group-1 mean on a
/// 30-subject instance; the oracle re-implements stratified resampling with
/// the documented per-replicate stream layout.
pub fn bootstrap_resampling_oracle() -> ((f64, f64), (f64, f64)) {
    let d = random_dataset(30, 1, 2, 1, 1, 2);
    let plan = AnalysisPlan {
        methods: vec![MethodSpec::new("IC", Tilt::Ic)],
        estimands: vec![Estimand {
            name: "mean".into(),
            feature: FeatureSpec::mean(1),
        }],
        ..AnalysisPlan::default()
    };
    let full = run_pipeline(&d, &plan, None, None).unwrap();
    let opts = BootstrapOptions {
        n_boot: 40,
        seed: 77,
        ..BootstrapOptions::default()
    };
    let res = bootstrap(&d, &plan, &full, &opts).unwrap();
    let lib = res.interval(0, 0, 0, 0.0);

    let mut members = vec![Vec::new(); d.n_cells()];
    for i in 0..d.n_subjects() {
        members[d.cell(i)].push(i);
    }
    let mut reps = Vec::new();
    for b in 0..opts.n_boot {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rng.set_stream((b as u64) << 16);
        let mut idx = Vec::new();
        for cell in &members {
            for _ in 0..cell.len() {
                idx.push(cell[rng.random_range(0..cell.len())]);
            }
        }
        let sub = d.subset(&idx).unwrap();
        let model: MpsModel = fit_mps_warm(&sub, &MpsOptions::default(), Some(&full.model)).unwrap();
        let probs = predict_mps(&model, &sub).unwrap();
        let w = compute_weights(&PseudoPopulationSpec::uniform(Tilt::Ic, 1, 2), &probs, &sub, 1e-6).unwrap();
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..sub.n_subjects() {
            if sub.group()[i] == 0 {
                num += w.rho_tilde[i] * sub.outcomes()[(i, 0)];
                den += w.rho_tilde[i];
            }
        }
        reps.push(num / den);
    }
    reps.sort_by(f64::total_cmp);
    ((lib.lower, lib.upper), (type7(&reps, 0.025), type7(&reps, 0.975)))
}

// ---------------------------------------------------------------------------
// Reductions to single-study weighting schemes.

/// Max relative deviation from a constant ratio between `a` and `b`.
pub fn ratio_spread(a: &[f64], b: &[f64]) -> f64 {
    let r: Vec<f64> = a.iter().zip(b).map(|(x, y)| x / y).collect();
    let r0 = r[0];
    r.iter().map(|v| (v / r0 - 1.0).abs()).fold(0.0, f64::max)
}

/// `(IC vs inverse probability, IGO vs overlap)` ratio deviations for one study.
pub fn reduction_deviations() -> (f64, f64) {
    let d = single_study_dataset(200, 0.8, 4);
    let model = fit_mps(&d, &MpsOptions::default()).unwrap();
    let probs = predict_mps(&model, &d).unwrap();
    let ic = compute_weights(&PseudoPopulationSpec::uniform(Tilt::Ic, 1, 2), &probs, &d, 1e-6).unwrap();
    let igo = compute_weights(&PseudoPopulationSpec::uniform(Tilt::Igo, 1, 2), &probs, &d, 1e-6).unwrap();
    let e: Vec<f64> = (0..d.n_subjects()).map(|i| probs.probs[(i, 1)]).collect();
    let ipw: Vec<f64> = (0..d.n_subjects())
        .map(|i| if d.group()[i] == 1 { 1.0 / e[i] } else { 1.0 / (1.0 - e[i]) })
        .collect();
    let overlap: Vec<f64> = (0..d.n_subjects())
        .map(|i| if d.group()[i] == 1 { 1.0 - e[i] } else { e[i] })
        .collect();
    (ratio_spread(&ic.rho_tilde, &ipw), ratio_spread(&igo.rho_tilde, &overlap))
}

// ---------------------------------------------------------------------------
// Optimality of the closed-form tilt.

/// `(ESS at the optimal tilt, best ESS over 50 perturbed tilts)` for fixed
/// `(gamma, theta)` on a simulated 5000-subject sample with its true MPS.
pub fn optimal_tilt_versus_perturbations() -> (f64, f64) {
    let cfg = ScenarioConfig {
        n_subjects: 5000,
        ..ScenarioConfig::new(Similarity::Low)
    };
    let pool = SimulationPool::synthetic(&cfg).unwrap();
    let rep = generate_replicate(&cfg, &pool, 0).unwrap();
    let d = &rep.dataset;
    let j = d.n_studies();
    let gamma = vec![1.0 / j as f64; j];
    let theta = rep.truth.theta.clone();
    let delta = &rep.true_probs.probs;
    let k = theta.len();
    let weights_for = |log_shift: &dyn Fn(usize) -> f64| -> Vec<f64> {
        (0..d.n_subjects())
            .map(|i| {
                let acc: f64 = (0..d.n_cells()).map(|c| (gamma[c / k] * theta[c % k]).powi(2) / delta[(i, c)]).sum();
                let c = d.cell(i);
                gamma[c / k] * theta[c % k] * (log_shift(i).exp() / acc) / delta[(i, c)]
            })
            .collect()
    };
    let best = kish(&weights_for(&|_| 0.0));
    let sums: Vec<f64> = (0..d.n_subjects()).map(|i| pool.sums[rep.pool_rows[i]]).collect();
    let mean = sums.iter().sum::<f64>() / sums.len() as f64;
    let sd = (sums.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / sums.len() as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut challenger = 0.0f64;
    for _ in 0..50 {
        let a: f64 = rng.random_range(-0.5..0.5);
        let b: f64 = rng.random_range(-0.2..0.2);
        let c: f64 = rng.random_range(0.0..0.3);
        let noise: Vec<f64> = (0..pool.covariates.nrows()).map(|_| StandardNormal.sample(&mut rng)).collect();
        let shift = |i: usize| {
            let u = (sums[i] - mean) / sd;
            a * u + b * (u * u - 1.0) + c * noise[rep.pool_rows[i]]
        };
        challenger = challenger.max(kish(&weights_for(&shift)));
    }
    (best, challenger)
}

// ---------------------------------------------------------------------------
// Property checks. Each returns the first counterexample as an error.

/// Fixed-seed runner so that every run checks the same instances.
fn runner() -> TestRunner {
    let config = Config {
        cases: PROPERTY_CASES,
        failure_persistence: None,
        ..Config::default()
    };
    TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

fn report(r: Result<(), proptest::test_runner::TestError<impl std::fmt::Debug>>) -> Result<(), String> {
    r.map_err(|e| e.to_string())
}

fn dataset_strategy() -> impl Strategy<Value = (usize, usize, u64, usize)> {
    (1usize..=3, 1usize..=3, any::<u64>(), 0usize..20)
}

fn build((j, k, seed, extra): (usize, usize, u64, usize)) -> Dataset {
    random_dataset(2 * j * k + extra + 2, j, k, 2, 2, seed)
}

fn random_weights(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    (0..n).map(|_| rng.random_range(0.01..5.0)).collect()
}

fn estimand_suite(d: &Dataset) -> Vec<FeatureSpec> {
    let k = d.n_groups();
    let mut out = vec![
        FeatureSpec::mean(1),
        FeatureSpec::sd(2),
        FeatureSpec::covariance(1, 2),
        FeatureSpec::correlation(1, 2),
        FeatureSpec::cdf_at(1, &[-1.0, 0.0, 1.0], 2),
        FeatureSpec::median(1, &[-2.0, -1.0, 0.0, 1.0, 2.0]),
    ];
    if k >= 2 {
        out.push(FeatureSpec::mean_difference(1, 1, 2));
    }
    out
}

fn estimates(weights: &[f64], d: &Dataset) -> Vec<Option<Vec<f64>>> {
    estimand_suite(d)
        .iter()
        .map(|f| {
            let g = moments_from_features(weights, d.group(), d.n_groups(), &feature_matrix(d, &f.transforms)).ok()?;
            evaluate(&g, f).ok().map(|e| e.values())
        })
        .collect()
}

/// Every estimator is unchanged when all weights are multiplied by a power
/// of two (bit-exact) or by an arbitrary positive constant (1e-9 relative;
/// variance-type functionals subtract nearly equal moments, so rounding in
/// the rescaled weights is amplified).
pub fn property_weight_scale_invariance() -> Result<(), String> {
    report(runner().run(&(dataset_strategy(), -20i32..20, 0.001f64..1000.0), |(spec, e, c)| {
        let d = build(spec);
        let w = random_weights(d.n_subjects(), spec.2);
        let base = estimates(&w, &d);
        let pow: Vec<f64> = w.iter().map(|v| v * 2f64.powi(e)).collect();
        prop_assert_eq!(&estimates(&pow, &d), &base);
        let scaled: Vec<f64> = w.iter().map(|v| v * c).collect();
        for (a, b) in estimates(&scaled, &d).iter().zip(&base) {
            match (a, b) {
                (Some(a), Some(b)) => {
                    for (x, y) in a.iter().zip(b) {
                        prop_assert!((x - y).abs() <= 1e-9 * y.abs().max(1.0), "{} vs {}", x, y);
                    }
                }
                (None, None) => {}
                _ => return Err(TestCaseError::fail("scaling changed estimability")),
            }
        }
        Ok(())
    }))
}

/// Weighted CDFs are nondecreasing and within `[0, 1]` on any sorted grid.
pub fn property_cdf_monotone() -> Result<(), String> {
    report(runner().run(&(dataset_strategy(), prop::collection::vec(-4.0f64..4.0, 1..15)), |(spec, mut grid)| {
        let d = build(spec);
        grid.sort_by(f64::total_cmp);
        let w = random_weights(d.n_subjects(), spec.2);
        for z in 0..d.n_groups() {
            let cdf = weighted_cdf(&w, &d, 0, z, &grid).map_err(|e| TestCaseError::fail(e.to_string()))?;
            prop_assert!(cdf.windows(2).all(|p| p[0] <= p[1]));
            prop_assert!(cdf.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        Ok(())
    }))
}

/// Weighted correlations lie in `[-1, 1]`.
pub fn property_correlation_bounded() -> Result<(), String> {
    report(runner().run(&(dataset_strategy(), 0.0f64..3.0), |(spec, mix)| {
        let mut d = build(spec);
        // Push the outcomes toward collinearity to probe the boundary.
        let y = d.outcomes().clone();
        let y2 = DMatrix::from_fn(y.nrows(), 2, |i, l| if l == 0 { y[(i, 0)] } else { y[(i, 1)] + mix * 10.0 * y[(i, 0)] });
        d = Dataset::new(d.study().to_vec(), d.group().to_vec(), d.n_studies(), d.n_groups(), d.covariates().clone(), y2).unwrap();
        let w = random_weights(d.n_subjects(), spec.2);
        let f = FeatureSpec::correlation(1, 2);
        let g = moments_from_features(&w, d.group(), d.n_groups(), &feature_matrix(&d, &f.transforms)).unwrap();
        if let Ok(e) = evaluate(&g, &f) {
            for r in e.values() {
                prop_assert!(r.abs() <= 1.0, "correlation {}", r);
            }
        }
        Ok(())
    }))
}

/// The known-MPS covariance is exactly symmetric and positive semidefinite.
pub fn property_sigma1_symmetric_psd() -> Result<(), String> {
    report(runner().run(&dataset_strategy(), |spec| {
        let d = build(spec);
        let w = random_weights(d.n_subjects(), spec.2);
        let transforms = [Transform::Component(1), Transform::Component(2), Transform::Product(1, 2)];
        let f = feature_matrix(&d, &transforms);
        let g = moments_from_features(&w, d.group(), d.n_groups(), &f).unwrap();
        let v = known_mps_variance(&w, &d, &f, &g).unwrap();
        prop_assert_eq!(&v.joint, &v.joint.transpose());
        let scale = v.joint.iter().fold(0.0f64, |a, x| a.max(x.abs())).max(1e-300);
        let min = v.joint.clone().symmetric_eigenvalues().min();
        prop_assert!(min >= -1e-10 * scale, "min eigenvalue {}", min);
        Ok(())
    }))
}

fn simplex(raw: &[f64]) -> Vec<f64> {
    let t: f64 = raw.iter().sum();
    let mut v: Vec<f64> = raw.iter().map(|x| x / t).collect();
    let last = v.len() - 1;
    v[last] = 1.0 - v[..last].iter().sum::<f64>();
    v
}

/// FLEXOR weights satisfy `rho_tilde * gamma_s * theta_z <= 1`.
pub fn property_flexor_bounded() -> Result<(), String> {
    let strat = (
        dataset_strategy(),
        prop::collection::vec(0.01f64..1.0, 3),
        prop::collection::vec(0.01f64..1.0, 3),
        prop::collection::vec(1e-4f64..1.0, 9 * 60),
    );
    report(runner().run(&strat, |(spec, graw, traw, praw)| {
        let d = build(spec);
        let (j, k) = (d.n_studies(), d.n_groups());
        let gamma = simplex(&graw[..j]);
        let theta = simplex(&traw[..k]);
        let cells = j * k;
        let probs = DMatrix::from_fn(d.n_subjects(), cells, |i, c| praw[(i * cells + c) % praw.len()]);
        let probs = DMatrix::from_fn(d.n_subjects(), cells, |i, c| probs[(i, c)] / probs.row(i).sum());
        let p = flexor_core::MpsProbabilities::new(probs, j, k).unwrap();
        let spec = PseudoPopulationSpec::new(Tilt::Flexor, gamma.clone(), theta.clone()).map_err(|e| TestCaseError::reject(e.to_string()))?;
        let w = compute_weights(&spec, &p, &d, 1e-6).unwrap();
        for i in 0..d.n_subjects() {
            let b = w.rho_tilde[i] * gamma[d.study()[i]] * theta[d.group()[i]];
            prop_assert!(b <= 1.0 + 1e-12, "bound {}", b);
        }
        Ok(())
    }))
}

/// Fixed seeds replay FLEXOR optimization and bootstrap bit-for-bit.
pub fn property_deterministic_replay() -> Result<(), String> {
    let mut r = TestRunner::new(Config {
        cases: PROPERTY_CASES,
        failure_persistence: None,
        ..Config::default()
    });
    report(r.run(&(any::<u64>(), any::<u64>(), 1usize..=2), |(data_seed, seed, j)| {
        let d = random_dataset(24, j, 2, 1, 1, data_seed);
        let plan = AnalysisPlan {
            estimands: vec![Estimand {
                name: "diff".into(),
                feature: FeatureSpec::mean_difference(1, 1, 2),
            }],
            flexor: FlexorOptions {
                seed,
                ..FlexorOptions::default()
            },
            mps: MpsOptions {
                ridge: 1e-3,
                ..MpsOptions::default()
            },
            ..AnalysisPlan::default()
        };
        let a = run_pipeline(&d, &plan, None, None).map_err(|e| TestCaseError::reject(e.to_string()))?;
        let b = run_pipeline(&d, &plan, None, None).unwrap();
        for (x, y) in a.methods.iter().zip(&b.methods) {
            prop_assert_eq!(&x.weights.rho_tilde, &y.weights.rho_tilde);
            prop_assert_eq!(&x.estimates, &y.estimates);
        }
        let opts = BootstrapOptions {
            n_boot: 4,
            seed,
            reoptimize_flexor: false,
            ..BootstrapOptions::default()
        };
        let ba = bootstrap(&d, &plan, &a, &opts).map_err(|e| TestCaseError::reject(e.to_string()))?;
        let bb = bootstrap(&d, &plan, &a, &opts).unwrap();
        prop_assert_eq!(ba, bb);
        Ok(())
    }))
}
