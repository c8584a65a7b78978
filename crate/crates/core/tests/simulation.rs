//! Generator-level checks of the synthetic benchmark.

use flexor_core::mps::{fit_mps, predict_mps, MpsOptions};
use flexor_core::simulation::{
    generate_replicate, run_study, ScenarioConfig, Similarity, SimulationPool,
};
use flexor_core::weights::balance_with_weights;
use flexor_core::{
    cell_table, compute_weights, optimize_flexor, ConstraintSet, Estimand, FeatureSpec, FlexorOptions, MethodSpec,
    Tilt,
};

fn config(n: usize) -> ScenarioConfig {
    ScenarioConfig {
        n_subjects: n,
        n_bootstrap: 0,
        sandwich: false,
        ..ScenarioConfig::new(Similarity::Low)
    }
}

#[test]
fn cell_counts_sum_to_sample_size() {
    let cfg = config(500);
    let pool = SimulationPool::synthetic(&cfg).unwrap();
    let rep = generate_replicate(&cfg, &pool, 4).unwrap();
    let total: usize = cell_table(&rep.dataset).counts.iter().flatten().sum();
    assert_eq!(total, 500);
    assert!(cell_table(&rep.dataset).counts.iter().flatten().all(|&c| c > 0));
}

#[test]
fn noise_variance_tracks_r_squared() {
    let cfg = config(500);
    let pool = SimulationPool::synthetic(&cfg).unwrap();
    let mut ratios = Vec::new();
    for r in 0..20 {
        let rep = generate_replicate(&cfg, &pool, r).unwrap();
        let d = &rep.dataset;
        let resid: Vec<f64> = (0..d.n_subjects())
            .map(|i| d.outcomes()[(i, 0)] - rep.truth.outcome_mean(d.group()[i], pool.sums[rep.pool_rows[i]]))
            .collect();
        let var = resid.iter().map(|e| e * e).sum::<f64>() / resid.len() as f64;
        ratios.push(var / rep.truth.tau2);
    }
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    assert!((mean - 1.0).abs() < 0.05, "mean noise ratio {mean}");
}

#[test]
fn fitted_mps_approaches_generator() {
    let mae = |n: usize| {
        let cfg = config(n);
        let pool = SimulationPool::synthetic(&cfg).unwrap();
        let mut total = 0.0;
        for r in 0..5 {
            let rep = generate_replicate(&cfg, &pool, r).unwrap();
            let probs = predict_mps(&fit_mps(&rep.dataset, &MpsOptions::default()).unwrap(), &rep.dataset).unwrap();
            let diff = &probs.probs - &rep.true_probs.probs;
            total += diff.iter().map(|v| v.abs()).sum::<f64>() / diff.len() as f64;
        }
        total / 5.0
    };
    let (small, large) = (mae(500), mae(5000));
    assert!(large < small, "mae {small} at 500, {large} at 5000");
}

#[test]
fn flexor_weighted_cells_match_design_shares() {
    let cfg = config(5000);
    let pool = SimulationPool::synthetic(&cfg).unwrap();
    let rep = generate_replicate(&cfg, &pool, 1).unwrap();
    let d = &rep.dataset;
    let probs = predict_mps(&fit_mps(d, &MpsOptions::default()).unwrap(), d).unwrap();
    let r = optimize_flexor(
        &probs,
        d,
        &ConstraintSet::known_prevalence(rep.truth.theta.clone()),
        &FlexorOptions::default(),
    )
    .unwrap();
    let bal = balance_with_weights(&r.weights.rho_tilde, d).unwrap();
    let spec = &r.weights.spec;
    for s in 0..d.n_studies() {
        for z in 0..d.n_groups() {
            let target = spec.gamma[s] * spec.theta[z];
            assert!((bal.cell_proportions[s][z] - target).abs() < 0.02, "cell ({s},{z})");
        }
    }
}

#[test]
fn unweighted_sample_is_imbalanced() {
    let cfg = config(500);
    let pool = SimulationPool::synthetic(&cfg).unwrap();
    let rep = generate_replicate(&cfg, &pool, 2).unwrap();
    let ones = vec![1.0; rep.dataset.n_subjects()];
    let bal = balance_with_weights(&ones, &rep.dataset).unwrap();
    assert!(bal.max_abs_smd() > 0.1, "max SMD {}", bal.max_abs_smd());
    let probs = predict_mps(&fit_mps(&rep.dataset, &MpsOptions::default()).unwrap(), &rep.dataset).unwrap();
    let ic = compute_weights(
        &flexor_core::PseudoPopulationSpec::uniform(Tilt::Ic, 7, 2),
        &probs,
        &rep.dataset,
        1e-6,
    )
    .unwrap();
    let weighted = balance_with_weights(&ic.rho_tilde, &rep.dataset).unwrap();
    assert!(weighted.max_abs_smd() < bal.max_abs_smd());
}

#[test]
fn unconfounded_bias_shrinks_with_sample_size() {
    let run = |n: usize| {
        let cfg = ScenarioConfig {
            omega1: Some(0.0),
            omega_study: Some(0.0),
            n_replicates: 30,
            ..config(n)
        };
        let pool = SimulationPool::synthetic(&cfg).unwrap();
        let est = vec![Estimand {
            name: "diff".into(),
            feature: FeatureSpec::mean_difference(1, 1, 2),
        }];
        let report = run_study(&cfg, &pool, &[MethodSpec::new("IC", Tilt::Ic)], &est).unwrap();
        report.methods[0].values[0].abs_bias
    };
    let (small, large) = (run(250), run(2000));
    assert!(large < small, "bias {small} at 250, {large} at 2000");
}

#[test]
fn study_is_deterministic() {
    let cfg = ScenarioConfig {
        n_replicates: 3,
        n_bootstrap: 5,
        sandwich: true,
        ..config(300)
    };
    let pool = SimulationPool::synthetic(&cfg).unwrap();
    let methods = ScenarioConfig::default_methods();
    let est = ScenarioConfig::default_estimands();
    let a = run_study(&cfg, &pool, &methods, &est).unwrap();
    let b = run_study(&cfg, &pool, &methods, &est).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    for m in &a.methods {
        let s = &m.percent_ess;
        assert!(s.min <= s.q1 && s.q1 <= s.median && s.median <= s.q3 && s.q3 <= s.max);
        for v in &m.values {
            assert!(v.coverage_pct.is_some_and(|c| (0.0..=100.0).contains(&c)));
        }
    }
}
