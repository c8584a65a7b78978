//! Synthetic multi-study benchmark.
//!
//! Each replicate draws a natural population from a Dirichlet mixture over
//! k-means clusters of a covariate pool, fixes a logistic group propensity
//! calibrated to random group prevalences, resamples analysis subjects from
//! the pool, assigns studies through group-specific multinomial propensities
//! and generates Gaussian outcomes whose mean is `z` times the covariate sum.
//! Every weighting method is then scored against its own pseudo-population
//! truth. Only two groups are supported.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Exp1, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{cell_table, Dataset};
use crate::error::{Result, SimulationError};
use crate::estimation::{evaluate, feature_matrix, FeatureSpec, GroupMoments, Transform};
use crate::flexor::{maximize_over_constraints, FlexorOptions, DEFAULT_SIMPLEX_FLOOR};
use crate::mps::{MpsOptions, MpsProbabilities};
use crate::pipeline::{run_pipeline, AnalysisPlan, Estimand, MethodSpec};
use crate::uncertainty::{bootstrap, estimand_tau2, quantile_sorted, BootstrapOptions, SandwichContext};
use crate::weights::{PseudoPopulationSpec, Tilt, DEFAULT_PROBABILITY_FLOOR};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    Low,
    High,
}

impl Similarity {
    /// Group-propensity slope on the scaled covariate sum.
    pub fn omega1(self) -> f64 {
        match self {
            Similarity::High => 1.0,
            Similarity::Low => 0.1,
        }
    }

    /// Study-propensity slope on the scaled covariate sum.
    pub fn omega_study(self) -> f64 {
        match self {
            Similarity::High => 0.5,
            Similarity::Low => 0.05,
        }
    }
}

/// Synthetic covariate pool used when no covariate file is supplied:
/// Gaussian clusters whose row sums are rescaled to a target coefficient of
/// variation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoolSpec {
    pub n: usize,
    pub p: usize,
    pub n_clusters: usize,
    /// Coefficient of variation of the row sums `sum_t x_t`.
    pub sum_cv: f64,
    pub seed: u64,
}

impl Default for PoolSpec {
    fn default() -> Self {
        PoolSpec {
            n: 450,
            p: 30,
            n_clusters: 10,
            sum_cv: 2.0,
            seed: 20_240_101,
        }
    }
}

/// Covariates handed to the analysis MPS fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MpsDesign {
    /// Every pool covariate.
    Full,
    /// The single covariate sum score through which the generator acts.
    SumScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub similarity: Similarity,
    pub n_subjects: usize,
    pub n_replicates: usize,
    pub n_clusters: usize,
    pub natural_pop_size: usize,
    pub n_studies: usize,
    pub n_groups: usize,
    /// Overrides the similarity preset when set.
    pub omega1: Option<f64>,
    /// Overrides the similarity preset when set.
    pub omega_study: Option<f64>,
    pub r_squared_target: f64,
    pub seed: u64,
    pub pool: PoolSpec,
    pub mps_design: MpsDesign,
    pub mps: MpsOptions,
    pub flexor: FlexorOptions,
    pub probability_floor: f64,
    pub simplex_floor: f64,
    /// Bootstrap replicates per dataset; 0 disables bootstrap intervals.
    pub n_bootstrap: usize,
    pub level: f64,
    pub reoptimize_flexor: bool,
    /// Also compute sandwich standard errors.
    pub sandwich: bool,
    /// Fraction of failed replicates above which the study aborts.
    pub max_failure_fraction: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self::new(Similarity::Low)
    }
}

impl ScenarioConfig {
    pub fn new(similarity: Similarity) -> Self {
        ScenarioConfig {
            similarity,
            n_subjects: 500,
            n_replicates: 100,
            n_clusters: 10,
            natural_pop_size: 1_000_000,
            n_studies: 7,
            n_groups: 2,
            omega1: None,
            omega_study: None,
            r_squared_target: 0.9,
            seed: 1,
            pool: PoolSpec::default(),
            mps_design: MpsDesign::SumScore,
            // Small cells at extreme covariate values otherwise separate now and then.
            mps: MpsOptions {
                ridge: 0.01,
                ..MpsOptions::default()
            },
            flexor: FlexorOptions::default(),
            probability_floor: DEFAULT_PROBABILITY_FLOOR,
            simplex_floor: DEFAULT_SIMPLEX_FLOOR,
            n_bootstrap: 100,
            level: 0.95,
            reoptimize_flexor: true,
            sandwich: true,
            max_failure_fraction: 0.05,
        }
    }

    pub fn omega1(&self) -> f64 {
        self.omega1.unwrap_or(self.similarity.omega1())
    }

    pub fn omega_study(&self) -> f64 {
        self.omega_study.unwrap_or(self.similarity.omega_study())
    }

    pub fn validate(&self) -> Result<(), SimulationError> {
        let bad = |m: &str| Err(SimulationError::InvalidScenario(m.to_string()));
        if self.n_groups != 2 {
            return bad("only two groups are supported");
        }
        if self.n_subjects == 0 || self.n_replicates == 0 || self.n_clusters == 0 || self.natural_pop_size == 0 {
            return bad("subject, replicate, cluster and population counts must be positive");
        }
        if self.n_studies == 0 {
            return bad("at least one study is required");
        }
        if !(self.r_squared_target > 0.0 && self.r_squared_target <= 1.0) {
            return bad("r_squared_target must lie in (0, 1]");
        }
        if self.n_bootstrap == 1 {
            return bad("n_bootstrap must be 0 or at least 2");
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return bad("level must lie in (0, 1)");
        }
        Ok(())
    }

    /// Default estimands: group means, group SDs and the mean difference.
    pub fn default_estimands() -> Vec<Estimand> {
        vec![
            Estimand {
                name: "mean".into(),
                feature: FeatureSpec::mean(1),
            },
            Estimand {
                name: "sd".into(),
                feature: FeatureSpec::sd(1),
            },
            Estimand {
                name: "mean_difference".into(),
                feature: FeatureSpec::mean_difference(1, 1, 2),
            },
        ]
    }

    /// FLEXOR with free study shares and the replicate's known group
    /// prevalences; IC and IGO with equal study and group shares.
    pub fn default_methods() -> Vec<MethodSpec> {
        vec![
            MethodSpec::new("FLEXOR", Tilt::Flexor),
            MethodSpec::new("IGO", Tilt::Igo),
            MethodSpec::new("IC", Tilt::Ic),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub centers: DMatrix<f64>,
    pub assignments: Vec<usize>,
    pub members: Vec<Vec<usize>>,
    pub n_iterations: usize,
}

impl KMeansResult {
    pub fn counts(&self) -> Vec<usize> {
        self.members.iter().map(|m| m.len()).collect()
    }

    pub fn within_ss(&self, x: &DMatrix<f64>) -> f64 {
        (0..x.nrows())
            .map(|i| sq_dist(x, i, &self.centers, self.assignments[i]))
            .sum()
    }
}

fn sq_dist(x: &DMatrix<f64>, i: usize, c: &DMatrix<f64>, k: usize) -> f64 {
    (0..x.ncols()).map(|t| (x[(i, t)] - c[(k, t)]).powi(2)).sum()
}

/// Lloyd's algorithm with k-means++ seeding. Empty clusters trigger a fresh
/// seeding, up to a fixed number of attempts.
pub fn kmeans_covariates(x: &DMatrix<f64>, q: usize, seed: u64) -> Result<KMeansResult, SimulationError> {
    const MAX_ITER: usize = 300;
    const MAX_SEEDINGS: u64 = 10;
    let (n, p) = (x.nrows(), x.ncols());
    if q == 0 || n < q {
        return Err(SimulationError::KMeans(format!("need 1 <= Q <= n, got Q={q}, n={n}")));
    }
    for attempt in 0..MAX_SEEDINGS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(attempt);
        // k-means++ seeding.
        let mut chosen = vec![rng.random_range(0..n)];
        let mut dist: Vec<f64> = (0..n).map(|i| row_dist(x, i, chosen[0])).collect();
        while chosen.len() < q {
            let total: f64 = dist.iter().sum();
            let next = if total > 0.0 {
                let mut u = rng.random::<f64>() * total;
                let mut pick = n - 1;
                for (i, &d) in dist.iter().enumerate() {
                    if u < d {
                        pick = i;
                        break;
                    }
                    u -= d;
                }
                pick
            } else {
                let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
                free[rng.random_range(0..free.len())]
            };
            chosen.push(next);
            for i in 0..n {
                dist[i] = dist[i].min(row_dist(x, i, next));
            }
        }
        let mut centers = DMatrix::from_fn(q, p, |k, t| x[(chosen[k], t)]);
        let mut assign = vec![usize::MAX; n];
        let mut iterations = 0;
        let mut empty = false;
        while iterations < MAX_ITER {
            iterations += 1;
            let mut changed = false;
            for i in 0..n {
                let mut best = 0;
                let mut best_d = f64::INFINITY;
                for k in 0..q {
                    let d = sq_dist(x, i, &centers, k);
                    if d < best_d {
                        best_d = d;
                        best = k;
                    }
                }
                if assign[i] != best {
                    assign[i] = best;
                    changed = true;
                }
            }
            let mut sums = DMatrix::<f64>::zeros(q, p);
            let mut counts = vec![0usize; q];
            for i in 0..n {
                counts[assign[i]] += 1;
                for t in 0..p {
                    sums[(assign[i], t)] += x[(i, t)];
                }
            }
            if counts.contains(&0) {
                empty = true;
                break;
            }
            for k in 0..q {
                for t in 0..p {
                    centers[(k, t)] = sums[(k, t)] / counts[k] as f64;
                }
            }
            if !changed {
                break;
            }
        }
        if empty {
            continue;
        }
        let mut members = vec![Vec::new(); q];
        for (i, &k) in assign.iter().enumerate() {
            members[k].push(i);
        }
        return Ok(KMeansResult {
            centers,
            assignments: assign,
            members,
            n_iterations: iterations,
        });
    }
    Err(SimulationError::KMeans("empty cluster after every reseeding".into()))
}

fn row_dist(x: &DMatrix<f64>, a: usize, b: usize) -> f64 {
    (0..x.ncols()).map(|t| (x[(a, t)] - x[(b, t)]).powi(2)).sum()
}

/// Gaussian-cluster covariate pool with row sums rescaled so that their
/// coefficient of variation equals `spec.sum_cv`.
pub fn synthetic_pool(spec: &PoolSpec) -> Result<DMatrix<f64>, SimulationError> {
    if spec.n < 2 || spec.p == 0 || spec.n_clusters == 0 || !(spec.sum_cv > 0.0) {
        return Err(SimulationError::InvalidScenario("pool needs n >= 2, p >= 1, clusters >= 1 and sum_cv > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let centers = DMatrix::from_fn(spec.n_clusters, spec.p, |_, _| rng.random_range(0.0..2.0));
    let mut x = DMatrix::zeros(spec.n, spec.p);
    for i in 0..spec.n {
        let k = rng.random_range(0..spec.n_clusters);
        for t in 0..spec.p {
            let e: f64 = StandardNormal.sample(&mut rng);
            x[(i, t)] = centers[(k, t)] + 0.3 * e;
        }
    }
    let sums: Vec<f64> = (0..spec.n).map(|i| x.row(i).sum()).collect();
    let mean = sums.iter().sum::<f64>() / spec.n as f64;
    let sd = (sums.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / spec.n as f64).sqrt();
    // Spread each row's shift evenly over its coordinates.
    for i in 0..spec.n {
        let target = mean + (sums[i] - mean) / sd * spec.sum_cv * mean;
        let shift = (target - sums[i]) / spec.p as f64;
        for t in 0..spec.p {
            x[(i, t)] += shift;
        }
    }
    Ok(x)
}

fn dirichlet_ones(k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let e: Vec<f64> = (0..k).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = e.iter().sum();
    e.iter().map(|v| v / total).collect()
}

/// Multinomial counts of `n` draws with equal cell probabilities, via
/// sequential binomials.
fn uniform_multinomial(n: u64, cells: usize, rng: &mut ChaCha8Rng) -> Result<Vec<u64>, SimulationError> {
    weighted_multinomial(n, &vec![1.0; cells], rng)
}

fn weighted_multinomial(n: u64, weights: &[f64], rng: &mut ChaCha8Rng) -> Result<Vec<u64>, SimulationError> {
    let mut left = n;
    let mut mass: f64 = weights.iter().sum();
    let mut out = Vec::with_capacity(weights.len());
    for (j, &w) in weights.iter().enumerate() {
        if j + 1 == weights.len() {
            out.push(left);
            break;
        }
        let prob = if mass > 0.0 { (w / mass).clamp(0.0, 1.0) } else { 0.0 };
        let draw = Binomial::new(left, prob)
            .map_err(|e| SimulationError::InvalidScenario(format!("binomial draw: {e}")))?
            .sample(rng);
        out.push(draw);
        left -= draw;
        mass -= w;
    }
    Ok(out)
}

fn logistic(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Data-generating model of one replicate, sufficient to evaluate true cell
/// probabilities anywhere in the pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthModel {
    pub theta: Vec<f64>,
    pub omega0: f64,
    pub omega1: f64,
    pub omega_study: f64,
    /// Natural-population mean of the covariate sum.
    pub natural_sum_mean: f64,
    /// Analysis-sample mean of the covariate sum.
    pub sample_sum_mean: f64,
    pub n_studies: usize,
    pub tau2: f64,
}

impl TruthModel {
    /// True cell probabilities at covariate sum `s`, cells ordered `(s, z)`.
    pub fn cell_probabilities(&self, sum: f64, out: &mut [f64]) {
        let d2 = logistic(self.omega0 + self.omega1 * sum / self.natural_sum_mean);
        let dz = [1.0 - d2, d2];
        let r = sum / self.sample_sum_mean;
        for (z, &pz) in dz.iter().enumerate() {
            let zl = (z + 1) as f64;
            let logits: Vec<f64> = (0..self.n_studies)
                .map(|s| if s == 0 { 0.0 } else { (s + 1) as f64 * zl * self.omega_study * r })
                .collect();
            let max = logits.iter().copied().fold(f64::MIN, f64::max);
            let total: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            for s in 0..self.n_studies {
                out[s * 2 + z] = pz * (logits[s] - max).exp() / total;
            }
        }
    }

    /// Mean of the outcome in group `z` (0-based) at covariate sum `s`.
    pub fn outcome_mean(&self, z: usize, sum: f64) -> f64 {
        (z + 1) as f64 * sum
    }
}

/// One generated dataset with its generating model.
#[derive(Debug, Clone)]
pub struct Replicate {
    pub dataset: Dataset,
    pub truth: TruthModel,
    /// True cell probabilities of the analysis subjects.
    pub true_probs: MpsProbabilities,
    /// Pool row of every analysis subject.
    pub pool_rows: Vec<usize>,
    /// Redraws needed to obtain a sample with every cell occupied.
    pub regenerations: usize,
}

/// Shared inputs of every replicate: the covariate pool and its clustering.
#[derive(Debug, Clone)]
pub struct SimulationPool {
    pub covariates: DMatrix<f64>,
    pub sums: Vec<f64>,
    pub clusters: KMeansResult,
}

impl SimulationPool {
    pub fn new(covariates: DMatrix<f64>, n_clusters: usize, seed: u64) -> Result<Self, SimulationError> {
        let sums = (0..covariates.nrows()).map(|i| covariates.row(i).sum()).collect();
        let clusters = kmeans_covariates(&covariates, n_clusters, seed)?;
        Ok(SimulationPool {
            covariates,
            sums,
            clusters,
        })
    }

    pub fn synthetic(cfg: &ScenarioConfig) -> Result<Self, SimulationError> {
        Self::new(synthetic_pool(&cfg.pool)?, cfg.n_clusters, cfg.seed)
    }
}

fn replicate_rng(seed: u64, r: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(r as u64 + 1);
    rng
}

/// Solves `mean_i n0_i logistic(w0 + w1 r_i) / N0 = target` for `w0` by bisection.
fn solve_intercept(weights: &[u64], ratios: &[f64], omega1: f64, target: f64) -> Result<f64, SimulationError> {
    let total: f64 = weights.iter().map(|&w| w as f64).sum();
    let avg = |w0: f64| {
        weights
            .iter()
            .zip(ratios)
            .filter(|(&w, _)| w > 0)
            .map(|(&w, &r)| w as f64 * logistic(w0 + omega1 * r))
            .sum::<f64>()
            / total
            - target
    };
    let (mut lo, mut hi) = (-1.0, 1.0);
    let mut expansions = 0;
    while avg(lo) > 0.0 || avg(hi) < 0.0 {
        lo *= 2.0;
        hi *= 2.0;
        expansions += 1;
        if expansions > 10 {
            return Err(SimulationError::RootBracket);
        }
    }
    while hi - lo > 1e-8 {
        let mid = 0.5 * (lo + hi);
        if avg(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Generates replicate `r`; bit-identical for fixed `(cfg, r)`.
pub fn generate_replicate(cfg: &ScenarioConfig, pool: &SimulationPool, r: usize) -> Result<Replicate, SimulationError> {
    const MAX_REGENERATIONS: usize = 100;
    cfg.validate()?;
    let mut rng = replicate_rng(cfg.seed, r);
    let n_pool = pool.covariates.nrows();

    // Natural population: Dirichlet cluster weights, cluster draws, then a
    // uniform member of each drawn cluster; only multiplicities are kept.
    let pi = dirichlet_ones(pool.clusters.members.len(), &mut rng);
    let cluster_counts = weighted_multinomial(cfg.natural_pop_size as u64, &pi, &mut rng)?;
    let mut multiplicity = vec![0u64; n_pool];
    for (members, &count) in pool.clusters.members.iter().zip(&cluster_counts) {
        for (&i, c) in members.iter().zip(uniform_multinomial(count, members.len(), &mut rng)?) {
            multiplicity[i] += c;
        }
    }
    let natural_sum_mean = multiplicity
        .iter()
        .zip(&pool.sums)
        .map(|(&m, &s)| m as f64 * s)
        .sum::<f64>()
        / cfg.natural_pop_size as f64;
    let theta = dirichlet_ones(2, &mut rng);
    let ratios: Vec<f64> = pool.sums.iter().map(|s| s / natural_sum_mean).collect();
    let omega0 = solve_intercept(&multiplicity, &ratios, cfg.omega1(), theta[1])?;

    let (j, n) = (cfg.n_studies, cfg.n_subjects);
    let cells = 2 * j;
    let mut regenerations = 0;
    loop {
        let rows: Vec<usize> = (0..n).map(|_| rng.random_range(0..n_pool)).collect();
        let sample_sum_mean = rows.iter().map(|&i| pool.sums[i]).sum::<f64>() / n as f64;
        let truth = TruthModel {
            theta: theta.clone(),
            omega0,
            omega1: cfg.omega1(),
            omega_study: cfg.omega_study(),
            natural_sum_mean,
            sample_sum_mean,
            n_studies: j,
            tau2: 0.0,
        };
        let mut probs = DMatrix::zeros(n, cells);
        let mut row = vec![0.0; cells];
        let mut cell = Vec::with_capacity(n);
        for (i, &pr) in rows.iter().enumerate() {
            truth.cell_probabilities(pool.sums[pr], &mut row);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = cells - 1;
            for c in 0..cells {
                probs[(i, c)] = row[c];
                acc += row[c];
                if u < acc && pick == cells - 1 && c < cells - 1 {
                    pick = c;
                }
            }
            cell.push(pick);
        }
        let signal: Vec<f64> = (0..n).map(|i| truth.outcome_mean(cell[i] % 2, pool.sums[rows[i]])).collect();
        let mean = signal.iter().sum::<f64>() / n as f64;
        let var_signal = signal.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let r2 = cfg.r_squared_target;
        let tau2 = var_signal * (1.0 - r2) / r2;
        let noise = Normal::new(0.0, tau2.sqrt()).map_err(|e| SimulationError::InvalidScenario(e.to_string()))?;
        let y: Vec<f64> = signal.iter().map(|m| m + noise.sample(&mut rng)).collect();

        let mut occupied = vec![false; cells];
        for &c in &cell {
            occupied[c] = true;
        }
        if occupied.contains(&false) {
            regenerations += 1;
            if regenerations > MAX_REGENERATIONS {
                return Err(SimulationError::InvalidScenario("could not fill every study-group cell".into()));
            }
            continue;
        }
        let covariates = match cfg.mps_design {
            MpsDesign::Full => DMatrix::from_fn(n, pool.covariates.ncols(), |i, t| pool.covariates[(rows[i], t)]),
            MpsDesign::SumScore => DMatrix::from_fn(n, 1, |i, _| pool.sums[rows[i]]),
        };
        let dataset = Dataset::new(
            cell.iter().map(|c| c / 2).collect(),
            cell.iter().map(|c| c % 2).collect(),
            j,
            2,
            covariates,
            DMatrix::from_vec(n, 1, y),
        )
        .map_err(|e| SimulationError::InvalidScenario(e.to_string()))?;
        let true_probs = MpsProbabilities::new(probs, j, 2).map_err(|e| SimulationError::InvalidScenario(e.to_string()))?;
        return Ok(Replicate {
            dataset,
            truth: TruthModel { tau2, ..truth },
            true_probs,
            pool_rows: rows,
            regenerations,
        });
    }
}

/// Raw moments `E[Y^k]`, `k = 0..=max`, of `N(mu, s2)`.
fn gaussian_raw_moments(mu: f64, s2: f64, max: usize) -> Vec<f64> {
    let mut m = vec![1.0, mu];
    for k in 2..=max {
        m.push(mu * m[k - 1] + (k - 1) as f64 * s2 * m[k - 2]);
    }
    m
}

fn standard_normal_cdf(x: f64) -> f64 {
    use statrs::distribution::{ContinuousCDF, Normal as SNormal};
    SNormal::standard().cdf(x)
}

/// Conditional expectation of a transform of a univariate Gaussian outcome.
fn expected_transform(t: &Transform, mu: f64, s2: f64) -> f64 {
    match *t {
        Transform::Component(_) => mu,
        Transform::Product(_, _) => mu * mu + s2,
        Transform::Power(_, k) if k >= 0 => gaussian_raw_moments(mu, s2, k as usize)[k as usize],
        Transform::Power(_, _) => f64::NAN,
        Transform::IndicatorLe(_, y) => {
            if s2 > 0.0 {
                standard_normal_cdf((y - mu) / s2.sqrt())
            } else if mu <= y {
                1.0
            } else {
                0.0
            }
        }
    }
}

impl TruthModel {
    /// True cell probabilities at every pool row.
    pub fn pool_probabilities(&self, pool: &SimulationPool) -> Vec<Vec<f64>> {
        pool.sums
            .iter()
            .map(|&s| {
                let mut row = vec![0.0; 2 * self.n_studies];
                self.cell_probabilities(s, &mut row);
                row
            })
            .collect()
    }

    fn tilt_values(&self, spec: &PseudoPopulationSpec, pool_probs: &[Vec<f64>], floor: f64) -> Vec<f64> {
        pool_probs
            .iter()
            .map(|row| {
                let floored: Vec<f64> = row.iter().map(|v| v.max(floor)).collect();
                crate::weights::tilt_value(spec, &floored)
            })
            .collect()
    }

    /// Pseudo-population moments of the transforms: the tilt-weighted
    /// average over the pool (the observed covariate law) of the Gaussian
    /// conditional expectations.
    pub fn pseudo_moments(
        &self,
        spec: &PseudoPopulationSpec,
        pool: &SimulationPool,
        pool_probs: &[Vec<f64>],
        transforms: &[Transform],
        floor: f64,
    ) -> GroupMoments {
        let eta = self.tilt_values(spec, pool_probs, floor);
        let total: f64 = eta.iter().sum();
        let m = transforms.len();
        let mut lambda = DMatrix::zeros(2, m);
        for (e, &s) in eta.iter().zip(&pool.sums) {
            for z in 0..2 {
                let mu = self.outcome_mean(z, s);
                for (k, t) in transforms.iter().enumerate() {
                    lambda[(z, k)] += e * expected_transform(t, mu, self.tau2) / total;
                }
            }
        }
        GroupMoments {
            lambda_hat: lambda,
            weighted_group_mass: vec![total; 2],
        }
    }

    /// Population ESS per subject, `E[eta]`, for the ESS-optimal tilt.
    pub fn flexor_population_objective(&self, gamma: &[f64], theta: &[f64], pool_probs: &[Vec<f64>], floor: f64) -> f64 {
        let spec = PseudoPopulationSpec {
            tilt: Tilt::Flexor,
            gamma: gamma.to_vec(),
            theta: theta.to_vec(),
        };
        let eta = self.tilt_values(&spec, pool_probs, floor);
        eta.iter().sum::<f64>() / eta.len() as f64
    }

    /// Population pseudo-population of a method: for FLEXOR the free
    /// coordinates maximize the population ESS.
    pub fn population_spec(
        &self,
        method: &MethodSpec,
        pool_probs: &[Vec<f64>],
        probability_floor: f64,
        simplex_floor: f64,
    ) -> Result<PseudoPopulationSpec> {
        let j = self.n_studies;
        if method.tilt != Tilt::Flexor {
            return Ok(method.fixed_spec(j, 2)?);
        }
        let constraints = method.constraints(simplex_floor);
        let g0 = method.gamma.clone().unwrap_or(vec![1.0 / j as f64; j]);
        let t0 = method.theta.clone().unwrap_or(vec![0.5; 2]);
        let objective = |g: &[f64], t: &[f64]| self.flexor_population_objective(g, t, pool_probs, probability_floor);
        let (gamma, theta, _) = maximize_over_constraints(&constraints, (&g0, &t0), &objective)?;
        Ok(PseudoPopulationSpec {
            tilt: Tilt::Flexor,
            gamma,
            theta,
        })
    }
}

/// Per-replicate outcome for one method and one estimand value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueRecord {
    pub estimate: f64,
    pub truth: f64,
    pub bootstrap_se: Option<f64>,
    pub bootstrap_lower: Option<f64>,
    pub bootstrap_upper: Option<f64>,
    pub sandwich_se: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRecord {
    pub name: String,
    pub percent_ess: f64,
    pub gamma: Vec<f64>,
    pub theta: Vec<f64>,
    /// `[estimand][value]`.
    pub values: Vec<Vec<ValueRecord>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub regenerations: usize,
    pub theta: Vec<f64>,
    pub methods: Vec<MethodRecord>,
}

fn value_labels(e: &Estimand) -> Vec<String> {
    if e.feature.functional.is_contrast() {
        vec![e.name.clone()]
    } else {
        vec![format!("{}[1]", e.name), format!("{}[2]", e.name)]
    }
}

/// Analyzes one generated replicate: fit, weight, estimate, score.
pub fn analyze_replicate(
    cfg: &ScenarioConfig,
    pool: &SimulationPool,
    rep: &Replicate,
    methods: &[MethodSpec],
    estimands: &[Estimand],
    index: usize,
) -> Result<ReplicateRecord> {
    let d = &rep.dataset;
    let theta = rep.truth.theta.clone();
    let methods: Vec<MethodSpec> = methods
        .iter()
        .map(|m| {
            let mut m = m.clone();
            if m.tilt == Tilt::Flexor && m.theta.is_none() {
                m.theta = Some(theta.clone());
            }
            m
        })
        .collect();
    let plan = AnalysisPlan {
        mps: cfg.mps,
        methods: methods.clone(),
        estimands: estimands.to_vec(),
        probability_floor: cfg.probability_floor,
        simplex_floor: cfg.simplex_floor,
        flexor: FlexorOptions {
            seed: cfg.seed ^ index as u64,
            ..cfg.flexor
        },
    };
    let full = run_pipeline(d, &plan, None, None)?;
    let boot = if cfg.n_bootstrap >= 2 {
        let opts = BootstrapOptions {
            n_boot: cfg.n_bootstrap,
            seed: cfg.seed.wrapping_mul(1_000_003).wrapping_add(index as u64),
            level: cfg.level,
            reoptimize_flexor: cfg.reoptimize_flexor,
            ..BootstrapOptions::default()
        };
        Some(bootstrap(d, &plan, &full, &opts)?)
    } else {
        None
    };
    let sandwich = if cfg.sandwich {
        Some(SandwichContext::new(&full.model, d)?)
    } else {
        None
    };
    let pool_probs = rep.truth.pool_probabilities(pool);
    let features: Vec<DMatrix<f64>> = estimands.iter().map(|e| feature_matrix(d, &e.feature.transforms)).collect();
    let n = d.n_subjects() as f64;

    let mut records = Vec::with_capacity(methods.len());
    for (mi, (method, result)) in methods.iter().zip(&full.methods).enumerate() {
        let pop_spec = rep
            .truth
            .population_spec(method, &pool_probs, cfg.probability_floor, cfg.simplex_floor)?;
        let mut values = Vec::with_capacity(estimands.len());
        for (ei, e) in estimands.iter().enumerate() {
            let truth_moments = rep.truth.pseudo_moments(
                &pop_spec,
                pool,
                &pool_probs,
                &e.feature.transforms,
                cfg.probability_floor,
            );
            let truth = evaluate(&truth_moments, &e.feature)?.values();
            let estimate = result.estimates[ei].values();
            let tau2 = match &sandwich {
                Some(ctx) => {
                    let (v, g) = ctx.variance(&result.weights.spec, cfg.probability_floor, &features[ei])?;
                    estimand_tau2(&v, &g, &e.feature).ok()
                }
                None => None,
            };
            let vals = (0..estimate.len())
                .map(|vi| {
                    let (bse, lo, hi) = match &boot {
                        Some(b) => {
                            let ci = b.interval(mi, ei, vi, estimate[vi]);
                            (Some(b.standard_error(mi, ei, vi)), Some(ci.lower), Some(ci.upper))
                        }
                        None => (None, None, None),
                    };
                    ValueRecord {
                        estimate: estimate[vi],
                        truth: truth[vi],
                        bootstrap_se: bse,
                        bootstrap_lower: lo,
                        bootstrap_upper: hi,
                        sandwich_se: tau2.as_ref().map(|t| (t[vi] / n).sqrt()),
                    }
                })
                .collect();
            values.push(vals);
        }
        records.push(MethodRecord {
            name: method.name.clone(),
            percent_ess: result.weights.percent_ess,
            gamma: result.weights.spec.gamma.clone(),
            theta: result.weights.spec.theta.clone(),
            values,
        });
    }
    Ok(ReplicateRecord {
        replicate: index,
        regenerations: rep.regenerations,
        theta,
        methods: records,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistributionSummary {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub mean: f64,
    pub q3: f64,
    pub max: f64,
}

impl DistributionSummary {
    pub fn from_values(values: &[f64]) -> Self {
        let mut s = values.to_vec();
        s.sort_by(f64::total_cmp);
        DistributionSummary {
            min: s[0],
            q1: quantile_sorted(&s, 0.25),
            median: quantile_sorted(&s, 0.5),
            mean: s.iter().sum::<f64>() / s.len() as f64,
            q3: quantile_sorted(&s, 0.75),
            max: s[s.len() - 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueSummary {
    pub label: String,
    pub abs_bias: f64,
    pub abs_bias_se: f64,
    /// Standard deviation of the estimation errors across replicates.
    pub sd: f64,
    pub coverage_pct: Option<f64>,
    pub mean_bootstrap_se: Option<f64>,
    pub mean_sandwich_se: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub name: String,
    pub percent_ess: DistributionSummary,
    pub values: Vec<ValueSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub config: ScenarioConfig,
    pub methods: Vec<MethodSummary>,
    /// Fraction of replicates where the first FLEXOR method's ESS exceeds every other method's.
    pub flexor_dominance: Option<f64>,
    pub n_completed: usize,
    pub n_failed: usize,
    pub total_regenerations: usize,
    pub replicates: Vec<ReplicateRecord>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sd(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Aggregates replicate records into method summaries.
pub fn summarize(
    cfg: &ScenarioConfig,
    estimands: &[Estimand],
    replicates: Vec<ReplicateRecord>,
    n_failed: usize,
) -> SimulationReport {
    let labels: Vec<String> = estimands.iter().flat_map(value_labels).collect();
    let n_methods = replicates.first().map_or(0, |r| r.methods.len());
    let methods = (0..n_methods)
        .map(|mi| {
            let ess: Vec<f64> = replicates.iter().map(|r| r.methods[mi].percent_ess).collect();
            let flat = |r: &ReplicateRecord| -> Vec<ValueRecord> { r.methods[mi].values.iter().flatten().cloned().collect() };
            let per_rep: Vec<Vec<ValueRecord>> = replicates.iter().map(flat).collect();
            let values = labels
                .iter()
                .enumerate()
                .map(|(vi, label)| {
                    let recs: Vec<&ValueRecord> = per_rep.iter().map(|r| &r[vi]).collect();
                    let errors: Vec<f64> = recs.iter().map(|v| v.estimate - v.truth).collect();
                    let abs: Vec<f64> = errors.iter().map(|e| e.abs()).collect();
                    let covered: Vec<bool> = recs
                        .iter()
                        .filter_map(|v| Some(v.bootstrap_lower? <= v.truth && v.truth <= v.bootstrap_upper?))
                        .collect();
                    let opt_mean = |f: &dyn Fn(&ValueRecord) -> Option<f64>| {
                        let xs: Vec<f64> = recs.iter().filter_map(|v| f(v)).collect();
                        (!xs.is_empty()).then(|| mean(&xs))
                    };
                    ValueSummary {
                        label: label.clone(),
                        abs_bias: mean(&abs),
                        abs_bias_se: sd(&abs) / (abs.len() as f64).sqrt(),
                        sd: sd(&errors),
                        coverage_pct: (!covered.is_empty())
                            .then(|| 100.0 * covered.iter().filter(|&&c| c).count() as f64 / covered.len() as f64),
                        mean_bootstrap_se: opt_mean(&|v| v.bootstrap_se),
                        mean_sandwich_se: opt_mean(&|v| v.sandwich_se),
                    }
                })
                .collect();
            MethodSummary {
                name: replicates[0].methods[mi].name.clone(),
                percent_ess: DistributionSummary::from_values(&ess),
                values,
            }
        })
        .collect();
    let flexor_dominance = replicates.first().and_then(|r| {
        let fi = r.methods.iter().position(|m| m.name.eq_ignore_ascii_case("flexor"))?;
        (r.methods.len() > 1).then(|| {
            let wins = replicates
                .iter()
                .filter(|r| {
                    let f = r.methods[fi].percent_ess;
                    r.methods.iter().enumerate().all(|(i, m)| i == fi || f > m.percent_ess)
                })
                .count();
            wins as f64 / replicates.len() as f64
        })
    });
    SimulationReport {
        config: cfg.clone(),
        methods,
        flexor_dominance,
        n_completed: replicates.len(),
        n_failed,
        total_regenerations: replicates.iter().map(|r| r.regenerations).sum(),
        replicates,
    }
}

/// Runs every replicate of a scenario and aggregates the results.
pub fn run_study(
    cfg: &ScenarioConfig,
    pool: &SimulationPool,
    methods: &[MethodSpec],
    estimands: &[Estimand],
) -> Result<SimulationReport> {
    cfg.validate()?;
    if methods.is_empty() {
        return Err(SimulationError::InvalidScenario("no methods".into()).into());
    }
    let outcomes: Vec<Result<ReplicateRecord>> = (0..cfg.n_replicates)
        .into_par_iter()
        .map(|r| {
            let rep = generate_replicate(cfg, pool, r)?;
            analyze_replicate(cfg, pool, &rep, methods, estimands, r)
        })
        .collect();
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (r, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(rec) => records.push(rec),
            Err(e) => {
                log::warn!("replicate {r} failed: {e}");
                failures.push((r, e));
            }
        }
    }
    if failures.len() as f64 > cfg.max_failure_fraction * cfg.n_replicates as f64 || records.is_empty() {
        if failures.len() == 1 || records.is_empty() {
            let (r, e) = failures.swap_remove(0);
            return Err(SimulationError::Replicate {
                replicate: r,
                source: Box::new(e),
            }
            .into());
        }
        return Err(SimulationError::TooManyFailures {
            failed: failures.len(),
            total: cfg.n_replicates,
        }
        .into());
    }
    Ok(summarize(cfg, estimands, records, failures.len()))
}

/// Fixed-width text rendering of the ESS and accuracy tables.
pub fn format_tables(report: &SimulationReport) -> String {
    use std::fmt::Write;
    let mut out = String::new();
    let names: Vec<&str> = report.methods.iter().map(|m| m.name.as_str()).collect();
    let _ = writeln!(
        out,
        "Percent ESS ({:?} similarity, N = {}, {} replicates)",
        report.config.similarity, report.config.n_subjects, report.n_completed
    );
    let _ = write!(out, "{:<16}", "");
    for n in &names {
        let _ = write!(out, "{n:>10}");
    }
    out.push('\n');
    let rows: [(&str, fn(&DistributionSummary) -> f64); 6] = [
        ("Minimum", |s| s.min),
        ("First quartile", |s| s.q1),
        ("Median", |s| s.median),
        ("Mean", |s| s.mean),
        ("Third quartile", |s| s.q3),
        ("Maximum", |s| s.max),
    ];
    for (label, get) in rows {
        let _ = write!(out, "{label:<16}");
        for m in &report.methods {
            let _ = write!(out, "{:>10.2}", get(&m.percent_ess));
        }
        out.push('\n');
    }
    if let Some(f) = report.flexor_dominance {
        let _ = writeln!(out, "FLEXOR ESS above all others in {:.1}% of replicates", 100.0 * f);
    }
    out.push('\n');
    let _ = writeln!(out, "Absolute bias x 10^2 (SE), SD of errors x 10, bootstrap coverage %");
    let _ = write!(out, "{:<22}", "Estimand");
    for n in &names {
        let _ = write!(out, "{:>16}", format!("{n} bias"));
    }
    for n in &names {
        let _ = write!(out, "{:>10}", format!("{n} sd"));
    }
    for n in &names {
        let _ = write!(out, "{:>10}", format!("{n} cov"));
    }
    out.push('\n');
    let n_values = report.methods.first().map_or(0, |m| m.values.len());
    for vi in 0..n_values {
        let _ = write!(out, "{:<22}", report.methods[0].values[vi].label);
        for m in &report.methods {
            let v = &m.values[vi];
            let _ = write!(out, "{:>16}", format!("{:.1} ({:.1})", 100.0 * v.abs_bias, 100.0 * v.abs_bias_se));
        }
        for m in &report.methods {
            let _ = write!(out, "{:>10.1}", 10.0 * m.values[vi].sd);
        }
        for m in &report.methods {
            match m.values[vi].coverage_pct {
                Some(c) => {
                    let _ = write!(out, "{c:>10.0}");
                }
                None => {
                    let _ = write!(out, "{:>10}", "-");
                }
            }
        }
        out.push('\n');
    }
    let _ = writeln!(
        out,
        "\ncompleted {} replicates, {} failed, {} sample regenerations",
        report.n_completed, report.n_failed, report.total_regenerations
    );
    out
}

/// Cell counts of a replicate, for diagnostics.
pub fn replicate_cell_counts(rep: &Replicate) -> Vec<Vec<usize>> {
    cell_table(&rep.dataset).counts
}
