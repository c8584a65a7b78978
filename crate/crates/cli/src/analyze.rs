//! The `analyze` and `weights-only` commands.

use std::fmt::Write as _;

use anyhow::{Context, Result};
use flexor_core::estimation::feature_matrix;
use flexor_core::flexor::RestartSummary;
use flexor_core::uncertainty::{asymptotic_interval, bootstrap, estimand_tau2, BootstrapResult, SandwichContext};
use flexor_core::{
    balance_diagnostics, cell_table, load_dataset, run_pipeline, AnalysisPlan, BalanceDiagnostics, Dataset, Estimand,
    FeatureSpec, Functional, MethodResult, PipelineResult, Tilt,
};
use serde::Serialize;

use crate::config::{Command, RunConfig};
use crate::output::{file_stem, OutputFile};

#[derive(Debug, Clone, Serialize)]
pub struct DatasetSummary {
    pub n_subjects: usize,
    pub n_studies: usize,
    pub n_groups: usize,
    pub covariates: Vec<String>,
    pub outcomes: Vec<String>,
    /// Subjects per `(study, group)` cell, `J x K`.
    pub cell_counts: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct MpsSummary {
    /// Row `c-1` holds the coefficients of cell `c` (intercept first); cell 0
    /// is the reference.
    pub omega: Vec<Vec<f64>>,
    pub converged: bool,
    pub n_iterations: usize,
    pub log_likelihood: f64,
    pub final_gradient_norm: f64,
    pub ridge: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FlexorSummary {
    pub trajectory: Vec<f64>,
    pub converged: bool,
    pub n_outer_iterations: usize,
    pub best_restart: usize,
    pub restarts: Vec<RestartSummary>,
}

#[derive(Debug, Clone, Serialize)]
pub struct MethodReport {
    pub name: String,
    pub tilt: Tilt,
    pub ess: f64,
    pub percent_ess: f64,
    pub gamma: Vec<f64>,
    pub theta: Vec<f64>,
    pub n_floored: usize,
    pub warnings: Vec<String>,
    pub max_abs_smd: f64,
    pub balance: BalanceDiagnostics,
    pub flexor: Option<FlexorSummary>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
}

impl Interval {
    pub fn excludes_zero(&self) -> bool {
        self.lower > 0.0 || self.upper < 0.0
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EstimateReport {
    pub method: String,
    pub estimand: String,
    /// Group label for per-group values; absent for contrasts.
    pub group: Option<usize>,
    pub point: f64,
    pub se_asymptotic: Option<f64>,
    pub ci_asymptotic: Option<Interval>,
    pub se_bootstrap: Option<f64>,
    pub ci_bootstrap: Option<Interval>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BootstrapSummary {
    pub n_boot: usize,
    pub seed: u64,
    pub level: f64,
    pub reoptimize_flexor: bool,
    pub n_attempts: usize,
    pub n_failed_attempts: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct AnalysisReport {
    pub config: RunConfig,
    pub dataset: DatasetSummary,
    pub mps: MpsSummary,
    pub methods: Vec<MethodReport>,
    pub estimates: Vec<EstimateReport>,
    pub bootstrap: Option<BootstrapSummary>,
}

/// One correlation estimate whose bootstrap interval excludes zero.
#[derive(Debug, Clone, Serialize)]
pub struct SignificantCorrelation {
    pub method: String,
    pub group: usize,
    pub estimand: String,
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
}

pub struct AnalysisRun {
    pub report: AnalysisReport,
    pub files: Vec<OutputFile>,
    pub summary: String,
}

/// Correlation estimands for every pair of outcomes, named `cor(a,b)`.
pub fn pairwise_correlation_estimands(d: &Dataset) -> Vec<Estimand> {
    let names = d.outcome_names();
    let mut out = Vec::new();
    for a in 0..names.len() {
        for b in a + 1..names.len() {
            out.push(Estimand {
                name: format!("cor({},{})", names[a], names[b]),
                feature: FeatureSpec::correlation(a + 1, b + 1),
            });
        }
    }
    out
}

fn dataset_summary(d: &Dataset) -> DatasetSummary {
    DatasetSummary {
        n_subjects: d.n_subjects(),
        n_studies: d.n_studies(),
        n_groups: d.n_groups(),
        covariates: d.covariate_names().to_vec(),
        outcomes: d.outcome_names().to_vec(),
        cell_counts: cell_table(d).counts,
    }
}

fn mps_summary(r: &PipelineResult) -> MpsSummary {
    let m = &r.model;
    MpsSummary {
        omega: m.omega.row_iter().map(|row| row.iter().copied().collect()).collect(),
        converged: m.converged,
        n_iterations: m.n_iterations,
        log_likelihood: m.log_likelihood,
        final_gradient_norm: m.final_gradient_norm,
        ridge: m.ridge,
    }
}

fn method_report(m: &MethodResult, d: &Dataset) -> Result<MethodReport> {
    let balance = balance_diagnostics(&m.weights, d)?;
    Ok(MethodReport {
        name: m.name.clone(),
        tilt: m.weights.spec.tilt,
        ess: m.weights.ess,
        percent_ess: m.weights.percent_ess,
        gamma: m.weights.spec.gamma.clone(),
        theta: m.weights.spec.theta.clone(),
        n_floored: m.weights.n_floored,
        warnings: m.weights.warnings.clone(),
        max_abs_smd: balance.max_abs_smd(),
        balance,
        flexor: m.flexor.as_ref().map(|f| FlexorSummary {
            trajectory: f.trajectory.clone(),
            converged: f.converged,
            n_outer_iterations: f.n_outer_iterations,
            best_restart: f.best_restart,
            restarts: f.restarts.clone(),
        }),
    })
}

fn weights_csv(m: &MethodResult, d: &Dataset) -> Result<Vec<u8>> {
    let rho = &m.weights.rho_tilde;
    let mean = rho.iter().sum::<f64>() / rho.len() as f64;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["subject", "study", "group", "rho_tilde", "weight"])?;
    for (i, r) in rho.iter().enumerate() {
        w.write_record([
            (i + 1).to_string(),
            (d.study()[i] + 1).to_string(),
            (d.group()[i] + 1).to_string(),
            r.to_string(),
            (r / mean).to_string(),
        ])?;
    }
    Ok(w.into_inner()?)
}

/// Standard error, lower and upper limit.
type WaldValue = (f64, f64, f64);

/// Sandwich SEs and Wald intervals for one method, or a note per value when
/// the variance cannot be formed.
fn asymptotic_values(
    ctx: &SandwichContext,
    m: &MethodResult,
    plan: &AnalysisPlan,
    d: &Dataset,
    level: f64,
) -> Vec<Vec<Result<WaldValue, String>>> {
    plan.estimands
        .iter()
        .zip(&m.estimates)
        .map(|(e, est)| {
            let points = est.values();
            let features = feature_matrix(d, &e.feature.transforms);
            let tau2 = ctx
                .variance(&m.weights.spec, plan.probability_floor, &features)
                .and_then(|(v, g)| estimand_tau2(&v, &g, &e.feature))
                .map_err(|err| err.to_string());
            points
                .iter()
                .enumerate()
                .map(|(vi, &p)| {
                    let t = tau2.clone()?[vi];
                    let ci = asymptotic_interval(p, t, d.n_subjects(), level).map_err(|err| err.to_string())?;
                    Ok(((t / d.n_subjects() as f64).sqrt(), ci.lower, ci.upper))
                })
                .collect()
        })
        .collect()
}

fn estimate_reports(
    cfg: &RunConfig,
    plan: &AnalysisPlan,
    d: &Dataset,
    result: &PipelineResult,
    boot: Option<&BootstrapResult>,
) -> Result<Vec<EstimateReport>> {
    let level = cfg.bootstrap.level;
    let ctx = if cfg.asymptotic {
        Some(SandwichContext::new(&result.model, d).map_err(|e| e.to_string()))
    } else {
        None
    };
    let mut out = Vec::new();
    for (mi, m) in result.methods.iter().enumerate() {
        let asym = match &ctx {
            Some(Ok(c)) => Some(asymptotic_values(c, m, plan, d, level)),
            _ => None,
        };
        for (ei, (e, est)) in plan.estimands.iter().zip(&m.estimates).enumerate() {
            let contrast = e.feature.functional.is_contrast();
            for (vi, &point) in est.values().iter().enumerate() {
                let mut notes = Vec::new();
                let (mut se_a, mut ci_a) = (None, None);
                match (&ctx, &asym) {
                    (Some(Err(err)), _) => notes.push(format!("asymptotic: {err}")),
                    (_, Some(a)) => match &a[ei][vi] {
                        Ok((se, lower, upper)) => {
                            se_a = Some(*se);
                            ci_a = Some(Interval {
                                lower: *lower,
                                upper: *upper,
                                level,
                            });
                        }
                        Err(err) => notes.push(format!("asymptotic: {err}")),
                    },
                    _ => {}
                }
                let (se_b, ci_b) = match boot {
                    Some(b) => {
                        let ci = b.interval(mi, ei, vi, point);
                        (
                            Some(b.standard_error(mi, ei, vi)),
                            Some(Interval {
                                lower: ci.lower,
                                upper: ci.upper,
                                level,
                            }),
                        )
                    }
                    None => (None, None),
                };
                out.push(EstimateReport {
                    method: m.name.clone(),
                    estimand: e.name.clone(),
                    group: (!contrast).then_some(vi + 1),
                    point,
                    se_asymptotic: se_a,
                    ci_asymptotic: ci_a,
                    se_bootstrap: se_b,
                    ci_bootstrap: ci_b,
                    notes,
                });
            }
        }
    }
    Ok(out)
}

fn correlation_listing(plan: &AnalysisPlan, estimates: &[EstimateReport]) -> Result<Vec<u8>> {
    let correlation_names: Vec<&str> = plan
        .estimands
        .iter()
        .filter(|e| e.feature.functional == Functional::Correlation)
        .map(|e| e.name.as_str())
        .collect();
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(["method", "group", "estimand", "point", "lower", "upper"])?;
    for e in estimates {
        let (Some(group), Some(ci)) = (e.group, e.ci_bootstrap) else {
            continue;
        };
        if correlation_names.contains(&e.estimand.as_str()) && ci.excludes_zero() {
            let row = SignificantCorrelation {
                method: e.method.clone(),
                group,
                estimand: e.estimand.clone(),
                point: e.point,
                lower: ci.lower,
                upper: ci.upper,
            };
            w.serialize(&row)?;
        }
    }
    Ok(w.into_inner()?)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("-".into(), |x| format!("{x:.4}"))
}

fn render_summary(report: &AnalysisReport) -> String {
    let mut s = String::new();
    let d = &report.dataset;
    let _ = writeln!(s, "{} subjects, {} studies, {} groups", d.n_subjects, d.n_studies, d.n_groups);
    let _ = writeln!(s);
    let _ = writeln!(s, "{:<16} {:>10} {:>8} {:>10}", "method", "ESS", "%ESS", "max|SMD|");
    for m in &report.methods {
        let _ = writeln!(s, "{:<16} {:>10.1} {:>7.1}% {:>10.4}", m.name, m.ess, m.percent_ess, m.max_abs_smd);
    }
    if !report.estimates.is_empty() {
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "{:<12} {:<20} {:>5} {:>11} {:>9} {:>23} {:>23}",
            "method", "estimand", "group", "estimate", "SE", "asymptotic CI", "bootstrap CI"
        );
        for e in &report.estimates {
            let ci = |c: Option<Interval>| c.map_or("-".into(), |c| format!("[{:.4}, {:.4}]", c.lower, c.upper));
            let _ = writeln!(
                s,
                "{:<12} {:<20} {:>5} {:>11.4} {:>9} {:>23} {:>23}",
                e.method,
                e.estimand,
                e.group.map_or("-".into(), |g| g.to_string()),
                e.point,
                fmt_opt(e.se_asymptotic.or(e.se_bootstrap)),
                ci(e.ci_asymptotic),
                ci(e.ci_bootstrap)
            );
        }
    }
    s
}

/// Runs `analyze` (or `weights-only`) and renders every output file.
pub fn run_analysis(cfg: &RunConfig) -> Result<AnalysisRun> {
    let data = cfg.data.as_ref().context("`data` is required")?;
    let schema = cfg.schema.as_ref().context("`schema` is required")?;
    let d = load_dataset(data, schema).with_context(|| format!("loading {}", data.display()))?;
    let weights_only = cfg.command == Command::WeightsOnly;
    let mut plan = cfg.analysis.clone();
    if weights_only {
        plan.estimands.clear();
    } else if cfg.pairwise_correlations {
        plan.estimands.extend(pairwise_correlation_estimands(&d));
    }
    let result = run_pipeline(&d, &plan, None, None)?;
    let boot = if !weights_only && cfg.bootstrap.n_boot > 0 && !plan.estimands.is_empty() {
        Some(bootstrap(&d, &plan, &result, &cfg.bootstrap)?)
    } else {
        None
    };
    let estimates = if weights_only {
        Vec::new()
    } else {
        estimate_reports(cfg, &plan, &d, &result, boot.as_ref())?
    };
    let report = AnalysisReport {
        config: cfg.effective(),
        dataset: dataset_summary(&d),
        mps: mps_summary(&result),
        methods: result.methods.iter().map(|m| method_report(m, &d)).collect::<Result<_>>()?,
        estimates,
        bootstrap: boot.as_ref().map(|b| BootstrapSummary {
            n_boot: b.n_boot(),
            seed: cfg.bootstrap.seed,
            level: b.level,
            reoptimize_flexor: cfg.bootstrap.reoptimize_flexor,
            n_attempts: b.n_attempts,
            n_failed_attempts: b.n_failed_attempts,
        }),
    };
    let summary = render_summary(&report);
    let mut files = vec![OutputFile::json("report.json", &report)?];
    for m in &result.methods {
        files.push(OutputFile::new(format!("weights_{}.csv", file_stem(&m.name)), weights_csv(m, &d)?));
    }
    if !weights_only {
        files.push(OutputFile::new("significant_correlations.csv", correlation_listing(&plan, &report.estimates)?));
    }
    files.push(OutputFile::new("summary.txt", summary.clone()));
    Ok(AnalysisRun { report, files, summary })
}
