//! The `simulate` command.

use std::fs::File;
use std::path::Path;

use anyhow::{bail, Context, Result};
use flexor_core::{format_tables, run_study, ScenarioConfig, SimulationPool, SimulationReport};
use nalgebra::DMatrix;
use serde::Serialize;

use crate::config::RunConfig;
use crate::output::OutputFile;

#[derive(Debug, Clone, Serialize)]
pub struct SimulationOutput {
    pub config: RunConfig,
    pub report: SimulationReport,
}

pub struct SimulationRun {
    pub output: SimulationOutput,
    pub files: Vec<OutputFile>,
    pub summary: String,
}

/// Reads a covariate pool: a header row and numeric columns only.
pub fn load_pool(path: &Path) -> Result<DMatrix<f64>> {
    let file = File::open(path).with_context(|| format!("opening pool {}", path.display()))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let p = reader.headers()?.len();
    let mut values = Vec::new();
    let mut n = 0;
    for (r, rec) in reader.records().enumerate() {
        let rec = rec?;
        if rec.len() != p {
            bail!("pool row {} has {} fields, expected {p}", r + 1, rec.len());
        }
        for (c, field) in rec.iter().enumerate() {
            let v: f64 = field
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .with_context(|| format!("pool row {}, column {}: `{field}` is not a finite number", r + 1, c + 1))?;
            values.push(v);
        }
        n += 1;
    }
    if n == 0 || p == 0 {
        bail!("pool {} is empty", path.display());
    }
    Ok(DMatrix::from_row_slice(n, p, &values))
}

pub fn run_simulation(cfg: &RunConfig) -> Result<SimulationRun> {
    let scenario: &ScenarioConfig = &cfg.simulation;
    let pool = match &cfg.pool {
        Some(path) => SimulationPool::new(load_pool(path)?, scenario.n_clusters, scenario.seed)?,
        None => SimulationPool::synthetic(scenario)?,
    };
    let estimands = if cfg.analysis.estimands.is_empty() {
        ScenarioConfig::default_estimands()
    } else {
        cfg.analysis.estimands.clone()
    };
    let report = run_study(scenario, &pool, &cfg.analysis.methods, &estimands)?;
    let summary = format_tables(&report);
    let output = SimulationOutput {
        config: cfg.effective(),
        report,
    };
    let files = vec![
        OutputFile::json("simulation_report.json", &output)?,
        OutputFile::new("simulation_tables.txt", summary.clone()),
    ];
    Ok(SimulationRun { output, files, summary })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn pool_rejects_text() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(b"a,b\n1,2\n3,x\n").unwrap();
        let err = load_pool(f.path()).unwrap_err().to_string();
        assert!(err.contains("row 2"), "{err}");
    }

    #[test]
    fn pool_reads_matrix() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(b"a,b\n1,2\n3,4\n5,6\n").unwrap();
        let m = load_pool(f.path()).unwrap();
        assert_eq!((m.nrows(), m.ncols(), m[(2, 1)]), (3, 2, 6.0));
    }
}
