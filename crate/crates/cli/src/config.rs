//! Run configuration: one JSON document per run, with a few flag overrides.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use flexor_core::uncertainty::BootstrapOptions;
use flexor_core::{AnalysisPlan, ScenarioConfig, Schema};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    #[default]
    Analyze,
    Simulate,
    WeightsOnly,
}

/// Everything a run needs. Missing fields take their defaults; the resolved
/// document (minus output location and thread count) is embedded in every
/// report so that a run can be repeated from its own output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub command: Command,
    /// Input CSV for `analyze` and `weights-only`.
    pub data: Option<PathBuf>,
    pub schema: Option<Schema>,
    pub analysis: AnalysisPlan,
    /// Adds a correlation estimand for every pair of outcomes.
    pub pairwise_correlations: bool,
    /// Sandwich standard errors and Wald intervals.
    pub asymptotic: bool,
    /// `n_boot = 0` disables the bootstrap.
    pub bootstrap: BootstrapOptions,
    pub simulation: ScenarioConfig,
    /// Covariate pool CSV for `simulate` (header row, numeric columns).
    /// A synthetic pool is used when absent.
    pub pool: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            command: Command::Analyze,
            data: None,
            schema: None,
            analysis: AnalysisPlan::default(),
            pairwise_correlations: false,
            asymptotic: true,
            bootstrap: BootstrapOptions::default(),
            simulation: ScenarioConfig::default(),
            pool: None,
            output_dir: None,
            threads: None,
        }
    }
}

fn resolve(base: &Path, p: &Path) -> Result<PathBuf> {
    let joined = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    joined
        .canonicalize()
        .with_context(|| format!("input path {} does not exist", joined.display()))
}

impl RunConfig {
    /// Reads a config file and resolves input paths against its directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let base = if base.as_os_str().is_empty() { PathBuf::from(".") } else { base };
        if let Some(d) = &cfg.data {
            cfg.data = Some(resolve(&base, d)?);
        }
        if let Some(p) = &cfg.pool {
            cfg.pool = Some(resolve(&base, p)?);
        }
        if let Some(o) = &cfg.output_dir {
            if o.is_relative() {
                cfg.output_dir = Some(base.join(o));
            }
        }
        Ok(cfg)
    }

    /// Replaces every random seed of the run.
    pub fn apply_seed(&mut self, seed: u64) {
        self.bootstrap.seed = seed;
        self.analysis.flexor.seed = seed;
        self.simulation.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        match self.command {
            Command::Analyze | Command::WeightsOnly => {
                if self.data.is_none() {
                    bail!("`data` is required for the {:?} command", self.command);
                }
                if self.schema.is_none() {
                    bail!("`schema` is required for the {:?} command", self.command);
                }
                if self.analysis.methods.is_empty() {
                    bail!("`analysis.methods` is empty");
                }
                let mut stems: Vec<String> =
                    self.analysis.methods.iter().map(|m| crate::output::file_stem(&m.name)).collect();
                stems.sort();
                if stems.windows(2).any(|w| w[0] == w[1]) {
                    bail!("method names must be distinct after mapping to file names: {stems:?}");
                }
            }
            Command::Simulate => self.simulation.validate()?,
        }
        let level = self.bootstrap.level;
        if !(level > 0.0 && level < 1.0) {
            bail!("`bootstrap.level` must lie in (0, 1), got {level}");
        }
        if self.bootstrap.n_boot == 1 {
            bail!("`bootstrap.n_boot` must be 0 (disabled) or at least 2");
        }
        if self.threads == Some(0) {
            bail!("thread count must be positive");
        }
        Ok(())
    }

    /// The configuration as embedded in reports.
    pub fn effective(&self) -> RunConfig {
        RunConfig {
            output_dir: None,
            threads: None,
            ..self.clone()
        }
    }
}
