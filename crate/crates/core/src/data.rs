//! Analysis dataset: study and group labels, covariates and outcomes.
//!
//! Labels are 1-based in files and in user-facing messages; inside a
//! [`Dataset`] they are stored as 0-based indices so that cell `(s, z)` maps
//! to `s * n_groups + z`.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::Path;

use log::warn;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::DataError;

/// Column mapping for the input CSV.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub study_col: String,
    pub group_col: String,
    pub outcome_cols: Vec<String>,
    pub covariate_cols: Vec<String>,
}

impl Schema {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self, DataError> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_reader(file).map_err(|e| DataError::Config(e.to_string()))
    }
}

/// Immutable, validated analysis table.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    study: Vec<usize>,
    group: Vec<usize>,
    n_studies: usize,
    n_groups: usize,
    covariates: DMatrix<f64>,
    outcomes: DMatrix<f64>,
    covariate_names: Vec<String>,
    outcome_names: Vec<String>,
}

impl Dataset {
    /// Builds a dataset from 0-based study and group indices.
    ///
    /// Fails if any label is out of range, any value is non-finite, any
    /// `(study, group)` cell is empty, or a covariate column is constant.
    pub fn new(
        study: Vec<usize>,
        group: Vec<usize>,
        n_studies: usize,
        n_groups: usize,
        covariates: DMatrix<f64>,
        outcomes: DMatrix<f64>,
    ) -> Result<Self, DataError> {
        let covariate_names = (1..=covariates.ncols()).map(|j| format!("x{j}")).collect();
        let outcome_names = (1..=outcomes.ncols()).map(|l| format!("y{l}")).collect();
        let d = Dataset {
            study,
            group,
            n_studies,
            n_groups,
            covariates,
            outcomes,
            covariate_names,
            outcome_names,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn with_names(
        mut self,
        covariate_names: Vec<String>,
        outcome_names: Vec<String>,
    ) -> Result<Self, DataError> {
        if covariate_names.len() != self.n_covariates() || outcome_names.len() != self.n_outcomes()
        {
            return Err(DataError::Dimension(
                "name lists must match covariate and outcome counts".into(),
            ));
        }
        self.covariate_names = covariate_names;
        self.outcome_names = outcome_names;
        Ok(self)
    }

    fn validate(&self) -> Result<(), DataError> {
        let n = self.study.len();
        if n == 0 {
            return Err(DataError::Empty);
        }
        if self.n_studies == 0 || self.n_groups == 0 {
            return Err(DataError::Dimension("J and K must be positive".into()));
        }
        if self.group.len() != n || self.covariates.nrows() != n || self.outcomes.nrows() != n {
            return Err(DataError::Dimension(format!(
                "{} study labels, {} group labels, {} covariate rows, {} outcome rows",
                n,
                self.group.len(),
                self.covariates.nrows(),
                self.outcomes.nrows()
            )));
        }
        if self.outcomes.ncols() == 0 {
            return Err(DataError::Dimension("at least one outcome is required".into()));
        }
        for i in 0..n {
            if self.study[i] >= self.n_studies || self.group[i] >= self.n_groups {
                return Err(DataError::Dimension(format!(
                    "subject {i} has label ({},{}) outside {}x{}",
                    self.study[i] + 1,
                    self.group[i] + 1,
                    self.n_studies,
                    self.n_groups
                )));
            }
        }
        if let Some(pos) = self.covariates.iter().chain(self.outcomes.iter()).position(|v| !v.is_finite()) {
            return Err(DataError::Dimension(format!("non-finite value at flat position {pos}")));
        }
        let table = cell_table(self);
        for s in 0..self.n_studies {
            for z in 0..self.n_groups {
                if table.counts[s][z] == 0 {
                    return Err(DataError::Positivity {
                        study: s + 1,
                        group: z + 1,
                    });
                }
            }
        }
        for (j, col) in self.covariates.column_iter().enumerate() {
            let first = col[0];
            if col.iter().all(|&v| v == first) {
                return Err(DataError::ConstantCovariate(
                    self.covariate_names
                        .get(j)
                        .cloned()
                        .unwrap_or_else(|| format!("x{}", j + 1)),
                ));
            }
        }
        Ok(())
    }

    pub fn n_subjects(&self) -> usize {
        self.study.len()
    }
    pub fn n_studies(&self) -> usize {
        self.n_studies
    }
    pub fn n_groups(&self) -> usize {
        self.n_groups
    }
    pub fn n_cells(&self) -> usize {
        self.n_studies * self.n_groups
    }
    pub fn n_covariates(&self) -> usize {
        self.covariates.ncols()
    }
    pub fn n_outcomes(&self) -> usize {
        self.outcomes.ncols()
    }
    /// 0-based study index per subject.
    pub fn study(&self) -> &[usize] {
        &self.study
    }
    /// 0-based group index per subject.
    pub fn group(&self) -> &[usize] {
        &self.group
    }
    /// Cell index `s * K + z` of subject `i`.
    pub fn cell(&self, i: usize) -> usize {
        self.study[i] * self.n_groups + self.group[i]
    }
    pub fn covariates(&self) -> &DMatrix<f64> {
        &self.covariates
    }
    pub fn outcomes(&self) -> &DMatrix<f64> {
        &self.outcomes
    }
    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }
    pub fn outcome_names(&self) -> &[String] {
        &self.outcome_names
    }

    /// Rows `indices` (repetitions allowed) as a new dataset.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset, DataError> {
        let covariates = self.covariates.select_rows(indices);
        let outcomes = self.outcomes.select_rows(indices);
        let d = Dataset {
            study: indices.iter().map(|&i| self.study[i]).collect(),
            group: indices.iter().map(|&i| self.group[i]).collect(),
            n_studies: self.n_studies,
            n_groups: self.n_groups,
            covariates,
            outcomes,
            covariate_names: self.covariate_names.clone(),
            outcome_names: self.outcome_names.clone(),
        };
        d.validate()?;
        Ok(d)
    }

    /// Writes the dataset with the column layout of `schema`
    /// (study, group, outcomes, covariates).
    pub fn write_csv(&self, path: impl AsRef<Path>, schema: &Schema) -> Result<(), DataError> {
        if schema.outcome_cols.len() != self.n_outcomes()
            || schema.covariate_cols.len() != self.n_covariates()
        {
            return Err(DataError::Dimension("schema does not match dataset".into()));
        }
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec![schema.study_col.clone(), schema.group_col.clone()];
        header.extend(schema.outcome_cols.iter().cloned());
        header.extend(schema.covariate_cols.iter().cloned());
        w.write_record(&header)?;
        for i in 0..self.n_subjects() {
            let mut rec = vec![(self.study[i] + 1).to_string(), (self.group[i] + 1).to_string()];
            rec.extend(self.outcomes.row(i).iter().map(|v| v.to_string()));
            rec.extend(self.covariates.row(i).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|source| DataError::Io {
            path: "csv writer".into(),
            source,
        })?;
        Ok(())
    }
}

/// Per-cell subject counts and proportions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellTable {
    pub counts: Vec<Vec<usize>>,
    pub proportions: Vec<Vec<f64>>,
}

pub fn cell_table(d: &Dataset) -> CellTable {
    let mut counts = vec![vec![0usize; d.n_groups]; d.n_studies];
    for (&s, &z) in d.study.iter().zip(&d.group) {
        counts[s][z] += 1;
    }
    let n = d.n_subjects() as f64;
    let proportions = counts
        .iter()
        .map(|row| row.iter().map(|&c| c as f64 / n).collect())
        .collect();
    CellTable {
        counts,
        proportions,
    }
}

fn parse_label(raw: &str, row: usize, column: &str) -> Result<i64, DataError> {
    let trimmed = raw.trim();
    let err = || DataError::Label {
        row,
        column: column.to_string(),
        value: raw.to_string(),
    };
    if trimmed.is_empty() {
        return Err(DataError::MissingValue {
            row,
            column: column.to_string(),
        });
    }
    if let Ok(v) = trimmed.parse::<i64>() {
        return if v >= 1 { Ok(v) } else { Err(err()) };
    }
    match trimmed.parse::<f64>() {
        Ok(v) if v.fract() == 0.0 && v >= 1.0 && v < 1e15 => Ok(v as i64),
        _ => Err(err()),
    }
}

fn parse_value(raw: &str, row: usize, column: &str) -> Result<f64, DataError> {
    let trimmed = raw.trim();
    if trimmed.is_empty() || trimmed.eq_ignore_ascii_case("na") || trimmed.eq_ignore_ascii_case("nan") {
        return Err(DataError::MissingValue {
            row,
            column: column.to_string(),
        });
    }
    trimmed
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| DataError::Parse {
            row,
            column: column.to_string(),
            value: raw.to_string(),
        })
}

/// Maps observed labels onto `0..m`, warning when they are not `1..=m`.
fn remap_labels(raw: &[i64], column: &str) -> (Vec<usize>, Vec<i64>) {
    let mut distinct: Vec<i64> = raw.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    let consecutive = distinct.iter().enumerate().all(|(k, &v)| v == k as i64 + 1);
    if !consecutive {
        warn!(
            "column `{column}` labels {:?} are not consecutive from 1; remapping in sorted order",
            distinct
        );
    }
    let index: BTreeMap<i64, usize> = distinct.iter().enumerate().map(|(k, &v)| (v, k)).collect();
    (raw.iter().map(|v| index[v]).collect(), distinct)
}

/// Reads and validates a CSV file. Row numbers in errors are 1-based data rows.
pub fn load_dataset(path: impl AsRef<Path>, schema: &Schema) -> Result<Dataset, DataError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(file);
    let header = reader.headers()?.clone();
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };
    let study_idx = find(&schema.study_col)?;
    let group_idx = find(&schema.group_col)?;
    let outcome_idx = schema.outcome_cols.iter().map(|c| find(c)).collect::<Result<Vec<_>, _>>()?;
    let covariate_idx = schema.covariate_cols.iter().map(|c| find(c)).collect::<Result<Vec<_>, _>>()?;

    let mut study_raw = Vec::new();
    let mut group_raw = Vec::new();
    let mut outcome_vals = Vec::new();
    let mut covariate_vals = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        let row = r + 1;
        let get = |idx: usize| record.get(idx).unwrap_or("");
        study_raw.push(parse_label(get(study_idx), row, &schema.study_col)?);
        group_raw.push(parse_label(get(group_idx), row, &schema.group_col)?);
        for (&idx, name) in outcome_idx.iter().zip(&schema.outcome_cols) {
            outcome_vals.push(parse_value(get(idx), row, name)?);
        }
        for (&idx, name) in covariate_idx.iter().zip(&schema.covariate_cols) {
            covariate_vals.push(parse_value(get(idx), row, name)?);
        }
    }
    let n = study_raw.len();
    if n == 0 {
        return Err(DataError::Empty);
    }
    let (study, study_labels) = remap_labels(&study_raw, &schema.study_col);
    let (group, group_labels) = remap_labels(&group_raw, &schema.group_col);
    let covariates = DMatrix::from_row_slice(n, schema.covariate_cols.len(), &covariate_vals);
    let outcomes = DMatrix::from_row_slice(n, schema.outcome_cols.len(), &outcome_vals);
    Dataset::new(
        study,
        group,
        study_labels.len(),
        group_labels.len(),
        covariates,
        outcomes,
    )
    .and_then(|d| d.with_names(schema.covariate_cols.clone(), schema.outcome_cols.clone()))
    .map_err(|e| match e {
        DataError::Positivity { study, group } => DataError::Positivity {
            study: study_labels[study - 1] as usize,
            group: group_labels[group - 1] as usize,
        },
        other => other,
    })
}
