//! Experiment records, CSV ingestion, and the design matrices the models
//! are built from.
//!
//! A [`Dataset`] owns its records together with the label→index maps for the
//! two grouping factors and the sorted grid of distinct time stamps. Subsets
//! produced by [`split_by_time`] keep the parent's maps, so group and time
//! indices stay aligned between a training set and its test set.

use std::collections::HashMap;
use std::path::Path;

use indexmap::IndexSet;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One experiment's summary statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub id: String,
    /// Effect estimate.
    pub y: f64,
    /// Estimated sampling variance of `y`.
    pub s2: f64,
    /// Sample size.
    pub n: u64,
    /// Time stamp in periods (e.g. months).
    pub t: f64,
    pub group_a: String,
    pub group_b: String,
    /// Covariates.
    pub x: Vec<f64>,
}

impl ExperimentRecord {
    fn validate(&self, row: usize) -> Result<()> {
        if !(self.s2 > 0.0) || !self.s2.is_finite() {
            return Err(Error::Validation {
                row,
                message: format!("s2 must be positive and finite, got {}", self.s2),
            });
        }
        if self.n < 2 {
            return Err(Error::Validation {
                row,
                message: format!("n must be at least 2, got {}", self.n),
            });
        }
        if !self.y.is_finite() || !self.t.is_finite() || self.x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation {
                row,
                message: "non-finite y, t or covariate".into(),
            });
        }
        Ok(())
    }
}

/// Label→index maps for both grouping factors plus the sorted time grid.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LevelMaps {
    pub group_a: IndexSet<String>,
    pub group_b: IndexSet<String>,
    /// Distinct times, strictly increasing.
    pub times: Vec<f64>,
}

impl LevelMaps {
    pub fn from_records(records: &[ExperimentRecord]) -> Self {
        let mut maps = LevelMaps::default();
        for r in records {
            maps.group_a.insert(r.group_a.clone());
            maps.group_b.insert(r.group_b.clone());
        }
        maps.times = distinct_sorted(records.iter().map(|r| r.t));
        maps
    }

    pub fn n_a(&self) -> usize {
        self.group_a.len()
    }

    pub fn n_b(&self) -> usize {
        self.group_b.len()
    }

    pub fn n_times(&self) -> usize {
        self.times.len()
    }

    pub fn a_index(&self, label: &str) -> Option<usize> {
        self.group_a.get_index_of(label)
    }

    pub fn b_index(&self, label: &str) -> Option<usize> {
        self.group_b.get_index_of(label)
    }

    pub fn time_index(&self, t: f64) -> Option<usize> {
        time_index(&self.times, t)
    }
}

/// Exact-equality lookup of `t` in a strictly increasing grid.
pub fn time_index(grid: &[f64], t: f64) -> Option<usize> {
    let pos = grid.partition_point(|&g| g < t);
    (pos < grid.len() && grid[pos] == t).then_some(pos)
}

pub(crate) fn distinct_sorted(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(|a, b| a.total_cmp(b));
    v.dedup();
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    records: Vec<ExperimentRecord>,
    levels: LevelMaps,
}

impl Dataset {
    /// Validates the records and builds level maps from the observed labels.
    pub fn new(records: Vec<ExperimentRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Validation {
                row: 0,
                message: "dataset has no records".into(),
            });
        }
        let q = records[0].x.len();
        for (i, r) in records.iter().enumerate() {
            r.validate(i + 1)?;
            if r.x.len() != q {
                return Err(Error::Validation {
                    row: i + 1,
                    message: format!("expected {q} covariates, got {}", r.x.len()),
                });
            }
        }
        let levels = LevelMaps::from_records(&records);
        Ok(Dataset { records, levels })
    }

    /// Builds a dataset that shares an existing set of level maps. Records may
    /// be empty and may carry labels missing from `levels`.
    pub fn with_levels(records: Vec<ExperimentRecord>, levels: LevelMaps) -> Result<Self> {
        for (i, r) in records.iter().enumerate() {
            r.validate(i + 1)?;
        }
        Ok(Dataset { records, levels })
    }

    pub fn records(&self) -> &[ExperimentRecord] {
        &self.records
    }

    pub fn levels(&self) -> &LevelMaps {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Number of covariates (0 for an empty dataset).
    pub fn q(&self) -> usize {
        self.records.first().map_or(0, |r| r.x.len())
    }

    /// Records at `indices` (in the given order), keeping this dataset's maps.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            levels: self.levels.clone(),
        }
    }

    /// Distinct times among the records actually present, ascending.
    pub fn observed_times(&self) -> Vec<f64> {
        distinct_sorted(self.records.iter().map(|r| r.t))
    }

    pub fn mean_s2(&self) -> f64 {
        self.records.iter().map(|r| r.s2).sum::<f64>() / self.records.len() as f64
    }

    /// Applies [`delta_log_transform`] to every record.
    pub fn log_transformed(&self) -> Result<Dataset> {
        let mut records = self.records.clone();
        for (i, r) in records.iter_mut().enumerate() {
            let (y, s2) = delta_log_transform(r.y, r.s2).map_err(|e| Error::Validation {
                row: i + 1,
                message: e.to_string(),
            })?;
            r.y = y;
            r.s2 = s2;
        }
        Ok(Dataset {
            records,
            levels: self.levels.clone(),
        })
    }
}

/// Column names used when reading a dataset CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnMap {
    pub id: String,
    pub y: String,
    pub s2: String,
    pub n: String,
    pub t: String,
    pub group_a: String,
    pub group_b: String,
    /// Covariate columns are `<prefix><k>` for k = 1, 2, ...
    pub covariate_prefix: String,
}

impl Default for ColumnMap {
    fn default() -> Self {
        ColumnMap {
            id: "id".into(),
            y: "y".into(),
            s2: "s2".into(),
            n: "n".into(),
            t: "t".into(),
            group_a: "group_a".into(),
            group_b: "group_b".into(),
            covariate_prefix: "x".into(),
        }
    }
}

/// Reads a dataset CSV. The id column is optional; rows without one are
/// numbered from 1.
pub fn load_dataset(path: impl AsRef<Path>, schema: &ColumnMap) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path.as_ref())?;
    let headers = rdr.headers()?.clone();
    let col: HashMap<&str, usize> = headers.iter().enumerate().map(|(i, h)| (h, i)).collect();
    let required = |name: &str| {
        col.get(name)
            .copied()
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let y_col = required(&schema.y)?;
    let s2_col = required(&schema.s2)?;
    let n_col = required(&schema.n)?;
    let t_col = required(&schema.t)?;
    let a_col = required(&schema.group_a)?;
    let b_col = required(&schema.group_b)?;
    let id_col = col.get(schema.id.as_str()).copied();

    let mut covariates: Vec<(u32, usize)> = headers
        .iter()
        .enumerate()
        .filter_map(|(i, h)| {
            h.strip_prefix(schema.covariate_prefix.as_str())
                .and_then(|k| k.parse::<u32>().ok())
                .map(|k| (k, i))
        })
        .collect();
    covariates.sort_unstable();

    let mut records = Vec::new();
    for (row0, rec) in rdr.records().enumerate() {
        let row = row0 + 1;
        let rec = rec?;
        let field = |c: usize| rec.get(c).unwrap_or("");
        let real = |c: usize| -> Result<f64> {
            field(c).parse::<f64>().map_err(|e| Error::Parse {
                row,
                column: headers[c].to_string(),
                message: e.to_string(),
            })
        };
        let n = parse_count(field(n_col)).ok_or_else(|| Error::Parse {
            row,
            column: headers[n_col].to_string(),
            message: format!("expected a non-negative integer, got `{}`", field(n_col)),
        })?;
        let x = covariates
            .iter()
            .map(|&(_, c)| real(c))
            .collect::<Result<Vec<_>>>()?;
        records.push(ExperimentRecord {
            id: id_col.map_or_else(|| row.to_string(), |c| field(c).to_string()),
            y: real(y_col)?,
            s2: real(s2_col)?,
            n,
            t: real(t_col)?,
            group_a: field(a_col).to_string(),
            group_b: field(b_col).to_string(),
            x,
        });
    }
    Dataset::new(records)
}

fn parse_count(s: &str) -> Option<u64> {
    s.parse::<u64>().ok().or_else(|| {
        let v: f64 = s.parse().ok()?;
        (v >= 0.0 && v.fract() == 0.0 && v < 2f64.powi(53)).then_some(v as u64)
    })
}

/// Writes a dataset in the same layout [`load_dataset`] reads with the
/// default column map.
pub fn write_dataset<W: std::io::Write>(writer: W, d: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = ["id", "y", "s2", "n", "t", "group_a", "group_b"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((1..=d.q()).map(|k| format!("x{k}")));
    w.write_record(&header)?;
    for r in d.records() {
        let mut row = vec![
            r.id.clone(),
            r.y.to_string(),
            r.s2.to_string(),
            r.n.to_string(),
            r.t.to_string(),
            r.group_a.clone(),
            r.group_b.clone(),
        ];
        row.extend(r.x.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Log-scale effect and its first-order (delta method) variance:
/// `(log y, s2 / y²)`.
pub fn delta_log_transform(y: f64, s2: f64) -> Result<(f64, f64)> {
    if !(y > 0.0) {
        return Err(Error::Domain(format!("log transform needs y > 0, got {y}")));
    }
    if !(s2 > 0.0) {
        return Err(Error::Domain(format!("variance must be positive, got {s2}")));
    }
    Ok((y.ln(), s2 / (y * y)))
}

/// Splits into (train, test), putting the `ceil(m·(1−train_fraction))`
/// latest experiments in the test set. Ties in `t` go to the test set
/// latest-input-first. Both halves keep input order and the parent's maps.
pub fn split_by_time(d: &Dataset, train_fraction: f64) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Split(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let m = d.len();
    let n_test = ((m as f64) * (1.0 - train_fraction) - 1e-9).ceil().max(0.0) as usize;
    if n_test == 0 || n_test >= m {
        return Err(Error::Split(format!(
            "split of {m} records at fraction {train_fraction} leaves an empty side"
        )));
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| {
        d.records[j]
            .t
            .total_cmp(&d.records[i].t)
            .then_with(|| j.cmp(&i))
    });
    let mut is_test = vec![false; m];
    for &i in &order[..n_test] {
        is_test[i] = true;
    }
    let train: Vec<usize> = (0..m).filter(|&i| !is_test[i]).collect();
    let test: Vec<usize> = (0..m).filter(|&i| is_test[i]).collect();
    Ok((d.subset(&train), d.subset(&test)))
}

/// Indicator matrices, covariates, and `log n` offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrices {
    pub za: DMatrix<f64>,
    pub zb: DMatrix<f64>,
    pub zc: DMatrix<f64>,
    pub x: DMatrix<f64>,
    pub offsets: Vec<f64>,
}

pub fn build_design(d: &Dataset) -> Result<DesignMatrices> {
    let m = d.len();
    let lv = d.levels();
    let mut za = DMatrix::zeros(m, lv.n_a());
    let mut zb = DMatrix::zeros(m, lv.n_b());
    let mut zc = DMatrix::zeros(m, lv.n_times());
    let mut x = DMatrix::zeros(m, d.q());
    let mut offsets = Vec::with_capacity(m);
    for (i, r) in d.records().iter().enumerate() {
        let unresolved = |what: &str| Error::Validation {
            row: i + 1,
            message: format!("{what} does not resolve through the level maps"),
        };
        za[(i, lv.a_index(&r.group_a).ok_or_else(|| unresolved("group_a"))?)] = 1.0;
        zb[(i, lv.b_index(&r.group_b).ok_or_else(|| unresolved("group_b"))?)] = 1.0;
        zc[(i, lv.time_index(r.t).ok_or_else(|| unresolved("t"))?)] = 1.0;
        for (k, v) in r.x.iter().enumerate() {
            x[(i, k)] = *v;
        }
        offsets.push((r.n as f64).ln());
    }
    Ok(DesignMatrices {
        za,
        zb,
        zc,
        x,
        offsets,
    })
}
