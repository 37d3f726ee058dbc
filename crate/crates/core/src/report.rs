//! Plot-ready posterior summaries of group effects and the time effect.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{hpd_interval, median};
use crate::io::atomic_write;
use crate::model::{Model, ModelSpec};
use crate::sampler::PosteriorDraws;

pub const GROUP_FILE: &str = "group_effects.csv";
pub const TIME_FILE: &str = "time_effect.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub block: String,
    pub label: String,
    pub median: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeRow {
    pub time: f64,
    pub median: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub groups: Vec<GroupRow>,
    /// `None` when the model has no time effect.
    pub time: Option<Vec<TimeRow>>,
}

fn summary(values: &[f64], alpha: f64) -> Result<(f64, f64, f64)> {
    let (l, u) = hpd_interval(values, alpha)?;
    Ok((median(values), l, u))
}

/// Median and HPD interval of every group effect (`theta_a`, `theta_b` and,
/// with a variance layer, `delta_a`, `delta_b`) and of the time effect on
/// its grid, in ascending time order.
pub fn build_report(draws: &PosteriorDraws, train: &Dataset, spec: &ModelSpec, alpha: f64) -> Result<Report> {
    let model = Model::new(train, spec)?;
    if model.layout() != &draws.layout {
        return Err(Error::Contract("draws do not belong to this model and dataset".into()));
    }
    let lv = train.levels();
    let mut groups = Vec::new();
    for (block, labels) in [
        ("theta_a", &lv.group_a),
        ("theta_b", &lv.group_b),
        ("delta_a", &lv.group_a),
        ("delta_b", &lv.group_b),
    ] {
        let Some(b) = draws.layout.get(block) else { continue };
        for (k, label) in labels.iter().enumerate() {
            let (median, lower, upper) = summary(&draws.pooled_column(b.offset + k), alpha)?;
            groups.push(GroupRow {
                block: block.into(),
                label: label.clone(),
                median,
                lower,
                upper,
            });
        }
    }
    let time = match draws.layout.get("theta_c") {
        None => None,
        Some(b) => Some(
            model
                .time_grid()
                .iter()
                .enumerate()
                .map(|(k, &t)| {
                    let (median, lower, upper) = summary(&draws.pooled_column(b.offset + k), alpha)?;
                    Ok(TimeRow { time: t, median, lower, upper })
                })
                .collect::<Result<Vec<_>>>()?,
        ),
    };
    Ok(Report { groups, time })
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    atomic_write(path, |w| {
        let mut wr = csv::Writer::from_writer(w);
        for r in rows {
            wr.serialize(r)?;
        }
        wr.flush()?;
        Ok(())
    })
}

/// Writes the report CSVs into `dir`. Returns the written files and notes
/// about skipped ones.
pub fn emit_report(
    draws: &PosteriorDraws,
    train: &Dataset,
    spec: &ModelSpec,
    alpha: f64,
    dir: impl AsRef<Path>,
) -> Result<(Vec<PathBuf>, Vec<String>)> {
    let report = build_report(draws, train, spec, alpha)?;
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    let mut notes = Vec::new();
    let p = dir.join(GROUP_FILE);
    write_rows(&p, &report.groups)?;
    files.push(p);
    match &report.time {
        Some(rows) => {
            let p = dir.join(TIME_FILE);
            write_rows(&p, rows)?;
            files.push(p);
        }
        None => notes.push(format!("{TIME_FILE} skipped: {} has no time effect", spec.kind)),
    }
    Ok((files, notes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ExperimentRecord;
    use crate::model::{Layout, ModelKind};
    use crate::sampler::ChainDraws;

    fn data() -> Dataset {
        let recs = [(5.0, "x"), (2.0, "y"), (3.0, "x"), (1.0, "y"), (4.0, "x"), (2.0, "x")]
            .iter()
            .enumerate()
            .map(|(i, &(t, a))| ExperimentRecord {
                id: i.to_string(),
                y: 0.1 * i as f64,
                s2: 1.0,
                n: 10,
                t,
                group_a: a.into(),
                group_b: "b".into(),
                x: vec![],
            })
            .collect();
        Dataset::new(recs).unwrap()
    }

    fn draws_for(layout: &Layout) -> PosteriorDraws {
        let p = layout.dim();
        let samples = 40;
        PosteriorDraws {
            layout: layout.clone(),
            samples,
            chains: vec![ChainDraws {
                values: (0..samples * p).map(|i| ((i * 7919) % 101) as f64 / 10.0 + 0.1).collect(),
                accept_rate: 1.0,
                step_size: 1.0,
                divergences: 0,
                inv_mass: vec![],
            }],
        }
    }

    #[test]
    fn gp_time_rows_follow_grid() {
        let d = data();
        let spec = ModelSpec::new(ModelKind::ReGp);
        let m = Model::new(&d, &spec).unwrap();
        let draws = draws_for(m.layout());
        let r = build_report(&draws, &d, &spec, 0.05).unwrap();
        let t = r.time.unwrap();
        assert_eq!(t.len(), 5);
        assert!(t.windows(2).all(|w| w[0].time < w[1].time));
        assert_eq!(r.groups.len(), 3);
    }

    #[test]
    fn fe_has_no_time_file() {
        let d = data();
        let spec = ModelSpec::new(ModelKind::Fe);
        let m = Model::new(&d, &spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (files, notes) = emit_report(&draws_for(m.layout()), &d, &spec, 0.05, dir.path()).unwrap();
        assert_eq!(files.len(), 1);
        assert_eq!(notes.len(), 1);
        assert!(!dir.path().join(TIME_FILE).exists());
    }

    #[test]
    fn group_rows_match_direct_summary() {
        let d = data();
        let spec = ModelSpec::new(ModelKind::Stream);
        let m = Model::new(&d, &spec).unwrap();
        let draws = draws_for(m.layout());
        let r = build_report(&draws, &d, &spec, 0.1).unwrap();
        let off = draws.layout.get("delta_a").unwrap().offset;
        let col: Vec<f64> = draws.pooled().map(|row| row[off + 1]).collect();
        let row = r.groups.iter().find(|g| g.block == "delta_a" && g.label == "y").unwrap();
        let (l, u) = hpd_interval(&col, 0.1).unwrap();
        assert_eq!((row.median, row.lower, row.upper), (median(&col), l, u));
    }
}
