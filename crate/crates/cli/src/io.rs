//! CSV artifacts: marginal paths, observations and sample paths.
//!
//! Reals are written with 17 significant digits so every file reloads
//! bit-exactly.

use std::fs::File;
use std::path::Path;

use ctep::{DiffusionTrajectory, GaussianMoments, JumpTrajectory, MarginalPath, Observation, TimeGrid};
use nalgebra::{DMatrix, DVector};

use crate::error::{CliError, Result};

pub fn fmt_real(x: f64) -> String {
    format!("{x:.16e}")
}

fn writer(path: &Path) -> Result<csv::Writer<File>> {
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

fn write_rows(path: &Path, header: Vec<String>, rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let csv_err = |e: csv::Error| CliError::io(path, e.into());
    let mut w = writer(path)?;
    w.write_record(&header).map_err(csv_err)?;
    for r in rows {
        w.write_record(&r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

fn numbered(prefix: &str, d: usize) -> impl Iterator<Item = String> + '_ {
    (1..=d).map(move |i| format!("{prefix}{i}"))
}

/// Upper-triangle covariance column names `P11, P12, ..., Pdd`.
fn cov_columns(d: usize) -> Vec<String> {
    (1..=d).flat_map(|i| (i..=d).map(move |j| format!("P{i}{j}"))).collect()
}

pub fn marginal_header(d: usize) -> Vec<String> {
    let mut h = vec!["t".to_string()];
    h.extend(numbered("m", d));
    h.extend(cov_columns(d));
    h
}

pub fn write_marginals(path: &Path, grid: &TimeGrid, path_: &MarginalPath) -> Result<()> {
    let d = path_.nodes.first().map_or(0, |m| m.dim());
    let rows = path_.nodes.iter().enumerate().map(|(k, m)| {
        let mut r = vec![fmt_real(grid.time(k))];
        r.extend(m.mean.iter().map(|v| fmt_real(*v)));
        for i in 0..d {
            for j in i..d {
                r.push(fmt_real(m.cov[(i, j)]));
            }
        }
        r
    });
    write_rows(path, marginal_header(d), rows)
}

pub fn write_observations(path: &Path, d: usize, obs: &[Observation]) -> Result<()> {
    let mut header = vec!["t".to_string()];
    header.extend(numbered("y", d));
    let rows = obs.iter().map(|o| {
        let mut r = vec![fmt_real(o.time)];
        r.extend(o.value.iter().map(|v| fmt_real(*v)));
        r
    });
    write_rows(path, header, rows)
}

/// One row for the initial state and one per jump.
pub fn write_jump_trajectory(path: &Path, tr: &JumpTrajectory) -> Result<()> {
    let d = tr.states[0].len();
    let mut header = vec!["t".to_string()];
    header.extend(numbered("n", d));
    let times = std::iter::once(tr.t0).chain(tr.times.iter().copied());
    let rows = times.zip(&tr.states).map(|(t, s)| {
        let mut r = vec![fmt_real(t)];
        r.extend(s.iter().map(|v| v.to_string()));
        r
    });
    write_rows(path, header, rows)
}

/// One row per grid node.
pub fn write_diffusion_trajectory(path: &Path, tr: &DiffusionTrajectory) -> Result<()> {
    let d = tr.states.first().map_or(0, |s| s.len());
    let mut header = vec!["t".to_string()];
    header.extend(numbered("n", d));
    let rows = tr.times.iter().zip(&tr.states).map(|(t, s)| {
        let mut r = vec![fmt_real(*t)];
        r.extend(s.iter().map(|v| fmt_real(*v)));
        r
    });
    write_rows(path, header, rows)
}

/// Header and numeric rows of a CSV file; every row must match the header width.
fn read_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let file = File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            CliError::MissingData(path.to_path_buf())
        } else {
            CliError::io(path, e)
        }
    })?;
    let data_err = |msg: String| CliError::Data {
        path: path.to_path_buf(),
        msg,
    };
    let mut r = csv::Reader::from_reader(file);
    let header: Vec<String> = r
        .headers()
        .map_err(|e| data_err(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| data_err(e.to_string()))?;
        let row = rec
            .iter()
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| data_err(format!("row {}: {e}", i + 1)))?;
        if row.iter().any(|v| !v.is_finite()) {
            return Err(data_err(format!("row {}: non-finite value", i + 1)));
        }
        rows.push(row);
    }
    Ok((header, rows))
}

fn expect_header(path: &Path, header: &[String], want: &[String]) -> Result<()> {
    if header != want {
        return Err(CliError::Data {
            path: path.to_path_buf(),
            msg: format!("header {header:?}, expected {want:?}"),
        });
    }
    Ok(())
}

pub fn read_observations(path: &Path) -> Result<Vec<Observation>> {
    let (header, rows) = read_table(path)?;
    let d = header.len().saturating_sub(1);
    let mut want = vec!["t".to_string()];
    want.extend(numbered("y", d));
    expect_header(path, &header, &want)?;
    if d == 0 {
        return Err(CliError::Data {
            path: path.to_path_buf(),
            msg: "no observation columns".into(),
        });
    }
    Ok(rows
        .into_iter()
        .map(|r| Observation::new(r[0], DVector::from_column_slice(&r[1..])))
        .collect())
}

/// A marginal path as read back from CSV: node times and moments.
#[derive(Clone, Debug, PartialEq)]
pub struct MarginalTable {
    pub times: Vec<f64>,
    pub means: Vec<DVector<f64>>,
    pub covs: Vec<DMatrix<f64>>,
}

impl MarginalTable {
    pub fn from_path(grid: &TimeGrid, p: &MarginalPath) -> Self {
        Self {
            times: grid.times(),
            means: p.nodes.iter().map(|m: &GaussianMoments| m.mean.clone()).collect(),
            covs: p.nodes.iter().map(|m| m.cov.clone()).collect(),
        }
    }
}

pub fn read_marginals(path: &Path) -> Result<MarginalTable> {
    let (header, rows) = read_table(path)?;
    // 1 + d + d(d+1)/2 columns
    let n = header.len();
    let d = (1..=n)
        .find(|d| 1 + d + d * (d + 1) / 2 == n)
        .ok_or_else(|| CliError::Data {
            path: path.to_path_buf(),
            msg: format!("{n} columns is not a marginal table"),
        })?;
    expect_header(path, &header, &marginal_header(d))?;
    let mut t = MarginalTable {
        times: Vec::with_capacity(rows.len()),
        means: Vec::with_capacity(rows.len()),
        covs: Vec::with_capacity(rows.len()),
    };
    for r in rows {
        t.times.push(r[0]);
        t.means.push(DVector::from_column_slice(&r[1..=d]));
        let mut cov = DMatrix::zeros(d, d);
        let mut c = 1 + d;
        for i in 0..d {
            for j in i..d {
                cov[(i, j)] = r[c];
                cov[(j, i)] = r[c];
                c += 1;
            }
        }
        t.covs.push(cov);
    }
    Ok(t)
}

/// `(times, states)` from a trajectory CSV of either kind.
pub fn read_trajectory(path: &Path) -> Result<(Vec<f64>, Vec<DVector<f64>>)> {
    let (header, rows) = read_table(path)?;
    let d = header.len().saturating_sub(1);
    let mut want = vec!["t".to_string()];
    want.extend(numbered("n", d));
    expect_header(path, &header, &want)?;
    Ok(rows
        .into_iter()
        .map(|r| (r[0], DVector::from_column_slice(&r[1..])))
        .unzip())
}
