//! Per-run CSV log.
//!
//! Schema: `step,return_mean,norm_score,rho_1..rho_L,jac_norm,eff_rank`.
//! Unprobed cells are blank. Floats use Rust's shortest round-trip
//! formatting, so equal runs give byte-equal files.

use std::path::Path;

use crate::error::{Error, Result};
use crate::rl::RunLog;

pub fn header(n_layers: usize) -> Vec<String> {
    let mut h = vec!["step".to_string(), "return_mean".into(), "norm_score".into()];
    h.extend((1..=n_layers).map(|i| format!("rho_{i}")));
    h.push("jac_norm".into());
    h.push("eff_rank".into());
    h
}

/// CSV text for `log`.
pub fn render(log: &RunLog, n_layers: usize) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header(n_layers))?;
    for r in &log.records {
        if r.rho_per_layer.len() != n_layers {
            return Err(Error::InvalidArgument(format!(
                "record at step {} has {} radii for {n_layers} layers",
                r.step,
                r.rho_per_layer.len()
            )));
        }
        let mut row = vec![r.step.to_string(), r.eval_mean_return.to_string(), r.normalised_score.to_string()];
        row.extend(r.rho_per_layer.iter().map(|x| x.to_string()));
        row.push(r.jacobian_max_norm.map(|x| x.to_string()).unwrap_or_default());
        row.push(r.effective_rank.map(|x| x.to_string()).unwrap_or_default());
        w.write_record(&row)?;
    }
    w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))
}

pub fn write_run_csv(log: &RunLog, n_layers: usize, path: &Path) -> Result<()> {
    std::fs::write(path, render(log, n_layers)?).map_err(|e| Error::io(path, e))
}

/// A CSV read back as named columns; blank cells are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<Option<f64>>>,
}

impl Table {
    pub fn column(&self, name: &str) -> Option<usize> {
        self.headers.iter().position(|h| h == name)
    }
}

pub fn read_table(path: &Path) -> Result<Table> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::InvalidArgument(format!("{}: {other:?}", path.display())),
    })?;
    let headers: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|c| {
                if c.trim().is_empty() {
                    Ok(None)
                } else {
                    c.trim()
                        .parse::<f64>()
                        .map(Some)
                        .map_err(|_| Error::InvalidArgument(format!("{}: non-numeric cell {c:?}", path.display())))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok(Table { headers, rows })
}
