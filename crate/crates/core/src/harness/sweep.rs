//! Grid sweeps over learning rate, ε, architecture and normalisation mode.
//!
//! Every `(η, ε, arch, mode)` cell runs once per seed. Run `k` (in
//! row-major grid order, seeds innermost) trains with
//! `derive_seed(seed, k)`, so results do not depend on scheduling. Cells
//! aggregate the mean over runs of each run's maximum normalised score.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::harness::config::{ExperimentConfig, Preset};
use crate::nn::ArchSpec;
use crate::rl::{derive_seed, NormMode};

/// Geometric axis `min · (max/min)^(k/(points−1))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axis {
    pub min: f64,
    pub max: f64,
    #[serde(default = "default_points")]
    pub points: usize,
}

fn default_points() -> usize {
    8
}

impl Axis {
    pub fn values(&self) -> Result<Vec<f64>> {
        if !(self.min > 0.0 && self.max >= self.min) || self.points == 0 {
            return Err(Error::Config(format!("bad geometric axis {self:?}")));
        }
        if self.points == 1 {
            return Ok(vec![self.min]);
        }
        let ratio = (self.max / self.min).ln();
        let last = (self.points - 1) as f64;
        Ok((0..self.points)
            .map(|k| match k {
                0 => self.min,
                k if k == self.points - 1 => self.max,
                k => self.min * (ratio * k as f64 / last).exp(),
            })
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    /// Settings shared by every run; its `seeds` are the sweep seeds.
    #[serde(default)]
    pub base: ExperimentConfig,
    pub eta: Axis,
    pub eps: Axis,
    /// Architectures to cover; empty means the base architecture.
    #[serde(default)]
    pub archs: Vec<ArchSpec>,
    /// Modes to cover; empty means the base mode.
    #[serde(default)]
    pub modes: Vec<NormMode>,
}

/// One run of the expanded grid.
#[derive(Clone, Debug, PartialEq)]
pub struct RunPlan {
    pub index: usize,
    pub cell: usize,
    pub config: ExperimentConfig,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CellResult {
    pub eta: f64,
    pub eps: f64,
    pub arch: usize,
    pub mode: NormMode,
    pub runs: usize,
    pub failed: usize,
    /// Mean over successful runs of the per-run maximum normalised score.
    pub mean_max_norm_score: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepTable {
    pub cells: Vec<CellResult>,
    /// Per-run maximum normalised score, or the failure message.
    pub runs: Vec<std::result::Result<f64, String>>,
}

impl SweepConfig {
    /// Parses a sweep document, resolving its `base` like a run config
    /// (defaults, then `preset`, then the user's values).
    pub fn resolve(preset: Option<Preset>, doc: &Value) -> Result<Self> {
        let mut doc = doc.clone();
        let obj = doc
            .as_object_mut()
            .ok_or_else(|| Error::Config("sweep config must be a JSON object".into()))?;
        let base = ExperimentConfig::resolve(preset, obj.get("base"))?;
        obj.insert("base".into(), serde_json::to_value(base)?);
        serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path, preset: Option<Preset>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let v: Value =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::resolve(preset, &v)
    }

    pub fn expand(&self) -> Result<(Vec<CellResult>, Vec<RunPlan>)> {
        let etas = self.eta.values()?;
        let epss = self.eps.values()?;
        let archs = if self.archs.is_empty() { vec![self.base.arch] } else { self.archs.clone() };
        let modes = if self.modes.is_empty() { vec![self.base.mode] } else { self.modes.clone() };
        if self.base.seeds.is_empty() {
            return Err(Error::Config("sweep needs at least one seed".into()));
        }
        let mut cells = Vec::new();
        let mut runs = Vec::new();
        for &eta in &etas {
            for &eps in &epss {
                for (ai, arch) in archs.iter().enumerate() {
                    for &mode in &modes {
                        let cell = cells.len();
                        let mut cfg = self.base.clone();
                        cfg.optim.eta = eta;
                        cfg.optim.eps = eps;
                        cfg.arch = *arch;
                        cfg.mode = mode;
                        cfg.validate()?;
                        for &seed in &self.base.seeds {
                            let index = runs.len();
                            runs.push(RunPlan {
                                index,
                                cell,
                                config: cfg.clone(),
                                seed: derive_seed(seed, index as u64),
                            });
                        }
                        cells.push(CellResult {
                            eta,
                            eps,
                            arch: ai,
                            mode,
                            runs: self.base.seeds.len(),
                            failed: 0,
                            mean_max_norm_score: None,
                        });
                    }
                }
            }
        }
        Ok((cells, runs))
    }
}

/// Runs the grid on `workers` threads with `run` producing each run's max
/// normalised score. A run error marks that run failed; the sweep goes on.
pub fn run_sweep_with<F>(grid: &SweepConfig, workers: usize, run: F) -> Result<SweepTable>
where
    F: Fn(&RunPlan) -> Result<f64> + Sync,
{
    let (mut cells, plans) = grid.expand()?;
    let results: Mutex<Vec<Option<std::result::Result<f64, String>>>> = Mutex::new(vec![None; plans.len()]);
    let next = AtomicUsize::new(0);
    let workers = workers.max(1).min(plans.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::Relaxed);
                let Some(plan) = plans.get(k) else { break };
                let r = run(plan).map_err(|e| e.to_string());
                results.lock().expect("result sink")[k] = Some(r);
            });
        }
    });
    let runs: Vec<_> = results
        .into_inner()
        .expect("result sink")
        .into_iter()
        .map(|r| r.expect("every run reports"))
        .collect();
    for (ci, cell) in cells.iter_mut().enumerate() {
        let scores: Vec<f64> = plans
            .iter()
            .zip(&runs)
            .filter(|(p, _)| p.cell == ci)
            .filter_map(|(_, r)| r.as_ref().ok().copied())
            .collect();
        cell.failed = cell.runs - scores.len();
        if !scores.is_empty() {
            cell.mean_max_norm_score = Some(scores.iter().sum::<f64>() / scores.len() as f64);
        }
    }
    Ok(SweepTable { cells, runs })
}

impl SweepTable {
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["eta", "eps", "arch", "mode", "runs", "failed", "mean_max_norm_score"])?;
        for c in &self.cells {
            let mode = serde_json::to_value(c.mode)?;
            w.write_record([
                c.eta.to_string(),
                c.eps.to_string(),
                c.arch.to_string(),
                mode.as_str().unwrap_or_default().to_string(),
                c.runs.to_string(),
                c.failed.to_string(),
                c.mean_max_norm_score.map(|x| x.to_string()).unwrap_or_default(),
            ])?;
        }
        w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))
    }
}
