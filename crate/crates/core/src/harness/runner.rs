//! Glue between configs, training, files and the probes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::envs::make_env;
use crate::error::{Error, Result};
use crate::harness::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::harness::config::ExperimentConfig;
use crate::harness::csvlog::write_run_csv;
use crate::harness::sweep::{run_sweep_with, SweepConfig, SweepTable};
use crate::metrics::{self, ScoreTable};
use crate::optim::Optimizer;
use crate::rl::{evaluate, train, Agent, TrainOutcome};
use crate::specnorm::SpectralNorm;

/// Files written by one run.
#[derive(Debug)]
pub struct RunArtifacts {
    pub config: PathBuf,
    pub csv: PathBuf,
    pub checkpoint: PathBuf,
    pub outcome: TrainOutcome,
}

pub fn csv_name(seed: u64) -> String {
    format!("run_seed{seed}.csv")
}

pub fn checkpoint_name(seed: u64) -> String {
    format!("ckpt_seed{seed}.snrl")
}

/// Trains one seed of `cfg` without touching the filesystem.
pub fn train_config(cfg: &ExperimentConfig, seed: u64) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut env = make_env(&cfg.env)?;
    train(env.as_mut(), &cfg.run_spec(), seed)
}

pub fn to_checkpoint(cfg: &ExperimentConfig, agent: &Agent, optimizer: &Optimizer, seed: u64) -> Result<Checkpoint> {
    let mut meta = BTreeMap::new();
    meta.insert("config".into(), serde_json::to_string(cfg)?);
    meta.insert("seed".into(), seed.to_string());
    Ok(Checkpoint {
        net: agent.net.clone(),
        states: agent.spectral.states().to_vec(),
        optim: optimizer.state.clone(),
        meta,
    })
}

/// Trains and writes `config.json`, the CSV log and the final checkpoint.
pub fn run_experiment(cfg: &ExperimentConfig, seed: u64, out_dir: &Path) -> Result<RunArtifacts> {
    let outcome = train_config(cfg, seed)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let config = out_dir.join("config.json");
    std::fs::write(&config, cfg.to_json_pretty()? + "\n").map_err(|e| Error::io(&config, e))?;
    let csv = out_dir.join(csv_name(seed));
    write_run_csv(&outcome.log, outcome.agent.net.n_layers(), &csv)?;
    let checkpoint = out_dir.join(checkpoint_name(seed));
    save_checkpoint(&to_checkpoint(cfg, &outcome.agent, &outcome.optimizer, seed)?, &checkpoint)?;
    if let Some(f) = &outcome.log.failure {
        return Err(Error::Diverged {
            step: outcome.log.records.last().map(|r| r.step).unwrap_or(0),
            reason: f.clone(),
        });
    }
    Ok(RunArtifacts {
        config,
        csv,
        checkpoint,
        outcome,
    })
}

/// Rebuilds the experiment config and agent stored in a checkpoint.
pub fn restore(ck: &Checkpoint) -> Result<(ExperimentConfig, Agent)> {
    let text = ck
        .meta
        .get("config")
        .ok_or_else(|| Error::Checkpoint("checkpoint carries no config".into()))?;
    let v: serde_json::Value = serde_json::from_str(text)?;
    let cfg = ExperimentConfig::resolve(None, Some(&v))?;
    let norm = if cfg.mode.uses_radii() { cfg.norm.clone() } else { Default::default() };
    let spectral = SpectralNorm::from_states(&ck.net, norm, ck.states.clone())?;
    Ok((
        cfg.clone(),
        Agent {
            net: ck.net.clone(),
            spectral,
            mode: cfg.mode,
        },
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub env: String,
    pub mean_return: f64,
    pub episodes: usize,
    pub norm_score: f64,
}

pub fn eval_checkpoint(path: &Path, seed: u64) -> Result<EvalReport> {
    let ck = load_checkpoint(path)?;
    let (cfg, agent) = restore(&ck)?;
    let mut env = make_env(&cfg.env)?;
    let ev = evaluate(&agent, env.as_mut(), cfg.train.eval_steps, cfg.train.eval_eps, seed, 0)?;
    Ok(EvalReport {
        env: cfg.env.clone(),
        mean_return: ev.mean_return,
        episodes: ev.episodes,
        norm_score: ScoreTable::builtin().normalise(&cfg.env, ev.mean_return)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeReport {
    pub states: usize,
    /// Radii of the function the agent computes (projections folded in).
    pub rho_per_layer: Vec<f64>,
    pub lipschitz_upper_bound: f64,
    pub jacobian_max_norm: f64,
    pub effective_rank: usize,
}

/// Probes an agent on on-policy states from an evaluation rollout.
pub fn probe_agent(agent: &Agent, env_name: &str, eval_eps: f64, n_states: usize, seed: u64) -> Result<ProbeReport> {
    if n_states == 0 {
        return Err(Error::InvalidArgument("probe needs at least one state".into()));
    }
    let mut env = make_env(env_name)?;
    let ev = evaluate(agent, env.as_mut(), n_states as u64, eval_eps, seed, n_states)?;
    let eff = agent.effective_network()?;
    let plan = crate::nn::ForwardPlan::identity(eff.n_layers());
    let rho = metrics::rho_per_layer(&eff, false)?;
    let feats = metrics::penultimate_features(&eff, &plan, &ev.probe)?;
    Ok(ProbeReport {
        states: ev.probe.len(),
        lipschitz_upper_bound: rho.iter().product(),
        rho_per_layer: rho,
        jacobian_max_norm: metrics::jacobian_max_norm(&eff, &plan, &ev.probe)?,
        effective_rank: metrics::effective_rank(&feats, 0.99)?,
    })
}

pub fn probe_checkpoint(path: &Path, n_states: usize, seed: u64) -> Result<ProbeReport> {
    let ck = load_checkpoint(path)?;
    let (cfg, agent) = restore(&ck)?;
    probe_agent(&agent, &cfg.env, cfg.train.eval_eps, n_states, seed)
}

/// Runs a sweep with real training; a diverged run counts as failed.
pub fn run_sweep(grid: &SweepConfig, workers: usize) -> Result<SweepTable> {
    run_sweep_with(grid, workers, |plan| {
        let out = train_config(&plan.config, plan.seed)?;
        if let Some(f) = out.log.failure {
            return Err(Error::Diverged { step: 0, reason: f });
        }
        out.log
            .max_norm_score()
            .ok_or_else(|| Error::Config("run produced no evaluation records".into()))
    })
}
