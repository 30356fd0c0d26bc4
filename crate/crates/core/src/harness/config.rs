//! Experiment configuration: a JSON document with a versioned schema.
//!
//! Values are resolved in layers: built-in defaults, then an optional
//! preset, then the user's file. Unknown keys are rejected at every level.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::envs::make_env;
use crate::error::{Error, Result};
use crate::nn::ArchSpec;
use crate::optim::OptimConfig;
use crate::rl::{NormMode, RunSpec, TrainConfig};
use crate::specnorm::NormConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub schema: u32,
    pub env: String,
    pub arch: ArchSpec,
    pub norm: NormConfig,
    pub mode: NormMode,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
}

/// Small conv net sized for the bundled games.
pub fn desk_arch() -> ArchSpec {
    ArchSpec {
        n_conv: 1,
        conv_width: 8,
        fc_width: 64,
        n_actions: 3,
        obs_channels: 2,
        obs_height: 10,
        obs_width: 10,
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema: SCHEMA_VERSION,
            env: "dodger".into(),
            arch: desk_arch(),
            norm: NormConfig::on_layers(&[-2]),
            mode: NormMode::Plain,
            optim: OptimConfig::default(),
            train: TrainConfig::default(),
            seeds: vec![0],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    MinatarB1,
    AtariC1,
}

impl Preset {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "minatar-b1" => Ok(Preset::MinatarB1),
            "atari-c1" => Ok(Preset::AtariC1),
            other => Err(Error::Config(format!("unknown preset {other:?} (minatar-b1, atari-c1)"))),
        }
    }

    /// Partial config overlaid on the defaults.
    pub fn overlay(self) -> Value {
        match self {
            Preset::MinatarB1 => json!({
                "optim": {"algo": "adam", "eta": 0.00025, "eps": 0.0003125, "beta1": 0.9, "beta2": 0.999},
                "train": {
                    "gamma": 0.99, "update_frequency": 4, "target_update": 4000,
                    "eps_start": 1.0, "eps_final": 0.01, "eps_steps": 250000, "warmup": 5000,
                    "replay_capacity": 100000, "history": 1, "loss": "mse",
                    "eval_steps": 125000, "eval_eps": 0.001, "eval_every": 250000
                }
            }),
            Preset::AtariC1 => json!({
                "optim": {"algo": "adam", "eta": 0.00025, "eps": 0.0003125, "beta1": 0.9, "beta2": 0.999},
                "train": {
                    "gamma": 0.99, "update_frequency": 4, "target_update": 8000,
                    "eps_start": 1.0, "eps_final": 0.01, "eps_steps": 250000, "warmup": 20000,
                    "replay_capacity": 1000000, "batch": 32, "history": 4, "loss": "huber",
                    "eval_steps": 125000, "eval_eps": 0.001, "reward_clip": true
                }
            }),
        }
    }
}

/// Recursive merge: objects merge key-wise, everything else is replaced.
pub fn merge(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, o) => *b = o.clone(),
    }
}

/// Input and output sizes the user left unset follow the chosen env.
fn fit_arch_to_env(v: &mut Value, user: Option<&Value>) -> Result<()> {
    let Some(name) = v.get("env").and_then(Value::as_str) else {
        return Ok(());
    };
    let env = make_env(name)?;
    let [c, h, w] = env.obs_shape();
    let given = user.and_then(|u| u.get("arch"));
    for (key, val) in [
        ("obs_channels", c),
        ("obs_height", h),
        ("obs_width", w),
        ("n_actions", env.n_actions()),
    ] {
        if given.and_then(|a| a.get(key)).is_none() {
            if let Some(arch) = v.get_mut("arch").and_then(Value::as_object_mut) {
                arch.insert(key.into(), json!(val));
            }
        }
    }
    Ok(())
}

impl ExperimentConfig {
    /// Defaults, then `preset`, then `user`.
    pub fn resolve(preset: Option<Preset>, user: Option<&Value>) -> Result<Self> {
        let mut v = serde_json::to_value(Self::default())?;
        if let Some(p) = preset {
            merge(&mut v, &p.overlay());
        }
        if let Some(u) = user {
            if !u.is_object() {
                return Err(Error::Config("config must be a JSON object".into()));
            }
            merge(&mut v, u);
        }
        fit_arch_to_env(&mut v, user)?;
        let cfg: Self = serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, preset: Option<Preset>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let v: Value =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::resolve(preset, Some(&v))
    }

    /// Checks that do not need training to start.
    pub fn validate(&self) -> Result<()> {
        if self.schema != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema {} not supported (expected {SCHEMA_VERSION})",
                self.schema
            )));
        }
        let env = make_env(&self.env)?;
        if self.arch.n_actions != env.n_actions() || self.arch.input_shape() != env.obs_shape() {
            return Err(Error::Config(format!(
                "arch expects {} actions and obs {:?}; env {} has {} and {:?}",
                self.arch.n_actions,
                self.arch.input_shape(),
                self.env,
                env.n_actions(),
                env.obs_shape()
            )));
        }
        if self.mode == NormMode::SnBias && self.norm.layers.is_empty() {
            return Err(Error::Config("mode sn_bias needs a non-empty norm.layers".into()));
        }
        self.arch.layer_specs()?;
        self.norm.resolve(self.arch.layer_specs()?.len())?;
        self.optim.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        Ok(())
    }

    pub fn run_spec(&self) -> RunSpec {
        RunSpec {
            arch: self.arch,
            norm: self.norm.clone(),
            mode: self.mode,
            optim: self.optim,
            train: self.train.clone(),
        }
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
