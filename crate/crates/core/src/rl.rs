//! DQN: replay buffer, ε-greedy acting, the TD loss with a held-back target
//! network, and the train / evaluate loops.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{episode_mean, Environment, Observation};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricsRecord, ScoreTable};
use crate::nn::{argmax, build_qnet, ArchSpec, ForwardPlan, QNetwork};
use crate::optim::{OptimConfig, Optimizer, Scheduler};
use crate::specnorm::{NormConfig, SpectralNorm};
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub s: Observation,
    pub a: usize,
    pub r: f64,
    pub s_next: Observation,
    pub done: bool,
}

/// Fixed-capacity ring of transitions, observations stored as bytes.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    shape: [usize; 3],
    s: Vec<u8>,
    s_next: Vec<u8>,
    a: Vec<usize>,
    r: Vec<f64>,
    done: Vec<bool>,
    cursor: usize,
    size: usize,
}

/// A sampled minibatch.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `[B, C, H, W]`
    pub s: Tensor,
    pub a: Vec<usize>,
    pub r: Vec<f64>,
    pub s_next: Tensor,
    pub done: Vec<bool>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, shape: [usize; 3]) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidArgument("replay capacity must be positive".into()));
        }
        Ok(Self {
            capacity,
            shape,
            s: Vec::new(),
            s_next: Vec::new(),
            a: Vec::new(),
            r: Vec::new(),
            done: Vec::new(),
            cursor: 0,
            size: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.size
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    fn obs_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn push(&mut self, t: &Transition) -> Result<()> {
        if t.s.shape() != self.shape || t.s_next.shape() != self.shape {
            return Err(Error::dim("replay push", format!("{:?} into {:?}", t.s.shape(), self.shape)));
        }
        if !t.r.is_finite() {
            return Err(Error::NonFinite { op: "replay push" });
        }
        let len = self.obs_len();
        if self.size < self.capacity {
            self.s.extend_from_slice(t.s.cells());
            self.s_next.extend_from_slice(t.s_next.cells());
            self.a.push(t.a);
            self.r.push(t.r);
            self.done.push(t.done);
            self.size += 1;
        } else {
            let i = self.cursor;
            self.s[i * len..(i + 1) * len].copy_from_slice(t.s.cells());
            self.s_next[i * len..(i + 1) * len].copy_from_slice(t.s_next.cells());
            self.a[i] = t.a;
            self.r[i] = t.r;
            self.done[i] = t.done;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
        Ok(())
    }

    /// Uniform slot indices, with replacement.
    pub fn sample_indices(&self, batch: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
        if batch == 0 || self.size < batch {
            return Err(Error::InvalidArgument(format!(
                "cannot sample {batch} from {} transitions",
                self.size
            )));
        }
        Ok((0..batch).map(|_| rng.random_range(0..self.size)).collect())
    }

    pub fn gather(&self, idx: &[usize]) -> Result<Batch> {
        let len = self.obs_len();
        let mut shape = vec![idx.len()];
        shape.extend_from_slice(&self.shape);
        let mut s = Vec::with_capacity(idx.len() * len);
        let mut sn = Vec::with_capacity(idx.len() * len);
        for &i in idx {
            if i >= self.size {
                return Err(Error::InvalidArgument(format!("slot {i} not filled")));
            }
            s.extend(self.s[i * len..(i + 1) * len].iter().map(|&c| c as f64));
            sn.extend(self.s_next[i * len..(i + 1) * len].iter().map(|&c| c as f64));
        }
        Ok(Batch {
            s: Tensor::new(shape.clone(), s)?,
            a: idx.iter().map(|&i| self.a[i]).collect(),
            r: idx.iter().map(|&i| self.r[i]).collect(),
            s_next: Tensor::new(shape, sn)?,
            done: idx.iter().map(|&i| self.done[i]).collect(),
        })
    }

    pub fn sample(&self, batch: usize, rng: &mut ChaCha8Rng) -> Result<Batch> {
        let idx = self.sample_indices(batch, rng)?;
        self.gather(&idx)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    Mse,
    Huber,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub gamma: f64,
    /// Environment steps between optimiser updates.
    pub update_frequency: u64,
    /// Optimiser updates between target syncs.
    pub target_update: u64,
    pub eps_start: f64,
    pub eps_final: f64,
    pub eps_steps: u64,
    pub warmup: u64,
    pub batch: usize,
    pub loss: LossKind,
    pub total_steps: u64,
    pub eval_every: u64,
    pub eval_steps: u64,
    pub eval_eps: f64,
    pub replay_capacity: usize,
    pub history: usize,
    pub reward_clip: bool,
    /// States kept from each evaluation for the Jacobian / rank probes;
    /// zero disables probing.
    pub probe_states: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            update_frequency: 4,
            target_update: 4000,
            eps_start: 1.0,
            eps_final: 0.01,
            eps_steps: 100_000,
            warmup: 5000,
            batch: 32,
            loss: LossKind::Mse,
            total_steps: 500_000,
            eval_every: 25_000,
            eval_steps: 5000,
            eval_eps: 0.001,
            replay_capacity: 100_000,
            history: 1,
            reward_clip: false,
            probe_states: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.gamma) {
            return fail(format!("gamma {} outside [0, 1]", self.gamma));
        }
        if self.update_frequency == 0 || self.target_update == 0 || self.batch == 0 {
            return fail("update_frequency, target_update and batch must be positive".into());
        }
        if self.eval_every == 0 || self.eval_steps == 0 || self.replay_capacity == 0 {
            return fail("eval_every, eval_steps and replay_capacity must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.eps_final)
            || !(0.0..=1.0).contains(&self.eps_start)
            || self.eps_final > self.eps_start
        {
            return fail(format!("bad ε schedule {} → {}", self.eps_start, self.eps_final));
        }
        if !(0.0..=1.0).contains(&self.eval_eps) {
            return fail(format!("eval_eps {} outside [0, 1]", self.eval_eps));
        }
        if self.history != 1 {
            return fail(format!("history length {} not supported, only 1", self.history));
        }
        Ok(())
    }
}

/// Linear ε decay from `eps_start` to `eps_final` over `eps_steps`.
pub fn epsilon_at(step: u64, cfg: &TrainConfig) -> f64 {
    if cfg.eps_steps == 0 || step >= cfg.eps_steps {
        return cfg.eps_final;
    }
    let frac = step as f64 / cfg.eps_steps as f64;
    cfg.eps_start + frac * (cfg.eps_final - cfg.eps_start)
}

/// ε-greedy action; ties go to the lowest index.
pub fn act(q: &[f64], eps: f64, rng: &mut ChaCha8Rng) -> Result<usize> {
    if q.is_empty() {
        return Err(Error::InvalidArgument("empty Q vector".into()));
    }
    if !(0.0..=1.0).contains(&eps) {
        return Err(Error::InvalidArgument(format!("ε = {eps} outside [0, 1]")));
    }
    if rng.random::<f64>() < eps {
        Ok(rng.random_range(0..q.len()))
    } else {
        Ok(argmax(q).expect("non-empty"))
    }
}

/// How the spectral radii enter training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// Unnormalised baseline.
    #[default]
    Plain,
    /// Projected weights.
    Sn,
    /// Projected weights and scaled biases.
    SnBias,
    /// Unnormalised network, output divided by the radius product.
    DivOut,
    /// Unnormalised network, gradients divided by the radius product.
    DivGrad,
    /// Unnormalised network, optimiser ε multiplied by the radius product.
    MulEps,
}

impl NormMode {
    pub fn scheduler(self) -> Scheduler {
        match self {
            NormMode::DivGrad => Scheduler::DivGrad,
            NormMode::MulEps => Scheduler::MulEps,
            _ => Scheduler::None,
        }
    }

    pub fn uses_radii(self) -> bool {
        self != NormMode::Plain
    }
}

/// A Q-network together with its normalisation state.
#[derive(Clone, Debug, PartialEq)]
pub struct Agent {
    pub net: QNetwork,
    pub spectral: SpectralNorm,
    pub mode: NormMode,
}

impl Agent {
    pub fn new(net: QNetwork, norm: &NormConfig, mode: NormMode, seed: u64) -> Result<Self> {
        let cfg = if mode.uses_radii() { norm.clone() } else { NormConfig::default() };
        if mode == NormMode::SnBias && cfg.layers.is_empty() {
            return Err(Error::Config("sn_bias needs at least one normalised layer".into()));
        }
        let spectral = SpectralNorm::new(&net, cfg, seed)?;
        Ok(Self { net, spectral, mode })
    }

    /// Forward plan for the current radii.
    pub fn plan(&self) -> ForwardPlan {
        match self.mode {
            NormMode::Plain | NormMode::DivGrad | NormMode::MulEps => ForwardPlan::identity(self.net.n_layers()),
            NormMode::Sn => self.spectral.projection_plan(&self.net),
            NormMode::SnBias => self.spectral.bias_scaled_plan(&self.net),
            NormMode::DivOut => self.spectral.output_scaled_plan(&self.net),
        }
    }

    /// Advances power iteration by one step on every tracked layer.
    pub fn refresh_radii(&mut self) -> Result<()> {
        if self.mode.uses_radii() {
            self.spectral.step(&self.net)?;
        }
        Ok(())
    }

    /// Q-values for one observation or a batch. Training mode refreshes the
    /// radii first; evaluation mode reuses them.
    pub fn q_values(&mut self, obs: &Tensor, training: bool) -> Result<Tensor> {
        if training {
            self.refresh_radii()?;
        }
        self.net.evaluate(obs, &self.plan())
    }

    /// Q-values with the stored radii.
    pub fn q_frozen(&self, obs: &Tensor) -> Result<Tensor> {
        self.net.evaluate(obs, &self.plan())
    }

    pub fn rho_product(&self) -> f64 {
        self.spectral.rho_product()
    }

    /// A plain network computing the same function as this agent with its
    /// current radii: projections and bias scales are folded into the
    /// weights, an output scale into the last layer.
    pub fn effective_network(&self) -> Result<QNetwork> {
        let plan = self.plan();
        let n = self.net.n_layers();
        let mut layers = Vec::with_capacity(n);
        for (i, (layer, tf)) in self.net.layers().iter().zip(&plan.layers).enumerate() {
            let mut wscale = match &tf.weight {
                crate::nn::WeightTransform::Raw => 1.0,
                crate::nn::WeightTransform::Divide { denom, .. } => 1.0 / denom,
            };
            let mut bscale = tf.bias_scale;
            if i == n - 1 {
                wscale *= plan.output_scale;
                bscale *= plan.output_scale;
            }
            layers.push((layer.weight.scaled(wscale)?, layer.bias.scaled(bscale)?, layer.activation));
        }
        QNetwork::from_layers(self.net.input_shape().to_vec(), layers)
    }
}

/// `r + γ (1 − done) max_a′ Q′(s′, a′)` per sample.
pub fn td_targets(r: &[f64], done: &[bool], q_next: &Tensor, gamma: f64) -> Result<Vec<f64>> {
    let a = q_next.shape().get(1).copied().unwrap_or(0);
    if q_next.rank() != 2 || q_next.shape()[0] != r.len() || done.len() != r.len() || a == 0 {
        return Err(Error::dim("td_targets", format!("{:?} for {} rewards", q_next.shape(), r.len())));
    }
    Ok(q_next
        .data()
        .chunks(a)
        .zip(r.iter().zip(done))
        .map(|(row, (&r, &d))| {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if d {
                r
            } else {
                r + gamma * m
            }
        })
        .collect())
}

/// Loss value and raw-parameter gradients of one minibatch.
#[derive(Clone, Debug)]
pub struct LossOutput {
    pub loss: f64,
    pub grads: Vec<Tensor>,
}

/// TD loss of the online agent against a frozen target. Radii of the online
/// agent are used as they stand; call [`Agent::refresh_radii`] first for a
/// training forward.
pub fn dqn_loss(batch: &Batch, online: &Agent, target: &Agent, gamma: f64, loss: LossKind) -> Result<LossOutput> {
    let q_next = target.q_frozen(&batch.s_next)?;
    let y = td_targets(&batch.r, &batch.done, &q_next, gamma)?;
    let mut g = Graph::new();
    let x = g.constant(batch.s.clone());
    let rec = online.net.record(&mut g, x, &online.plan(), true)?;
    let q_sa = g.select_per_row(rec.q_batch, &batch.a)?;
    let t = g.constant(Tensor::vector(y)?);
    let l = match loss {
        LossKind::Mse => g.mse_loss(q_sa, t)?,
        LossKind::Huber => g.huber_loss(q_sa, t)?,
    };
    g.backward(l)?;
    Ok(LossOutput {
        loss: g.value(l).item()?,
        grads: rec.param_grads(&g)?,
    })
}

/// Result of a greedy(ish) evaluation rollout.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub mean_return: f64,
    pub episodes: usize,
    /// Evenly spaced on-policy states for probing.
    pub probe: Vec<Tensor>,
}

/// Runs the frozen ε-greedy policy for exactly `eval_steps` steps.
pub fn evaluate(
    agent: &Agent,
    env: &mut dyn Environment,
    eval_steps: u64,
    eval_eps: f64,
    seed: u64,
    probe_states: usize,
) -> Result<EvalResult> {
    if eval_steps == 0 {
        return Err(Error::InvalidArgument("eval_steps must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stride = if probe_states == 0 {
        u64::MAX
    } else {
        (eval_steps / probe_states as u64).max(1)
    };
    let mut obs = env.reset(rng.random());
    let mut returns = Vec::new();
    let mut current = 0.0;
    let mut probe = Vec::new();
    for step in 0..eval_steps {
        let x = obs.to_tensor();
        let q = agent.q_frozen(&x)?;
        if step % stride == 0 && probe.len() < probe_states {
            probe.push(x);
        }
        let a = act(q.data(), eval_eps, &mut rng)?;
        let res = env.step(a)?;
        current += res.reward;
        obs = res.obs;
        if res.done {
            returns.push(current);
            current = 0.0;
            obs = env.reset(rng.random());
        }
    }
    Ok(EvalResult {
        mean_return: episode_mean(&returns, current),
        episodes: returns.len(),
        probe,
    })
}

/// Ordered evaluation records plus the summary of a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub records: Vec<MetricsRecord>,
    /// Set when the run aborted (non-finite loss or parameters).
    pub failure: Option<String>,
    pub updates: u64,
}

impl RunLog {
    pub fn max_norm_score(&self) -> Option<f64> {
        self.records.iter().map(|r| r.normalised_score).reduce(f64::max)
    }

    pub fn mean_norm_score(&self) -> Option<f64> {
        if self.records.is_empty() {
            return None;
        }
        Some(self.records.iter().map(|r| r.normalised_score).sum::<f64>() / self.records.len() as f64)
    }

    pub fn final_return(&self) -> Option<f64> {
        self.records.last().map(|r| r.eval_mean_return)
    }
}

/// Everything a finished run leaves behind.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: RunLog,
    pub agent: Agent,
    pub optimizer: Optimizer,
}

/// Independent 64-bit stream for `(seed, tag)`.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Everything that defines a training run apart from the environment.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSpec {
    pub arch: ArchSpec,
    pub norm: NormConfig,
    pub mode: NormMode,
    pub optim: OptimConfig,
    pub train: TrainConfig,
}

fn probe_record(agent: &Agent, step: u64, eval: &EvalResult, norm_score: f64) -> Result<MetricsRecord> {
    let rho_per_layer = metrics::rho_per_layer_approx(&agent.net)?;
    let (jac, rank) = if eval.probe.is_empty() {
        (None, None)
    } else {
        let plan = agent.plan();
        let jac = metrics::jacobian_max_norm(&agent.net, &plan, &eval.probe)?;
        let feats = metrics::penultimate_features(&agent.net, &plan, &eval.probe)?;
        (Some(jac), Some(metrics::effective_rank(&feats, 0.99)?))
    };
    Ok(MetricsRecord {
        step,
        eval_mean_return: eval.mean_return,
        normalised_score: norm_score,
        rho_per_layer,
        jacobian_max_norm: jac,
        effective_rank: rank,
    })
}

/// Trains a DQN agent. Fully determined by `seed`.
pub fn train(env: &mut dyn Environment, spec: &RunSpec, seed: u64) -> Result<TrainOutcome> {
    let cfg = &spec.train;
    cfg.validate()?;
    if spec.arch.n_actions != env.n_actions() || spec.arch.input_shape() != env.obs_shape() {
        return Err(Error::Config(format!(
            "architecture {:?} does not fit env {} ({} actions, obs {:?})",
            spec.arch,
            env.name(),
            env.n_actions(),
            env.obs_shape()
        )));
    }
    if spec.optim.scheduler != Scheduler::None && spec.optim.scheduler != spec.mode.scheduler() {
        return Err(Error::Config(format!(
            "optimizer scheduler {:?} conflicts with mode {:?}",
            spec.optim.scheduler, spec.mode
        )));
    }
    let optim_cfg = OptimConfig {
        scheduler: spec.mode.scheduler(),
        ..spec.optim
    };
    let table = ScoreTable::builtin();
    table.get(env.name()).ok_or_else(|| Error::UnknownEnv(env.name().to_string()))?;

    let net = build_qnet(&spec.arch, derive_seed(seed, 1))?;
    let mut online = Agent::new(net, &spec.norm, spec.mode, derive_seed(seed, 2))?;
    let mut target = online.clone();
    let mut optimizer = Optimizer::new(optim_cfg, &online.net.params())?;
    let mut replay = ReplayBuffer::new(cfg.replay_capacity, env.obs_shape())?;
    let mut act_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 3));
    let mut sample_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 4));
    let mut eval_env_seed = derive_seed(seed, 5);

    let mut log = RunLog::default();
    let mut obs = env.reset(act_rng.random());
    for step in 1..=cfg.total_steps {
        let eps = epsilon_at(step - 1, cfg);
        let action = if act_rng.random::<f64>() < eps {
            act_rng.random_range(0..env.n_actions())
        } else {
            let q = online.q_values(&obs.to_tensor(), true)?;
            argmax(q.data()).expect("actions")
        };
        let res = env.step(action)?;
        let r = if cfg.reward_clip { res.reward.clamp(-1.0, 1.0) } else { res.reward };
        replay.push(&Transition {
            s: obs,
            a: action,
            r,
            s_next: res.obs.clone(),
            done: res.done,
        })?;
        obs = if res.done { env.reset(act_rng.random()) } else { res.obs };

        if step > cfg.warmup && step % cfg.update_frequency == 0 && replay.len() >= cfg.batch {
            let batch = replay.sample(cfg.batch, &mut sample_rng)?;
            online.refresh_radii()?;
            let out = match dqn_loss(&batch, &online, &target, cfg.gamma, cfg.loss) {
                Ok(out) if out.loss.is_finite() => out,
                Ok(out) => {
                    log.failure = Some(format!("step {step}: loss became {}", out.loss));
                    break;
                }
                Err(Error::NonFinite { op }) => {
                    log.failure = Some(format!("step {step}: non-finite value in {op}"));
                    break;
                }
                Err(e) => return Err(e),
            };
            let rho = online.rho_product();
            match optimizer.step(&mut online.net.params_mut(), &out.grads, rho) {
                Ok(()) => {}
                Err(Error::NonFinite { op }) => {
                    log.failure = Some(format!("step {step}: non-finite parameter after {op}"));
                    break;
                }
                Err(e) => return Err(e),
            }
            log.updates += 1;
            if log.updates % cfg.target_update == 0 {
                target = online.clone();
            }
        }

        if step % cfg.eval_every == 0 {
            eval_env_seed = derive_seed(eval_env_seed, step);
            let mut eval_env = crate::envs::make_env(env.name())?;
            let ev = evaluate(
                &online,
                eval_env.as_mut(),
                cfg.eval_steps,
                cfg.eval_eps,
                eval_env_seed,
                cfg.probe_states,
            )?;
            let ns = table.normalise(env.name(), ev.mean_return)?;
            log.records.push(probe_record(&online, step, &ev, ns)?);
        }
    }
    Ok(TrainOutcome {
        log,
        agent: online,
        optimizer,
    })
}
