//! SGD, centered RMSProp and Adam, with the two spectral schedulers.
//!
//! Adam follows
//!
//! ```text
//! v ← β₁ v + (1−β₁) g        s ← β₂ s + (1−β₂) g²        t ← t + 1
//! Δ = η (1−β₁ᵗ)⁻¹ v / (√((1−β₂ᵗ)⁻¹ s) + ε)
//! ```
//!
//! with ε outside the square root. `divgrad` divides every gradient by the
//! product of spectral radii before the update; `muleps` multiplies ε by it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Sgd,
    Rmsprop,
    #[default]
    Adam,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheduler {
    #[default]
    None,
    DivGrad,
    MulEps,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub algo: Algorithm,
    pub eta: f64,
    pub eps: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// RMSProp smoothing constant.
    pub alpha: f64,
    pub scheduler: Scheduler,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            algo: Algorithm::Adam,
            eta: 0.00025,
            eps: 0.0003125,
            beta1: 0.9,
            beta2: 0.999,
            alpha: 0.95,
            scheduler: Scheduler::None,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: f64| Err(Error::InvalidArgument(format!("{what} = {v} out of range")));
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad("eta", self.eta);
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return bad("eps", self.eps);
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2), ("alpha", self.alpha)] {
            if !(0.0..1.0).contains(&b) {
                return bad(name, b);
            }
        }
        Ok(())
    }
}

/// Moment accumulators, one slot per parameter tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimState {
    /// Adam first moment `v`.
    pub first: Vec<Vec<f64>>,
    /// Adam / RMSProp second moment `s`.
    pub second: Vec<Vec<f64>>,
    /// RMSProp running mean of the gradient.
    pub mean: Vec<Vec<f64>>,
    pub t: u64,
}

impl OptimState {
    pub fn zeros(params: &[&Tensor]) -> Self {
        let z: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        Self {
            first: z.clone(),
            second: z.clone(),
            mean: z,
            t: 0,
        }
    }

    fn check(&self, params: &[&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.second.len() {
            return Err(Error::dim(
                "optimizer",
                format!(
                    "{} params, {} grads, state for {}",
                    params.len(),
                    grads.len(),
                    self.second.len()
                ),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || self.second[i].len() != p.numel() {
                return Err(Error::dim(
                    "optimizer",
                    format!("slot {i}: param {:?}, grad {:?}", p.shape(), g.shape()),
                ));
            }
        }
        Ok(())
    }
}

fn check_rho(rho_prod: f64) -> Result<()> {
    if !(rho_prod > 0.0 && rho_prod.is_finite()) {
        return Err(Error::InvalidArgument(format!("rho_prod must be positive, got {rho_prod}")));
    }
    Ok(())
}

/// Gradient multiplier and ε multiplier implied by the scheduler.
fn scheduler_factors(cfg: &OptimConfig, rho_prod: f64) -> (f64, f64) {
    match cfg.scheduler {
        Scheduler::None => (1.0, 1.0),
        Scheduler::DivGrad => (1.0 / rho_prod, 1.0),
        Scheduler::MulEps => (1.0, rho_prod),
    }
}

pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut OptimState,
    cfg: &OptimConfig,
    rho_prod: f64,
) -> Result<()> {
    state.check(params, grads)?;
    check_rho(rho_prod)?;
    let t = state.t.checked_add(1).ok_or(Error::StepOverflow)?;
    let (gscale, epsscale) = scheduler_factors(cfg, rho_prod);
    let eps = cfg.eps * epsscale;
    let bc1 = 1.0 - cfg.beta1.powf(t as f64);
    let bc2 = 1.0 - cfg.beta2.powf(t as f64);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (v, s) = (&mut state.first[i], &mut state.second[i]);
        let gd = g.data();
        for k in 0..gd.len() {
            let gk = gd[k] * gscale;
            v[k] = cfg.beta1 * v[k] + (1.0 - cfg.beta1) * gk;
            s[k] = cfg.beta2 * s[k] + (1.0 - cfg.beta2) * gk * gk;
        }
        p.update(|k, w| w - cfg.eta * (v[k] / bc1) / ((s[k] / bc2).sqrt() + eps))?;
    }
    state.t = t;
    Ok(())
}

/// Centered RMSProp.
pub fn rmsprop_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut OptimState,
    cfg: &OptimConfig,
    rho_prod: f64,
) -> Result<()> {
    state.check(params, grads)?;
    check_rho(rho_prod)?;
    let t = state.t.checked_add(1).ok_or(Error::StepOverflow)?;
    let (gscale, epsscale) = scheduler_factors(cfg, rho_prod);
    let eps = cfg.eps * epsscale;
    let a = cfg.alpha;
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (mu, s) = (&mut state.mean[i], &mut state.second[i]);
        let gd = g.data();
        let mut delta = vec![0.0; gd.len()];
        for k in 0..gd.len() {
            let gk = gd[k] * gscale;
            mu[k] = a * mu[k] + (1.0 - a) * gk;
            s[k] = a * s[k] + (1.0 - a) * gk * gk;
            let var = s[k] - mu[k] * mu[k];
            if var < -1e-12 {
                return Err(Error::InvalidArgument(format!(
                    "centered second moment went negative ({var})"
                )));
            }
            delta[k] = cfg.eta * gk / (var.max(0.0).sqrt() + eps);
        }
        p.update(|k, w| w - delta[k])?;
    }
    state.t = t;
    Ok(())
}

pub fn sgd_step(params: &mut [&mut Tensor], grads: &[Tensor], cfg: &OptimConfig) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::dim("sgd", format!("{} params, {} grads", params.len(), grads.len())));
    }
    for (p, g) in params.iter_mut().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::dim("sgd", format!("{:?} vs {:?}", p.shape(), g.shape())));
        }
        let gd = g.data();
        p.update(|k, w| w - cfg.eta * gd[k])?;
    }
    Ok(())
}

/// An optimiser bound to a fixed list of parameter shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub cfg: OptimConfig,
    pub state: OptimState,
}

impl Optimizer {
    pub fn new(cfg: OptimConfig, params: &[&Tensor]) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            state: OptimState::zeros(params),
        })
    }

    /// One update. `rho_prod` only matters when a scheduler is active.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], rho_prod: f64) -> Result<()> {
        match self.cfg.algo {
            Algorithm::Adam => adam_step(params, grads, &mut self.state, &self.cfg, rho_prod),
            Algorithm::Rmsprop => rmsprop_step(params, grads, &mut self.state, &self.cfg, rho_prod),
            Algorithm::Sgd => {
                check_rho(rho_prod)?;
                let t = self.state.t.checked_add(1).ok_or(Error::StepOverflow)?;
                if self.cfg.scheduler == Scheduler::DivGrad {
                    let scaled: Vec<Tensor> = grads
                        .iter()
                        .map(|g| g.scaled(1.0 / rho_prod))
                        .collect::<Result<_>>()?;
                    sgd_step(params, &scaled, &self.cfg)?;
                } else {
                    sgd_step(params, grads, &self.cfg)?;
                }
                self.state.t = t;
                Ok(())
            }
        }
    }
}
