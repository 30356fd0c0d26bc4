//! Spectral normalisation for value-based deep RL.
//!
//! A small, dependency-light stack: a reverse-mode autodiff [`tensor`]
//! engine, Q-networks ([`nn`]), power-iteration spectral normalisation
//! ([`specnorm`]), optimisers with spectral schedulers ([`optim`]), DQN
//! ([`rl`]), two toy games ([`envs`]), measurements ([`metrics`]) and the
//! experiment [`harness`].

pub mod envs;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod rl;
pub mod specnorm;
pub mod tensor;

pub use error::{Error, Result};
pub use nn::{build_qnet, forward, forward_scaled, ArchSpec, QNetwork};
pub use optim::{OptimConfig, OptimState, Optimizer, Scheduler};
pub use rl::{Agent, NormMode, RunLog, TrainConfig};
pub use specnorm::{GradMode, NormConfig, ProjectionRule, SpectralNorm, SpectralState};
pub use tensor::{Graph, Tensor, Var};
