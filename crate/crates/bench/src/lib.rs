//! Fixtures shared by the benchmarks.

use snrl::envs::{make_env, Observation};
use snrl::harness::config::desk_arch;
use snrl::rl::{Agent, Batch, NormMode, ReplayBuffer, Transition};
use snrl::{build_qnet, NormConfig, Tensor};

/// Deterministic dense values in `[-1, 1]`.
pub fn filled(shape: &[usize], phase: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|i| (i as f64 * 0.7548776662 + phase).sin()).collect();
    Tensor::new(shape.to_vec(), data).expect("finite fixture")
}

/// Desk-size agent in the given mode, normalising the penultimate layer.
pub fn desk_agent(mode: NormMode) -> Agent {
    let net = build_qnet(&desk_arch(), 0).expect("desk arch");
    Agent::new(net, &NormConfig::on_layers(&[-2]), mode, 1).expect("desk agent")
}

/// A replay buffer filled from dodger under a fixed cyclic policy.
pub fn dodger_replay(len: usize) -> ReplayBuffer {
    let mut env = make_env("dodger").expect("dodger");
    let mut buf = ReplayBuffer::new(len, env.obs_shape()).expect("buffer");
    let mut obs: Observation = env.reset(0);
    for t in 0..len {
        let a = (t * 7 / 3) % env.n_actions();
        let res = env.step(a).expect("step");
        buf.push(&Transition {
            s: obs,
            a,
            r: res.reward,
            s_next: res.obs.clone(),
            done: res.done,
        })
        .expect("push");
        obs = if res.done { env.reset(t as u64 + 1) } else { res.obs };
    }
    buf
}

/// The first `n` transitions of a filled buffer as a batch.
pub fn dodger_batch(n: usize) -> Batch {
    let buf = dodger_replay(n.max(64));
    buf.gather(&(0..n).collect::<Vec<_>>()).expect("gather")
}
