//! Two small seedable grid games with binary channel-plane observations.
//!
//! Both games live on a 10×10 board with row 0 at the top. Difficulty is
//! `floor(score / 10)` and only ever rises within an episode.
//!
//! **Dodger** (actions: 0 left, 1 stay, 2 right). Channels: 0 agent, 1
//! hazards. The agent sits on the bottom row. Each tick: move the agent,
//! move every hazard down one row, resolve hazards on the bottom row (same
//! column as the agent ends the episode, otherwise +1 and the hazard is
//! removed), then with probability `min(0.2 + 0.05·difficulty, 0.8)` spawn a
//! hazard on the top row at a uniform column.
//!
//! **Paddle** (actions: 0 left, 1 stay, 2 right). Channels: 0 paddle, 1
//! ball, 2 the ball's previous cell. A one-cell paddle on the bottom row
//! returns a diagonally moving ball. Each tick: move the paddle, then run
//! `1 + difficulty` ball substeps. A substep bounces off the side walls and
//! the ceiling, and when the ball would enter the bottom row it bounces off
//! the paddle (+1) if the paddle is in the target column, otherwise the ball
//! falls out and the episode ends.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BOARD: usize = 10;

/// Binary `C×H×W` observation.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Observation {
    channels: usize,
    cells: Vec<u8>,
}

impl Observation {
    fn empty(channels: usize) -> Self {
        Self {
            channels,
            cells: vec![0; channels * BOARD * BOARD],
        }
    }

    pub fn from_cells(channels: usize, cells: Vec<u8>) -> Result<Self> {
        if cells.len() != channels * BOARD * BOARD || cells.iter().any(|&c| c > 1) {
            return Err(Error::InvalidArgument("observation cells must be 0/1 planes".into()));
        }
        Ok(Self { channels, cells })
    }

    fn set(&mut self, c: usize, row: usize, col: usize) {
        self.cells[(c * BOARD + row) * BOARD + col] = 1;
    }

    pub fn get(&self, c: usize, row: usize, col: usize) -> u8 {
        self.cells[(c * BOARD + row) * BOARD + col]
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, BOARD, BOARD]
    }

    pub fn cells(&self) -> &[u8] {
        &self.cells
    }

    /// Number of set cells in one channel.
    pub fn count(&self, c: usize) -> usize {
        self.cells[c * BOARD * BOARD..(c + 1) * BOARD * BOARD]
            .iter()
            .map(|&x| x as usize)
            .sum()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(
            self.shape().to_vec(),
            self.cells.iter().map(|&c| c as f64).collect(),
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub obs: Observation,
    pub reward: f64,
    pub done: bool,
}

pub trait Environment: Send {
    fn name(&self) -> &'static str;
    fn n_actions(&self) -> usize;
    fn obs_shape(&self) -> [usize; 3];
    fn reset(&mut self, seed: u64) -> Observation;
    fn step(&mut self, action: usize) -> Result<StepResult>;
    fn observation(&self) -> Observation;
    fn score(&self) -> u64;
    fn difficulty(&self) -> u64 {
        self.score() / 10
    }
}

/// Builds a registered environment by name.
pub fn make_env(name: &str) -> Result<Box<dyn Environment>> {
    match name {
        "dodger" => Ok(Box::new(Dodger::new())),
        "paddle" => Ok(Box::new(Paddle::new())),
        other => Err(Error::UnknownEnv(other.to_string())),
    }
}

pub const ENV_NAMES: [&str; 2] = ["dodger", "paddle"];

fn check_action(action: usize, n: usize) -> Result<()> {
    if action >= n {
        return Err(Error::InvalidArgument(format!("action {action} out of range 0..{n}")));
    }
    Ok(())
}

fn shift(col: usize, action: usize) -> usize {
    match action {
        0 => col.saturating_sub(1),
        2 => (col + 1).min(BOARD - 1),
        _ => col,
    }
}

#[derive(Clone, Debug)]
pub struct Dodger {
    agent: usize,
    /// `(row, col)` of live hazards.
    hazards: Vec<(usize, usize)>,
    score: u64,
    done: bool,
    rng: ChaCha8Rng,
}

impl Dodger {
    pub fn new() -> Self {
        let mut env = Self {
            agent: BOARD / 2,
            hazards: Vec::new(),
            score: 0,
            done: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        };
        env.reset(0);
        env
    }

    pub fn spawn_probability(difficulty: u64) -> f64 {
        (0.2 + 0.05 * difficulty as f64).min(0.8)
    }

    pub fn agent_col(&self) -> usize {
        self.agent
    }

    pub fn hazards(&self) -> &[(usize, usize)] {
        &self.hazards
    }

    /// Places a hazard directly; for tests and scripted scenarios.
    pub fn place_hazard(&mut self, row: usize, col: usize) {
        self.hazards.push((row.min(BOARD - 1), col.min(BOARD - 1)));
    }
}

impl Default for Dodger {
    fn default() -> Self {
        Self::new()
    }
}

impl Environment for Dodger {
    fn name(&self) -> &'static str {
        "dodger"
    }

    fn n_actions(&self) -> usize {
        3
    }

    fn obs_shape(&self) -> [usize; 3] {
        [2, BOARD, BOARD]
    }

    fn reset(&mut self, seed: u64) -> Observation {
        self.agent = BOARD / 2;
        self.hazards.clear();
        self.score = 0;
        self.done = false;
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.observation()
    }

    fn step(&mut self, action: usize) -> Result<StepResult> {
        if self.done {
            return Err(Error::StepAfterDone);
        }
        check_action(action, 3)?;
        self.agent = shift(self.agent, action);
        for h in &mut self.hazards {
            h.0 += 1;
        }
        let mut reward = 0.0;
        let agent = self.agent;
        let mut hit = false;
        self.hazards.retain(|&(r, c)| {
            if r < BOARD - 1 {
                return true;
            }
            if c == agent {
                hit = true;
            } else {
                reward += 1.0;
            }
            false
        });
        self.score += reward as u64;
        if hit {
            self.done = true;
        } else {
            let p = Self::spawn_probability(self.difficulty());
            if self.rng.random::<f64>() < p {
                let col = self.rng.random_range(0..BOARD);
                self.hazards.push((0, col));
            }
        }
        Ok(StepResult {
            obs: self.observation(),
            reward,
            done: self.done,
        })
    }

    fn observation(&self) -> Observation {
        let mut o = Observation::empty(2);
        o.set(0, BOARD - 1, self.agent);
        for &(r, c) in &self.hazards {
            o.set(1, r, c);
        }
        o
    }

    fn score(&self) -> u64 {
        self.score
    }
}

#[derive(Clone, Debug)]
pub struct Paddle {
    paddle: usize,
    ball: (usize, usize),
    prev: (usize, usize),
    /// Column and row direction, each ±1.
    vel: (i64, i64),
    score: u64,
    done: bool,
}

impl Paddle {
    pub fn new() -> Self {
        let mut env = Self {
            paddle: BOARD / 2,
            ball: (0, 0),
            prev: (0, 0),
            vel: (1, 1),
            score: 0,
            done: false,
        };
        env.reset(0);
        env
    }

    pub fn ball(&self) -> (usize, usize) {
        self.ball
    }

    pub fn paddle_col(&self) -> usize {
        self.paddle
    }

    /// One ball move. Returns the reward and whether the ball was lost.
    fn substep(&mut self) -> (f64, bool) {
        let (r, c) = (self.ball.0 as i64, self.ball.1 as i64);
        let (mut dr, mut dc) = (self.vel.1, self.vel.0);
        if c + dc < 0 || c + dc > BOARD as i64 - 1 {
            dc = -dc;
        }
        if r + dr < 0 {
            dr = -dr;
        }
        let mut reward = 0.0;
        let (mut nr, nc) = (r + dr, c + dc);
        if nr == BOARD as i64 - 1 {
            if nc as usize == self.paddle {
                reward = 1.0;
                dr = -dr;
                nr = r + dr;
            } else {
                self.prev = self.ball;
                self.ball = (BOARD - 1, nc as usize);
                return (0.0, true);
            }
        }
        self.prev = self.ball;
        self.ball = (nr as usize, nc as usize);
        self.vel = (dc, dr);
        (reward, false)
    }
}

impl Default for Paddle {
    fn default() -> Self {
        Self::new()
    }
}

impl Environment for Paddle {
    fn name(&self) -> &'static str {
        "paddle"
    }

    fn n_actions(&self) -> usize {
        3
    }

    fn obs_shape(&self) -> [usize; 3] {
        [3, BOARD, BOARD]
    }

    fn reset(&mut self, seed: u64) -> Observation {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let col = rng.random_range(0..BOARD);
        let dc = if rng.random::<bool>() { 1 } else { -1 };
        self.paddle = BOARD / 2;
        self.ball = (0, col);
        self.prev = (0, col);
        self.vel = (dc, 1);
        self.score = 0;
        self.done = false;
        self.observation()
    }

    fn step(&mut self, action: usize) -> Result<StepResult> {
        if self.done {
            return Err(Error::StepAfterDone);
        }
        check_action(action, 3)?;
        self.paddle = shift(self.paddle, action);
        let mut reward = 0.0;
        for _ in 0..1 + self.difficulty() {
            let (r, lost) = self.substep();
            reward += r;
            self.score += r as u64;
            if lost {
                self.done = true;
                break;
            }
        }
        Ok(StepResult {
            obs: self.observation(),
            reward,
            done: self.done,
        })
    }

    fn observation(&self) -> Observation {
        let mut o = Observation::empty(3);
        o.set(0, BOARD - 1, self.paddle);
        o.set(1, self.ball.0, self.ball.1);
        o.set(2, self.prev.0, self.prev.1);
        o
    }

    fn score(&self) -> u64 {
        self.score
    }
}

/// Mean return of the uniform random policy over `n_steps` environment
/// steps. Episodes are reset with seeds drawn from the policy stream; an
/// episode cut off by the step budget counts only when none finished.
pub fn random_policy_score(env: &mut dyn Environment, n_steps: u64, seed: u64) -> Result<f64> {
    if n_steps == 0 {
        return Err(Error::InvalidArgument("n_steps must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = env.n_actions();
    env.reset(rng.random());
    let mut returns = Vec::new();
    let mut current = 0.0;
    for _ in 0..n_steps {
        let res = env.step(rng.random_range(0..n))?;
        current += res.reward;
        if res.done {
            returns.push(current);
            current = 0.0;
            env.reset(rng.random());
        }
    }
    Ok(episode_mean(&returns, current))
}

/// Mean of completed episode returns, or the truncated return if none completed.
pub fn episode_mean(completed: &[f64], truncated: f64) -> f64 {
    if completed.is_empty() {
        truncated
    } else {
        completed.iter().sum::<f64>() / completed.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dodger_stay_on_empty_board() {
        let mut env = Dodger::new();
        env.reset(3);
        assert!(env.hazards().is_empty());
        let r = env.step(1).unwrap();
        assert_eq!(r.reward, 0.0);
        assert!(!r.done);
    }

    #[test]
    fn dodger_hazard_above_agent_ends_episode() {
        let mut env = Dodger::new();
        env.reset(3);
        let c = env.agent_col();
        env.place_hazard(BOARD - 2, c);
        let r = env.step(1).unwrap();
        assert!(r.done);
        assert_eq!(r.reward, 0.0);
        assert!(matches!(env.step(1), Err(Error::StepAfterDone)));
    }

    #[test]
    fn dodger_dodge_scores() {
        let mut env = Dodger::new();
        env.reset(3);
        let c = env.agent_col();
        env.place_hazard(BOARD - 2, c);
        let r = env.step(0).unwrap();
        assert!(!r.done);
        assert_eq!(r.reward, 1.0);
        assert_eq!(env.score(), 1);
    }

    #[test]
    fn spawn_probability_ramp() {
        assert_eq!(Dodger::spawn_probability(0), 0.2);
        assert!((Dodger::spawn_probability(4) - 0.4).abs() < 1e-15);
        assert_eq!(Dodger::spawn_probability(100), 0.8);
    }

    #[test]
    fn reset_is_deterministic() {
        for name in ENV_NAMES {
            let mut a = make_env(name).unwrap();
            let mut b = make_env(name).unwrap();
            let oa = a.reset(11);
            assert_eq!(oa, b.reset(11));
            assert_eq!(oa.count(0), 1);
        }
        assert!(make_env("pong").is_err());
    }

    #[test]
    fn dodger_seeds_differ() {
        let spawns = |seed| {
            let mut env = Dodger::new();
            env.reset(seed);
            (0..8)
                .map(|_| {
                    env.step(1).unwrap();
                    env.hazards().iter().filter(|h| h.0 == 0).map(|h| h.1).next()
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(spawns(1), spawns(1));
        assert_ne!(spawns(1), spawns(2));
    }

    #[test]
    fn paddle_bounces_off_paddle() {
        let mut env = Paddle::new();
        env.reset(0);
        // steer the paddle under the ball's landing column
        let mut total = 0.0;
        for _ in 0..200 {
            let (r, c) = env.ball();
            let (dc, _) = env.vel;
            let rows_left = (BOARD - 1 - r) as i64;
            let mut target = c as i64 + dc * rows_left;
            while !(0..BOARD as i64).contains(&target) {
                target = if target < 0 { -target } else { 2 * (BOARD as i64 - 1) - target };
            }
            let p = env.paddle_col() as i64;
            let a = if target < p { 0 } else if target > p { 2 } else { 1 };
            let res = env.step(a).unwrap();
            total += res.reward;
            if res.done {
                break;
            }
        }
        assert!(total >= 1.0);
    }

    #[test]
    fn paddle_miss_ends_episode() {
        let mut env = Paddle::new();
        env.reset(5);
        let mut done = false;
        for _ in 0..BOARD * 4 {
            // run from the ball
            let a = if env.ball().1 < env.paddle_col() { 2 } else { 0 };
            if env.step(a).unwrap().done {
                done = true;
                break;
            }
        }
        assert!(done);
    }

    #[test]
    fn random_score_positive_and_deterministic() {
        let mut env = Dodger::new();
        let a = random_policy_score(&mut env, 5000, 9).unwrap();
        let b = random_policy_score(&mut env, 5000, 9).unwrap();
        assert_eq!(a, b);
        assert!(a > 0.0);
        assert!(random_policy_score(&mut env, 0, 9).is_err());
    }
}
