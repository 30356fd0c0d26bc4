//! Measurements taken on networks and runs: normalised scores, input
//! Jacobian norms, Lipschitz upper bounds, spectral radii, effective rank
//! and rank correlation.

mod svd;

pub use svd::{singular_values, svd_singular_values};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ForwardPlan, QNetwork};
use crate::specnorm::{converged_radius, Operator};
use crate::tensor::{Graph, Tensor};

/// One evaluation point of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub eval_mean_return: f64,
    pub normalised_score: f64,
    pub rho_per_layer: Vec<f64>,
    pub jacobian_max_norm: Option<f64>,
    pub effective_rank: Option<usize>,
}

/// Per-game `(max, random)` score constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    entries: BTreeMap<String, (f64, f64)>,
}

impl ScoreTable {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, game: &str, max_score: f64, random_score: f64) -> Result<()> {
        if !(max_score > random_score) {
            return Err(Error::InvalidArgument(format!(
                "{game}: max score {max_score} must exceed random score {random_score}"
            )));
        }
        self.entries.insert(game.to_string(), (max_score, random_score));
        Ok(())
    }

    pub fn get(&self, game: &str) -> Option<(f64, f64)> {
        self.entries.get(game).copied()
    }

    /// MinAtar constants plus the two bundled games.
    pub fn builtin() -> Self {
        let mut t = Self::new();
        for (g, max, rand) in [
            ("asterix", 78.90, 0.49),
            ("breakout", 122.88, 0.52),
            ("seaquest", 93.91, 0.09),
            ("space_invaders", 360.92, 2.86),
            ("dodger", DODGER_MAX, DODGER_RANDOM),
            ("paddle", PADDLE_MAX, PADDLE_RANDOM),
        ] {
            t.insert(g, max, rand).expect("builtin table is consistent");
        }
        t
    }

    /// Normalised score of `score` on `game`.
    pub fn normalise(&self, game: &str, score: f64) -> Result<f64> {
        let (max, rand) = self.get(game).ok_or_else(|| Error::UnknownEnv(game.to_string()))?;
        normalised_score(score, max, rand)
    }
}

impl Default for ScoreTable {
    fn default() -> Self {
        Self::builtin()
    }
}

// Measured with the bundled harness: random-policy mean over 10⁶ steps
// (seed 0), and the best evaluation return of a baseline DQN-Adam agent over
// 200k desk-scale steps (seed 0, 5000 evaluation steps).
pub const DODGER_RANDOM: f64 = 9.116289391921882;
pub const DODGER_MAX: f64 = 3904.0;
pub const PADDLE_RANDOM: f64 = 0.11368603267337445;
pub const PADDLE_MAX: f64 = 11.59;

/// `100 · (score − random) / (max − random)`.
pub fn normalised_score(score: f64, max_score: f64, random_score: f64) -> Result<f64> {
    if !(max_score > random_score) {
        return Err(Error::InvalidArgument(format!(
            "degenerate score table entry: max {max_score}, random {random_score}"
        )));
    }
    Ok(100.0 * (score - random_score) / (max_score - random_score))
}

/// Stacks observations of identical shape into a batch `[N, ...]`.
pub fn stack(states: &[Tensor]) -> Result<Tensor> {
    let first = states
        .first()
        .ok_or_else(|| Error::InvalidArgument("no states to stack".into()))?;
    let mut data = Vec::with_capacity(first.numel() * states.len());
    for s in states {
        if s.shape() != first.shape() {
            return Err(Error::dim("stack", format!("{:?} vs {:?}", s.shape(), first.shape())));
        }
        data.extend_from_slice(s.data());
    }
    let mut shape = vec![states.len()];
    shape.extend_from_slice(first.shape());
    Tensor::new(shape, data)
}

/// `max over states and actions of ‖∂q_a(x)/∂x‖₂` under `plan`.
pub fn jacobian_max_norm(net: &QNetwork, plan: &ForwardPlan, states: &[Tensor]) -> Result<f64> {
    let batch = stack(states)?;
    let n = states.len();
    let per = batch.numel() / n;
    let mut g = Graph::new();
    let x = g.param(batch);
    let rec = net.record(&mut g, x, plan, false)?;
    let mut best = 0.0f64;
    for a in 0..net.n_actions() {
        // samples are independent, so the gradient of the summed column
        // holds every per-sample Jacobian row
        let col = g.select_per_row(rec.q_batch, &vec![a; n])?;
        let s = g.sum(col)?;
        g.reset();
        g.backward(s)?;
        let grad = g.grad(x).expect("input is trainable");
        for row in grad.chunks(per) {
            best = best.max(row.iter().map(|v| v * v).sum::<f64>().sqrt());
        }
    }
    Ok(best)
}

/// Spectral radius of every layer's operator.
pub fn rho_per_layer(net: &QNetwork, oracle_exact: bool) -> Result<Vec<f64>> {
    net.layers()
        .iter()
        .map(|l| {
            let op = Operator::of_layer(l);
            if oracle_exact {
                Ok(svd_singular_values(&op.to_matrix())?[0])
            } else {
                converged_radius(&op, 20_000, 1e-14)
            }
        })
        .collect()
}

/// Cheap radius estimate for logging: a bounded number of iterations.
pub fn rho_per_layer_approx(net: &QNetwork) -> Result<Vec<f64>> {
    net.layers()
        .iter()
        .map(|l| converged_radius(&Operator::of_layer(l), 500, 1e-9))
        .collect()
}

/// Product of per-layer spectral radii; rectifiers are 1-Lipschitz.
pub fn lipschitz_upper_bound(net: &QNetwork, oracle_exact: bool) -> Result<f64> {
    Ok(rho_per_layer(net, oracle_exact)?.iter().product())
}

/// Inputs to the last layer, `[N × F]`, for a batch of states.
pub fn penultimate_features(net: &QNetwork, plan: &ForwardPlan, states: &[Tensor]) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(stack(states)?);
    let rec = net.record(&mut g, x, plan, false)?;
    Ok(g.value(rec.features).clone())
}

/// Smallest `k` whose leading singular values hold `threshold` of the total
/// singular-value mass. Zero for an all-zero matrix.
pub fn effective_rank(features: &Tensor, threshold: f64) -> Result<usize> {
    if features.rank() != 2 {
        return Err(Error::dim("effective_rank", format!("{:?}", features.shape())));
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidArgument(format!("threshold {threshold} outside [0, 1]")));
    }
    let sv = svd_singular_values(features)?;
    let total: f64 = sv.iter().sum();
    if total == 0.0 {
        return Ok(0);
    }
    let mut acc = 0.0;
    for (k, s) in sv.iter().enumerate() {
        acc += s;
        // slack absorbs rounding in the cumulative sum (k/100 ≥ 0.99 and the like)
        if acc / total >= threshold - 1e-12 {
            return Ok(k + 1);
        }
    }
    Ok(sv.len())
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman's rank correlation.
pub fn spearman_rank(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "spearman needs two equal-length samples of size ≥ 2, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    let (rx, ry) = (average_ranks(xs), average_ranks(ys));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::InvalidArgument("rank variance is zero".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{forward, Activation};

    #[test]
    fn normalised_score_examples() {
        assert!((normalised_score(78.90, 78.90, 0.49).unwrap() - 100.0).abs() < 1e-12);
        assert_eq!(normalised_score(0.49, 78.90, 0.49).unwrap(), 0.0);
        assert!((normalised_score(40.0, 78.90, 0.49).unwrap() - 100.0 * 39.51 / 78.41).abs() < 1e-9);
        assert!(normalised_score(1.0, 1.0, 1.0).is_err());
        let t = ScoreTable::builtin();
        assert_eq!(t.get("breakout"), Some((122.88, 0.52)));
        assert!(t.normalise("pong", 1.0).is_err());
    }

    #[test]
    fn effective_rank_examples() {
        assert_eq!(effective_rank(&Tensor::identity(100), 0.99).unwrap(), 99);
        let r1 = Tensor::matrix(&[vec![1.0, 2.0], vec![2.0, 4.0]]).unwrap();
        assert_eq!(effective_rank(&r1, 0.99).unwrap(), 1);
        let mut d = Tensor::identity(10);
        d.update(|i, v| if i == 0 { 10.0 } else { v }).unwrap();
        assert_eq!(effective_rank(&d, 0.99).unwrap(), 10);
        assert_eq!(effective_rank(&Tensor::zeros(&[3, 4]), 0.99).unwrap(), 0);
    }

    #[test]
    fn spearman_examples() {
        assert_eq!(spearman_rank(&[1.0, 2.0, 3.0], &[2.0, 5.0, 9.0]).unwrap(), 1.0);
        assert_eq!(spearman_rank(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        let r = spearman_rank(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((r - 0.8).abs() < 1e-12);
        assert!(spearman_rank(&[1.0, 1.0], &[1.0, 2.0]).is_err());
        assert!(spearman_rank(&[1.0], &[1.0]).is_err());
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0]), vec![2.5, 1.0, 2.5]);
    }

    #[test]
    fn jacobian_of_linear_net_is_max_row_norm() {
        let w = Tensor::matrix(&[vec![3.0, 4.0], vec![1.0, 0.0]]).unwrap();
        let net = QNetwork::from_layers(vec![2], vec![(w, Tensor::zeros(&[2]), Activation::None)]).unwrap();
        let states = vec![Tensor::vector(vec![0.1, 0.2]).unwrap(), Tensor::vector(vec![-5.0, 2.0]).unwrap()];
        let plan = ForwardPlan::identity(1);
        assert!((jacobian_max_norm(&net, &plan, &states).unwrap() - 5.0).abs() < 1e-15);
    }

    #[test]
    fn jacobian_of_zero_net_is_zero() {
        let net = QNetwork::from_layers(
            vec![3],
            vec![
                (Tensor::zeros(&[4, 3]), Tensor::zeros(&[4]), Activation::Relu),
                (Tensor::zeros(&[2, 4]), Tensor::zeros(&[2]), Activation::None),
            ],
        )
        .unwrap();
        let states = vec![Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap()];
        assert_eq!(jacobian_max_norm(&net, &ForwardPlan::identity(2), &states).unwrap(), 0.0);
    }

    #[test]
    fn lipschitz_bound_examples() {
        let id = QNetwork::from_layers(
            vec![3],
            vec![
                (Tensor::identity(3), Tensor::zeros(&[3]), Activation::Relu),
                (Tensor::identity(3), Tensor::zeros(&[3]), Activation::None),
            ],
        )
        .unwrap();
        assert!((lipschitz_upper_bound(&id, true).unwrap() - 1.0).abs() < 1e-12);
        assert!((lipschitz_upper_bound(&id, false).unwrap() - 1.0).abs() < 1e-12);
        let d = Tensor::matrix(&[vec![3.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let net = QNetwork::from_layers(vec![2], vec![(d, Tensor::zeros(&[2]), Activation::None)]).unwrap();
        assert!((lipschitz_upper_bound(&net, true).unwrap() - 3.0).abs() < 1e-12);
        assert!((lipschitz_upper_bound(&net, false).unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn penultimate_features_shape() {
        let net = QNetwork::from_layers(
            vec![2],
            vec![
                (Tensor::identity(2), Tensor::zeros(&[2]), Activation::Relu),
                (Tensor::identity(2), Tensor::zeros(&[2]), Activation::None),
            ],
        )
        .unwrap();
        let states = vec![Tensor::vector(vec![1.0, -1.0]).unwrap(); 3];
        let f = penultimate_features(&net, &ForwardPlan::identity(2), &states).unwrap();
        assert_eq!(f.shape(), &[3, 2]);
        assert_eq!(&f.data()[..2], &[1.0, 0.0]);
        assert_eq!(forward(&net, &states[0]).unwrap().data(), &[1.0, 0.0]);
    }
}
