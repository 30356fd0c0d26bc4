//! Spectral radius estimation and spectral normalisation.
//!
//! Each normalised layer owns a [`SpectralState`] holding the right (`u`,
//! input-sized) and left (`v`, output-sized) iterates of power iteration on
//! the layer's linear operator. One step per training forward refines the
//! radius estimate; the weight is then replaced in the forward pass by
//! `W / denom` where `denom` comes from the [`ProjectionRule`]. The raw `W`
//! stays the trainable parameter.
//!
//! For conv layers the operator is "valid 3×3 convolution on the input
//! shape the layer was built for"; the two matrix-vector products become a
//! convolution and a transposed convolution.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ForwardPlan, Layer, LayerTransform, QNetwork, WeightTransform};
use crate::tensor::graph::RadiusGrad;
use crate::tensor::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

/// Persistent power-iteration state of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralState {
    /// Which layer (0-based) this state normalises.
    pub layer: usize,
    /// Right iterate, length = operator input dimension.
    pub u: Vec<f64>,
    /// Left iterate, length = operator output dimension.
    pub v: Vec<f64>,
    /// Latest radius estimate.
    pub rho: f64,
}

impl SpectralState {
    /// Unit Gaussian start vectors.
    pub fn random(layer: usize, in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut draw = |n: usize| {
            let mut x: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
            let norm = kernels::norm2(&x);
            x.iter_mut().for_each(|e| *e /= norm);
            x
        };
        let u = draw(in_dim);
        let v = draw(out_dim);
        Self { layer, u, v, rho: 0.0 }
    }

    /// Start state with a given right vector.
    pub fn with_u(layer: usize, u: Vec<f64>, out_dim: usize) -> Self {
        Self {
            layer,
            u,
            v: vec![0.0; out_dim],
            rho: 0.0,
        }
    }
}

/// A layer's weight viewed as a linear operator.
#[derive(Clone, Copy, Debug)]
pub enum Operator<'a> {
    Dense { w: &'a [f64], rows: usize, cols: usize },
    Conv { kernel: &'a [f64], geom: ConvGeom },
}

impl<'a> Operator<'a> {
    pub fn of_layer(layer: &'a Layer) -> Self {
        match layer.conv_geom() {
            Some(geom) => Operator::Conv {
                kernel: layer.weight.data(),
                geom,
            },
            None => Operator::Dense {
                w: layer.weight.data(),
                rows: layer.weight.shape()[0],
                cols: layer.weight.shape()[1],
            },
        }
    }

    pub fn dense(w: &'a Tensor) -> Result<Self> {
        if w.rank() != 2 {
            return Err(Error::dim("power_iter_step", format!("weight shape {:?}", w.shape())));
        }
        Ok(Operator::Dense {
            w: w.data(),
            rows: w.shape()[0],
            cols: w.shape()[1],
        })
    }

    pub fn conv(kernel: &'a Tensor, in_shape: &[usize]) -> Result<Self> {
        let ks = kernel.shape();
        if ks.len() != 4 || in_shape.len() != 3 || in_shape[0] != ks[1] || in_shape[1] < ks[2] || in_shape[2] < ks[3] {
            return Err(Error::dim(
                "conv_power_iter_step",
                format!("kernel {ks:?} on input {in_shape:?}"),
            ));
        }
        Ok(Operator::Conv {
            kernel: kernel.data(),
            geom: ConvGeom {
                batch: 1,
                in_channels: in_shape[0],
                height: in_shape[1],
                width: in_shape[2],
                out_channels: ks[0],
                kh: ks[2],
                kw: ks[3],
            },
        })
    }

    pub fn in_dim(&self) -> usize {
        match self {
            Operator::Dense { cols, .. } => *cols,
            Operator::Conv { geom, .. } => geom.input_len(),
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            Operator::Dense { rows, .. } => *rows,
            Operator::Conv { geom, .. } => geom.output_len(),
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Operator::Dense { w, rows, cols } => kernels::matvec(w, x, *rows, *cols),
            Operator::Conv { kernel, geom } => kernels::conv2d(x, kernel, geom),
        }
    }

    pub fn apply_t(&self, y: &[f64]) -> Vec<f64> {
        match self {
            Operator::Dense { w, rows, cols } => kernels::matvec_t(w, y, *rows, *cols),
            Operator::Conv { kernel, geom } => kernels::conv2d_backward_input(y, kernel, geom),
        }
    }

    /// `∂(vᵀ W u)/∂W`, laid out like the weight: `v uᵀ` for dense layers,
    /// the kernel correlation of `u` with `v` for convolutions.
    pub fn radius_grad(&self, u: &[f64], v: &[f64]) -> Vec<f64> {
        match self {
            Operator::Dense { rows, cols, .. } => {
                let mut out = Vec::with_capacity(rows * cols);
                for &vi in v.iter().take(*rows) {
                    out.extend(u.iter().take(*cols).map(|uj| vi * uj));
                }
                out
            }
            Operator::Conv { geom, .. } => kernels::conv2d_backward_kernel(u, v, geom),
        }
    }

    /// Materialised `out_dim × in_dim` matrix. Test and oracle use only.
    pub fn to_matrix(&self) -> Tensor {
        let (m, n) = (self.out_dim(), self.in_dim());
        let mut data = vec![0.0; m * n];
        let mut e = vec![0.0; n];
        for j in 0..n {
            e[j] = 1.0;
            let col = self.apply(&e);
            for i in 0..m {
                data[i * n + j] = col[i];
            }
            e[j] = 0.0;
        }
        Tensor::from_parts(vec![m, n], data)
    }
}

/// One power-iteration step on an arbitrary operator.
pub fn operator_step(op: &Operator<'_>, state: &SpectralState) -> Result<SpectralState> {
    if state.u.len() != op.in_dim() {
        return Err(Error::dim(
            "power_iter_step",
            format!("u has length {}, operator input {}", state.u.len(), op.in_dim()),
        ));
    }
    let mut v = op.apply(&state.u);
    let alpha = kernels::norm2(&v);
    if alpha == 0.0 {
        return Ok(SpectralState {
            layer: state.layer,
            u: state.u.clone(),
            v: if state.v.len() == v.len() { state.v.clone() } else { v },
            rho: 0.0,
        });
    }
    v.iter_mut().for_each(|x| *x /= alpha);
    let mut u = op.apply_t(&v);
    let rho = kernels::norm2(&u);
    if rho == 0.0 {
        return Ok(SpectralState {
            layer: state.layer,
            u: state.u.clone(),
            v,
            rho: 0.0,
        });
    }
    u.iter_mut().for_each(|x| *x /= rho);
    Ok(SpectralState {
        layer: state.layer,
        u,
        v,
        rho,
    })
}

/// `v ← W u / ‖W u‖; u ← Wᵀ v; ρ ← ‖u‖; u ← u / ρ` for a dense weight.
pub fn power_iter_step(w: &Tensor, state: &SpectralState) -> Result<SpectralState> {
    operator_step(&Operator::dense(w)?, state)
}

/// Power-iteration step for the valid convolution of `kernel` on `in_shape`.
pub fn conv_power_iter_step(kernel: &Tensor, in_shape: &[usize], state: &SpectralState) -> Result<SpectralState> {
    operator_step(&Operator::conv(kernel, in_shape)?, state)
}

/// Iterates from a fixed start until the estimate stops moving (relative
/// change below `tol`) or `max_iters` is reached.
pub fn converged_radius(op: &Operator<'_>, max_iters: usize, tol: f64) -> Result<f64> {
    let n = op.in_dim();
    // deterministic, generic start: not orthogonal to the top singular vector
    // except on a measure-zero set
    let mut u: Vec<f64> = (0..n).map(|i| 1.0 + 0.5 * ((i as f64) * 0.618_033_988_75).sin()).collect();
    let norm = kernels::norm2(&u);
    u.iter_mut().for_each(|x| *x /= norm);
    let mut state = SpectralState::with_u(0, u, op.out_dim());
    let mut prev = -1.0;
    for _ in 0..max_iters {
        state = operator_step(op, &state)?;
        if state.rho == 0.0 {
            return Ok(0.0);
        }
        if (state.rho - prev).abs() <= tol * state.rho {
            break;
        }
        prev = state.rho;
    }
    Ok(state.rho)
}

/// Spectral radius of a layer by converged power iteration.
pub fn layer_radius(layer: &Layer) -> Result<f64> {
    converged_radius(&Operator::of_layer(layer), 20_000, 1e-14)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradMode {
    /// The radius is a constant of the graph.
    #[default]
    StopGradient,
    /// Differentiate through the radius as well (rank-one correction).
    FullNormJacobian,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionRule {
    /// `W / max(λ, ρ)`
    #[default]
    PaperLiteral,
    /// `W / max(1, ρ/λ)`
    GoukRatio,
}

/// Denominator of the projection for radius `rho` and target `lambda`.
pub fn projection_denominator(rho: f64, lambda: f64, rule: ProjectionRule) -> f64 {
    match rule {
        ProjectionRule::PaperLiteral => lambda.max(rho),
        ProjectionRule::GoukRatio => 1.0f64.max(rho / lambda),
    }
}

/// `∂denom/∂ρ` at `rho`; zero where the clamp is active.
fn denominator_slope(rho: f64, lambda: f64, rule: ProjectionRule) -> f64 {
    match rule {
        ProjectionRule::PaperLiteral if rho > lambda => 1.0,
        ProjectionRule::GoukRatio if rho > lambda => 1.0 / lambda,
        _ => 0.0,
    }
}

/// Hard projection of a weight given its radius.
pub fn project(w: &Tensor, rho: f64, lambda: f64, rule: ProjectionRule) -> Result<Tensor> {
    if !(lambda > 0.0) || !(rho >= 0.0) {
        return Err(Error::InvalidArgument(format!("project needs λ>0, ρ≥0; got λ={lambda}, ρ={rho}")));
    }
    w.scaled(1.0 / projection_denominator(rho, lambda, rule))
}

/// Which layers are normalised and how.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NormConfig {
    /// Layer indices: `1..=L` counts from the input, `-1` is the output
    /// layer, `-2` the one before it, and so on.
    pub layers: Vec<isize>,
    /// Target constant used for every layer without an explicit entry.
    pub lambda: f64,
    /// Optional per-layer constants, parallel to `layers`.
    pub lambdas: Vec<f64>,
    pub grad_mode: GradMode,
    pub projection_rule: ProjectionRule,
}

impl Default for NormConfig {
    fn default() -> Self {
        Self {
            layers: Vec::new(),
            lambda: 1.0,
            lambdas: Vec::new(),
            grad_mode: GradMode::StopGradient,
            projection_rule: ProjectionRule::PaperLiteral,
        }
    }
}

impl NormConfig {
    pub fn on_layers(layers: &[isize]) -> Self {
        Self {
            layers: layers.to_vec(),
            ..Self::default()
        }
    }

    /// Resolves `layers` against a network depth into sorted, de-duplicated
    /// `(0-based index, λ)` pairs.
    pub fn resolve(&self, n_layers: usize) -> Result<Vec<(usize, f64)>> {
        if !self.lambdas.is_empty() && self.lambdas.len() != self.layers.len() {
            return Err(Error::InvalidArgument(format!(
                "{} lambdas for {} layers",
                self.lambdas.len(),
                self.layers.len()
            )));
        }
        let mut out: Vec<(usize, f64)> = Vec::with_capacity(self.layers.len());
        for (k, &idx) in self.layers.iter().enumerate() {
            let pos = resolve_index(idx, n_layers)?;
            let lambda = self.lambdas.get(k).copied().unwrap_or(self.lambda);
            if !(lambda > 0.0) || !lambda.is_finite() {
                return Err(Error::InvalidArgument(format!("λ must be positive, got {lambda}")));
            }
            match out.iter().find(|(p, _)| *p == pos) {
                Some((_, l)) if *l != lambda => {
                    return Err(Error::InvalidArgument(format!(
                        "layer {idx} listed twice with different λ"
                    )));
                }
                Some(_) => {}
                None => out.push((pos, lambda)),
            }
        }
        out.sort_by_key(|(p, _)| *p);
        Ok(out)
    }
}

/// Maps a 1-based or negative layer index to a 0-based position.
pub fn resolve_index(idx: isize, n_layers: usize) -> Result<usize> {
    let l = n_layers as isize;
    let pos = if idx > 0 { idx - 1 } else { l + idx };
    if idx == 0 || pos < 0 || pos >= l {
        return Err(Error::LayerIndex {
            index: idx,
            layers: n_layers,
        });
    }
    Ok(pos as usize)
}

/// Normalisation config bound to a network, with its per-layer states.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralNorm {
    config: NormConfig,
    targets: Vec<(usize, f64)>,
    states: Vec<SpectralState>,
}

impl SpectralNorm {
    pub fn new(net: &QNetwork, config: NormConfig, seed: u64) -> Result<Self> {
        let targets = config.resolve(net.n_layers())?;
        let states = targets
            .iter()
            .map(|&(layer, _)| {
                let op = Operator::of_layer(&net.layers()[layer]);
                // one stream per layer so adding a layer leaves the others alone
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(layer as u64 + 1)));
                SpectralState::random(layer, op.in_dim(), op.out_dim(), &mut rng)
            })
            .collect();
        Ok(Self {
            config,
            targets,
            states,
        })
    }

    /// Rebinds saved states, checking they match the config and network.
    pub fn from_states(net: &QNetwork, config: NormConfig, states: Vec<SpectralState>) -> Result<Self> {
        let targets = config.resolve(net.n_layers())?;
        if targets.len() != states.len() {
            return Err(Error::InvalidArgument(format!(
                "{} states for {} normalised layers",
                states.len(),
                targets.len()
            )));
        }
        for ((layer, _), s) in targets.iter().zip(&states) {
            let op = Operator::of_layer(&net.layers()[*layer]);
            if s.layer != *layer || s.u.len() != op.in_dim() || s.v.len() != op.out_dim() {
                return Err(Error::InvalidArgument(format!("state for layer {} does not fit", s.layer)));
            }
        }
        Ok(Self {
            config,
            targets,
            states,
        })
    }

    pub fn config(&self) -> &NormConfig {
        &self.config
    }

    pub fn states(&self) -> &[SpectralState] {
        &self.states
    }

    pub fn states_mut(&mut self) -> &mut [SpectralState] {
        &mut self.states
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// One power-iteration step on every normalised layer.
    pub fn step(&mut self, net: &QNetwork) -> Result<()> {
        for state in &mut self.states {
            let op = Operator::of_layer(&net.layers()[state.layer]);
            *state = operator_step(&op, state)?;
        }
        Ok(())
    }

    /// `(layer, λ, denominator)` for every normalised layer.
    pub fn denominators(&self) -> Vec<(usize, f64, f64)> {
        self.targets
            .iter()
            .zip(&self.states)
            .map(|(&(layer, lambda), s)| {
                (layer, lambda, projection_denominator(s.rho, lambda, self.config.projection_rule))
            })
            .collect()
    }

    /// Product of the clamped radii over the normalised layers; 1 when empty.
    pub fn rho_product(&self) -> f64 {
        self.denominators().iter().map(|(_, _, d)| d).product()
    }

    /// Plan that projects every normalised layer.
    pub fn projection_plan(&self, net: &QNetwork) -> ForwardPlan {
        let mut plan = ForwardPlan::identity(net.n_layers());
        for ((layer, lambda, denom), state) in self.denominators().into_iter().zip(&self.states) {
            let radius_grad = match self.config.grad_mode {
                GradMode::StopGradient => None,
                GradMode::FullNormJacobian => {
                    let slope = denominator_slope(state.rho, lambda, self.config.projection_rule);
                    (slope != 0.0).then(|| RadiusGrad {
                        drho_dw: Operator::of_layer(&net.layers()[layer]).radius_grad(&state.u, &state.v),
                        ddenom_drho: slope,
                    })
                }
            };
            plan.layers[layer].weight = WeightTransform::Divide { denom, radius_grad };
        }
        plan
    }

    /// Projection plus bias scaling: the bias of layer `i` is multiplied by
    /// the inverse product of denominators of normalised layers up to and
    /// including `i`, so every pre-activation is an exact scaling of the
    /// unnormalised one. Radii are constants of the graph.
    pub fn bias_scaled_plan(&self, net: &QNetwork) -> ForwardPlan {
        let mut plan = ForwardPlan::identity(net.n_layers());
        let denoms = self.denominators();
        let mut cumulative = 1.0;
        for (i, tf) in plan.layers.iter_mut().enumerate() {
            if let Some(&(_, _, d)) = denoms.iter().find(|(l, _, _)| *l == i) {
                cumulative *= d;
                tf.weight = WeightTransform::Divide {
                    denom: d,
                    radius_grad: None,
                };
            }
            *tf = LayerTransform {
                weight: std::mem::take(&mut tf.weight),
                bias_scale: 1.0 / cumulative,
            };
        }
        plan
    }

    /// Plain network with the output divided by [`rho_product`](Self::rho_product).
    pub fn output_scaled_plan(&self, net: &QNetwork) -> ForwardPlan {
        let mut plan = ForwardPlan::identity(net.n_layers());
        plan.output_scale = 1.0 / self.rho_product();
        plan
    }
}

/// Product over `states` of the projection denominators.
pub fn rho_product(states: &[SpectralState], config: &NormConfig, n_layers: usize) -> Result<f64> {
    let targets = config.resolve(n_layers)?;
    let mut prod = 1.0;
    for (layer, lambda) in targets {
        let state = states
            .iter()
            .find(|s| s.layer == layer)
            .ok_or_else(|| Error::InvalidArgument(format!("no spectral state for layer {layer}")))?;
        prod *= projection_denominator(state.rho, lambda, config.projection_rule);
    }
    Ok(prod)
}

/// Forward with the normalised layers projected. In training mode one
/// power-iteration step runs first; otherwise the stored radii are reused.
pub fn normalized_forward(net: &QNetwork, obs: &Tensor, norm: &mut SpectralNorm, training: bool) -> Result<Tensor> {
    if training {
        norm.step(net)?;
    }
    net.evaluate(obs, &norm.projection_plan(net))
}

/// Forward with projection and bias scaling.
pub fn bias_scaled_forward(net: &QNetwork, obs: &Tensor, norm: &mut SpectralNorm, training: bool) -> Result<Tensor> {
    if training {
        norm.step(net)?;
    }
    net.evaluate(obs, &norm.bias_scaled_plan(net))
}
