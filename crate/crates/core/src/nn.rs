//! Q-network construction and forward evaluation.
//!
//! A network is a stack of conv / dense layers, each `z = W a + b`, with a
//! rectifier after every layer except the last. Layers are indexed from 0
//! internally; [`NormConfig`](crate::specnorm::NormConfig) accepts 1-based
//! and negative (`SN[-k]`) indices and resolves them against this order.
//!
//! Every forward path (plain, projected, bias-scaled, output-scaled) goes
//! through [`QNetwork::record`] with a [`ForwardPlan`] describing how the raw
//! parameters are transformed on the way in.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::graph::RadiusGrad;
use crate::tensor::kernels::ConvGeom;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv,
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    None,
}

/// One layer of an architecture. Widths are channels for conv layers and
/// units for dense layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_width: usize,
    pub out_width: usize,
    pub activation: Activation,
}

/// `n_conv` 3×3 conv layers of equal width, a hidden dense layer and the
/// output layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub n_conv: usize,
    pub conv_width: usize,
    pub fc_width: usize,
    pub n_actions: usize,
    pub obs_channels: usize,
    pub obs_height: usize,
    pub obs_width: usize,
}

pub const CONV_KERNEL: usize = 3;

impl ArchSpec {
    pub fn input_shape(&self) -> Vec<usize> {
        vec![self.obs_channels, self.obs_height, self.obs_width]
    }

    /// Layer list implied by the architecture, validating the dimensions.
    pub fn layer_specs(&self) -> Result<Vec<LayerSpec>> {
        let widths = [
            self.fc_width,
            self.n_actions,
            self.obs_channels,
            self.obs_height,
            self.obs_width,
        ];
        if widths.contains(&0) || (self.n_conv > 0 && self.conv_width == 0) {
            return Err(Error::InvalidArgument(format!("architecture has a zero width: {self:?}")));
        }
        let shrink = self.n_conv * (CONV_KERNEL - 1);
        if self.obs_height <= shrink || self.obs_width <= shrink {
            return Err(Error::InvalidArgument(format!(
                "{}x{} observation cannot pass through {} valid 3x3 convolutions",
                self.obs_height, self.obs_width, self.n_conv
            )));
        }
        let mut specs = Vec::with_capacity(self.n_conv + 2);
        let mut channels = self.obs_channels;
        for _ in 0..self.n_conv {
            specs.push(LayerSpec {
                kind: LayerKind::Conv,
                in_width: channels,
                out_width: self.conv_width,
                activation: Activation::Relu,
            });
            channels = self.conv_width;
        }
        let flat = channels * (self.obs_height - shrink) * (self.obs_width - shrink);
        specs.push(LayerSpec {
            kind: LayerKind::Linear,
            in_width: flat,
            out_width: self.fc_width,
            activation: Activation::Relu,
        });
        specs.push(LayerSpec {
            kind: LayerKind::Linear,
            in_width: self.fc_width,
            out_width: self.n_actions,
            activation: Activation::None,
        });
        Ok(specs)
    }
}

/// A parameterised layer. `in_shape` is the per-sample input shape the layer
/// was built for (`C×H×W` for conv, `[F]` for dense) and fixes the linear
/// operator whose spectral radius is tracked.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
    in_shape: Vec<usize>,
}

impl Layer {
    pub fn kind(&self) -> LayerKind {
        if self.weight.rank() == 4 {
            LayerKind::Conv
        } else {
            LayerKind::Linear
        }
    }

    pub fn in_shape(&self) -> &[usize] {
        &self.in_shape
    }

    /// Per-sample output shape.
    pub fn out_shape(&self) -> Vec<usize> {
        let ws = self.weight.shape();
        match self.kind() {
            LayerKind::Conv => vec![
                ws[0],
                self.in_shape[1] + 1 - ws[2],
                self.in_shape[2] + 1 - ws[3],
            ],
            LayerKind::Linear => vec![ws[0]],
        }
    }

    /// Geometry of the single-sample convolution, for conv layers.
    pub fn conv_geom(&self) -> Option<ConvGeom> {
        (self.kind() == LayerKind::Conv).then(|| {
            let ws = self.weight.shape();
            ConvGeom {
                batch: 1,
                in_channels: ws[1],
                height: self.in_shape[1],
                width: self.in_shape[2],
                out_channels: ws[0],
                kh: ws[2],
                kw: ws[3],
            }
        })
    }
}

/// Parameterised Q-network.
#[derive(Clone, Debug, PartialEq)]
pub struct QNetwork {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
}

/// How a raw weight enters the forward pass.
#[derive(Clone, Debug, Default)]
pub enum WeightTransform {
    #[default]
    Raw,
    /// `W / denom`, optionally differentiating through the denominator.
    Divide {
        denom: f64,
        radius_grad: Option<RadiusGrad>,
    },
}

#[derive(Clone, Debug)]
pub struct LayerTransform {
    pub weight: WeightTransform,
    pub bias_scale: f64,
}

impl Default for LayerTransform {
    fn default() -> Self {
        Self {
            weight: WeightTransform::Raw,
            bias_scale: 1.0,
        }
    }
}

/// Per-layer parameter transforms plus a constant output scale.
#[derive(Clone, Debug)]
pub struct ForwardPlan {
    pub layers: Vec<LayerTransform>,
    pub output_scale: f64,
}

impl ForwardPlan {
    pub fn identity(n_layers: usize) -> Self {
        Self {
            layers: vec![LayerTransform::default(); n_layers],
            output_scale: 1.0,
        }
    }
}

/// Handles into a recorded forward pass.
#[derive(Clone, Debug)]
pub struct Recorded {
    /// Q-values: `[A]` for a single observation, `[N×A]` for a batch.
    pub q: Var,
    /// Q-values always as `[N×A]`.
    pub q_batch: Var,
    /// Raw weight and bias leaves, one pair per layer.
    pub params: Vec<(Var, Var)>,
    /// Pre-activations `z_i` of every layer, batch-first.
    pub preacts: Vec<Var>,
    /// Input to the last layer, flattened to `[N×F]`.
    pub features: Var,
}

impl Recorded {
    /// Gradients of the raw parameters in [`QNetwork::params`] order.
    pub fn param_grads(&self, g: &Graph) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(self.params.len() * 2);
        for &(w, b) in &self.params {
            for v in [w, b] {
                let grad = g
                    .grad(v)
                    .ok_or_else(|| Error::InvalidArgument("parameters were recorded as constants".into()))?;
                out.push(Tensor::new(g.shape(v).to_vec(), grad.to_vec())?);
            }
        }
        Ok(out)
    }
}

fn uniform_tensor(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Builds a network for `arch`: weights uniform in `±1/√fan_in`, zero biases.
pub fn build_qnet(arch: &ArchSpec, seed: u64) -> Result<QNetwork> {
    let specs = arch.layer_specs()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(specs.len());
    for spec in &specs {
        let wshape = match spec.kind {
            LayerKind::Conv => vec![spec.out_width, spec.in_width, CONV_KERNEL, CONV_KERNEL],
            LayerKind::Linear => vec![spec.out_width, spec.in_width],
        };
        let fan_in: usize = wshape[1..].iter().product();
        let bound = 1.0 / (fan_in as f64).sqrt();
        layers.push((
            uniform_tensor(&mut rng, &wshape, bound),
            Tensor::zeros(&[spec.out_width]),
            spec.activation,
        ));
    }
    QNetwork::from_layers(arch.input_shape(), layers)
}

impl QNetwork {
    /// Assembles a network from explicit parameters. Rank-4 weights are
    /// conv kernels (`O×C×kh×kw`), rank-2 weights dense (`out×in`). A dense
    /// layer following a conv layer (or a `C×H×W` input) sees the flattened,
    /// channel-first input.
    pub fn from_layers(input_shape: Vec<usize>, params: Vec<(Tensor, Tensor, Activation)>) -> Result<Self> {
        if params.is_empty() {
            return Err(Error::InvalidArgument("network needs at least one layer".into()));
        }
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::InvalidArgument(format!("bad input shape {input_shape:?}")));
        }
        let mut layers: Vec<Layer> = Vec::with_capacity(params.len());
        let mut cur = input_shape.clone();
        let last = params.len() - 1;
        for (i, (weight, bias, activation)) in params.into_iter().enumerate() {
            let ws = weight.shape().to_vec();
            let in_shape = match ws.len() {
                4 => {
                    if cur.len() != 3 || cur[0] != ws[1] || cur[1] < ws[2] || cur[2] < ws[3] {
                        return Err(Error::dim(
                            "from_layers",
                            format!("layer {i}: conv kernel {ws:?} on input {cur:?}"),
                        ));
                    }
                    cur.clone()
                }
                2 => {
                    let flat: usize = cur.iter().product();
                    if flat != ws[1] {
                        return Err(Error::dim(
                            "from_layers",
                            format!("layer {i}: dense weight {ws:?} on {flat} inputs"),
                        ));
                    }
                    vec![flat]
                }
                _ => {
                    return Err(Error::dim("from_layers", format!("layer {i}: weight rank {}", ws.len())));
                }
            };
            if bias.shape() != [ws[0]] {
                return Err(Error::dim(
                    "from_layers",
                    format!("layer {i}: bias {:?} for {} outputs", bias.shape(), ws[0]),
                ));
            }
            if i == last && activation != Activation::None {
                return Err(Error::InvalidArgument("output layer must not have an activation".into()));
            }
            let layer = Layer {
                weight,
                bias,
                activation,
                in_shape,
            };
            cur = layer.out_shape();
            layers.push(layer);
        }
        if cur.len() != 1 {
            return Err(Error::InvalidArgument("network must end with a dense layer".into()));
        }
        Ok(Self { input_shape, layers })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn n_actions(&self) -> usize {
        self.layers[self.layers.len() - 1].weight.shape()[0]
    }

    /// Parameters in `[W_1, b_1, W_2, b_2, ...]` order.
    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    #[cfg(test)]
    pub(crate) fn layer_mut(&mut self, i: usize) -> &mut Layer {
        &mut self.layers[i]
    }

    /// Records a forward pass. `input` is one observation (shape equal to
    /// [`input_shape`](Self::input_shape)) or a batch with a leading `N`.
    /// Parameters become trainable leaves when `trainable` is set, constants
    /// otherwise.
    pub fn record(&self, g: &mut Graph, input: Var, plan: &ForwardPlan, trainable: bool) -> Result<Recorded> {
        if plan.layers.len() != self.layers.len() {
            return Err(Error::InvalidArgument(format!(
                "plan has {} layers, network {}",
                plan.layers.len(),
                self.layers.len()
            )));
        }
        let ishape = g.shape(input).to_vec();
        let single = ishape == self.input_shape;
        let batched = ishape.len() == self.input_shape.len() + 1 && ishape[1..] == self.input_shape[..];
        if !single && !batched {
            return Err(Error::dim(
                "forward",
                format!("input {ishape:?} for network expecting {:?}", self.input_shape),
            ));
        }
        let n = if single { 1 } else { ishape[0] };

        let mut params = Vec::with_capacity(self.layers.len());
        let mut preacts = Vec::with_capacity(self.layers.len());
        let mut a = input;
        if single {
            let mut s = vec![1];
            s.extend_from_slice(&ishape);
            a = g.reshape(a, &s)?;
        }
        let mut features = a;
        for (layer, tf) in self.layers.iter().zip(&plan.layers) {
            let (w_leaf, b_leaf) = if trainable {
                (g.param(layer.weight.clone()), g.param(layer.bias.clone()))
            } else {
                (g.constant(layer.weight.clone()), g.constant(layer.bias.clone()))
            };
            params.push((w_leaf, b_leaf));
            let w = match &tf.weight {
                WeightTransform::Raw => w_leaf,
                WeightTransform::Divide { denom, radius_grad } => {
                    g.spectral_divide(w_leaf, *denom, radius_grad.clone())?
                }
            };
            let b = if tf.bias_scale == 1.0 {
                b_leaf
            } else {
                g.scale(b_leaf, tf.bias_scale)?
            };
            let z = match layer.kind() {
                LayerKind::Conv => {
                    let y = g.conv2d(a, w)?;
                    g.add_channel_bias(y, b)?
                }
                LayerKind::Linear => {
                    if g.shape(a).len() != 2 {
                        a = g.reshape(a, &[n, layer.in_shape[0]])?;
                    }
                    features = a;
                    let y = g.matmul_nt(a, w)?;
                    g.add_row_bias(y, b)?
                }
            };
            preacts.push(z);
            a = match layer.activation {
                Activation::Relu => g.relu(z)?,
                Activation::None => z,
            };
        }
        if plan.output_scale != 1.0 {
            a = g.scale(a, plan.output_scale)?;
        }
        let q_batch = a;
        let q = if single {
            g.reshape(a, &[self.n_actions()])?
        } else {
            a
        };
        Ok(Recorded {
            q,
            q_batch,
            params,
            preacts,
            features,
        })
    }

    /// Evaluates the network under `plan` without keeping the graph.
    pub fn evaluate(&self, obs: &Tensor, plan: &ForwardPlan) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(obs.clone());
        let rec = self.record(&mut g, x, plan, false)?;
        Ok(g.value(rec.q).clone())
    }
}

/// Plain forward pass.
pub fn forward(net: &QNetwork, obs: &Tensor) -> Result<Tensor> {
    net.evaluate(obs, &ForwardPlan::identity(net.n_layers()))
}

/// Forward pass with the output multiplied by `1 / rho_prod` (divOut). The
/// factor is a constant of the graph.
pub fn forward_scaled(net: &QNetwork, obs: &Tensor, rho_prod: f64) -> Result<Tensor> {
    net.evaluate(obs, &output_scaled_plan(net.n_layers(), rho_prod)?)
}

pub fn output_scaled_plan(n_layers: usize, rho_prod: f64) -> Result<ForwardPlan> {
    if !(rho_prod > 0.0) || !rho_prod.is_finite() {
        return Err(Error::InvalidArgument(format!("rho_prod must be positive, got {rho_prod}")));
    }
    let mut plan = ForwardPlan::identity(n_layers);
    plan.output_scale = 1.0 / rho_prod;
    Ok(plan)
}

/// Index of the largest value, ties to the lowest index.
pub fn argmax(q: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in q.iter().enumerate() {
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}
