//! Helpers and independent oracles shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use snrl::metrics::svd_singular_values;
use snrl::nn::{Activation, ForwardPlan, Layer, LayerKind};
use snrl::rl::LossKind;
use snrl::{Graph, QNetwork, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// Explicit `(O·H'·W') × (C·H·W)` matrix of a valid 3×3 stride-1 convolution,
/// built from the sliding-window definition.
pub fn conv_matrix(kernel: &Tensor, in_shape: &[usize]) -> Tensor {
    let ks = kernel.shape();
    let (o, c, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
    let (h, w) = (in_shape[1], in_shape[2]);
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let k = kernel.data();
    let cols = c * h * w;
    let mut m = vec![0.0; o * oh * ow * cols];
    for oc in 0..o {
        for y in 0..oh {
            for x in 0..ow {
                let row = (oc * oh + y) * ow + x;
                for ic in 0..c {
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let col = (ic * h + y + dy) * w + x + dx;
                            m[row * cols + col] += k[((oc * c + ic) * kh + dy) * kw + dx];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![o * oh * ow, cols], m).unwrap()
}

/// The linear operator of a layer as an explicit matrix.
pub fn operator_matrix(layer: &Layer) -> Tensor {
    match layer.kind() {
        LayerKind::Linear => layer.weight.clone(),
        LayerKind::Conv => conv_matrix(&layer.weight, layer.in_shape()),
    }
}

pub fn sigma_max(m: &Tensor) -> f64 {
    svd_singular_values(m).unwrap()[0]
}

pub fn layer_sigma(layer: &Layer) -> f64 {
    sigma_max(&operator_matrix(layer))
}

/// Random network with nonzero biases. `n_conv` 3×3 conv layers precede
/// `n_dense` dense layers; the last layer is linear.
pub fn random_net(rng: &mut ChaCha8Rng, n_conv: usize, n_dense: usize, in_shape: [usize; 3]) -> QNetwork {
    assert!(n_dense >= 1);
    let mut params = Vec::new();
    let [mut c, mut h, mut w] = in_shape;
    for _ in 0..n_conv {
        let o = rng.random_range(1..=3);
        let k = uniform(rng, &[o, c, 3, 3], 0.6);
        params.push((k, uniform(rng, &[o], 0.3), Activation::Relu));
        c = o;
        h -= 2;
        w -= 2;
    }
    let mut width = c * h * w;
    for i in 0..n_dense {
        let out = if i + 1 == n_dense { rng.random_range(2..=4) } else { rng.random_range(3..=7) };
        let scale = 1.5 / (width as f64).sqrt();
        let act = if i + 1 == n_dense { Activation::None } else { Activation::Relu };
        params.push((uniform(rng, &[out, width], scale), uniform(rng, &[out], 0.3), act));
        width = out;
    }
    QNetwork::from_layers(in_shape.to_vec(), params).unwrap()
}

/// Loss of `net` under `plan` on a batch, with gradients of every raw
/// parameter in `params()` order.
pub fn loss_and_grads(
    net: &QNetwork,
    plan: &ForwardPlan,
    x: &Tensor,
    target: &Tensor,
    loss: LossKind,
) -> (f64, Vec<Tensor>) {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let rec = net.record(&mut g, xv, plan, true).unwrap();
    let t = g.constant(target.clone());
    let l = match loss {
        LossKind::Mse => g.mse_loss(rec.q_batch, t).unwrap(),
        LossKind::Huber => g.huber_loss(rec.q_batch, t).unwrap(),
    };
    g.backward(l).unwrap();
    (g.value(l).item().unwrap(), rec.param_grads(&g).unwrap())
}

/// Loss of `net` under `plan`, no gradients.
pub fn loss_value(net: &QNetwork, plan: &ForwardPlan, x: &Tensor, target: &Tensor, loss: LossKind) -> f64 {
    let q = net.evaluate(x, plan).unwrap();
    let (p, t) = (q.data(), target.data());
    let n = p.len() as f64;
    p.iter()
        .zip(t)
        .map(|(a, b)| {
            let r = a - b;
            match loss {
                LossKind::Mse => r * r,
                LossKind::Huber if r.abs() <= 1.0 => 0.5 * r * r,
                LossKind::Huber => r.abs() - 0.5,
            }
        })
        .sum::<f64>()
        / n
}

/// Central differences of `f` with respect to every entry of `x`.
pub fn central_diff(x: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let mut d = x.data().to_vec();
        d[i] = x.data()[i] + h;
        let up = f(&Tensor::new(x.shape().to_vec(), d.clone()).unwrap());
        d[i] = x.data()[i] - h;
        let down = f(&Tensor::new(x.shape().to_vec(), d).unwrap());
        out.push((up - down) / (2.0 * h));
    }
    out
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, floor)`.
pub fn rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(floor)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Copy of `net` with one parameter (index into `params()`) replaced.
pub fn with_param(net: &QNetwork, idx: usize, value: Tensor) -> QNetwork {
    let mut n = net.clone();
    *n.params_mut()[idx] = value;
    n
}

/// Distance of the forward pass from the nearest non-differentiable point:
/// the smallest |z| over ReLU pre-activations and, for Huber, the smallest
/// ||r| − 1| over residuals.
pub fn kink_margin(net: &QNetwork, plan: &ForwardPlan, x: &Tensor, target: &Tensor, loss: LossKind) -> f64 {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let rec = net.record(&mut g, xv, plan, false).unwrap();
    let mut margin = f64::INFINITY;
    for (z, layer) in rec.preacts.iter().zip(net.layers()) {
        if layer.activation == Activation::Relu {
            margin = g.value(*z).data().iter().fold(margin, |m, v| m.min(v.abs()));
        }
    }
    if loss == LossKind::Huber {
        for (p, t) in g.value(rec.q_batch).data().iter().zip(target.data()) {
            margin = margin.min(((p - t).abs() - 1.0).abs());
        }
    }
    margin
}
