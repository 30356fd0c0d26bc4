use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    /// `a[m×k] · b[n×k]ᵀ`, the shape of a dense layer applied to a batch.
    MatMulNt { a: Var, b: Var, m: usize, k: usize, n: usize },
    AddRowBias { x: Var, b: Var, cols: usize },
    Conv2d { x: Var, k: Var, geom: ConvGeom },
    AddChannelBias { x: Var, b: Var, channels: usize, plane: usize },
    Relu { x: Var },
    Reshape { x: Var },
    Scale { x: Var, c: f64 },
    Add { a: Var, b: Var },
    Sum { x: Var },
    SelectPerRow { x: Var, cols: usize, idx: Vec<usize> },
    Huber { pred: Var, target: Var },
    Mse { pred: Var, target: Var },
    /// `w / denom`. When `radius_grad` is set the denominator is a function
    /// of `w` and the backward pass adds the rank-one correction
    /// `-⟨G, w⟩ / denom² · ddenom_drho · ∂ρ/∂w`.
    SpectralDivide { w: Var, denom: f64, radius_grad: Option<RadiusGrad> },
}

/// Derivative of the projection denominator with respect to the weights.
#[derive(Clone, Debug)]
pub struct RadiusGrad {
    /// `∂ρ/∂W`, same layout as the weight.
    pub drho_dw: Vec<f64>,
    /// `∂denom/∂ρ`: 1 for `W/ρ`, `1/λ` for `W/(ρ/λ)`.
    pub ddenom_drho: f64,
}

struct Node {
    value: Tensor,
    op: Op,
    trainable: bool,
    needs_grad: bool,
}

/// Define-by-run tape of primitive operations.
///
/// Nodes are appended in execution order, so the tape is always in
/// topological order and a single reverse sweep suffices.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient on backward.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    fn leaf(&mut self, mut t: Tensor, trainable: bool) -> Var {
        t.clear_grad();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            trainable,
            needs_grad: trainable,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated into a trainable leaf by the last backward.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    /// Clears all leaf gradients so that backward may run again.
    pub fn reset(&mut self) {
        for n in &mut self.nodes {
            n.value.clear_grad();
        }
        self.backward_done = false;
    }

    fn push(&mut self, op: &'static str, shape: Vec<usize>, data: Vec<f64>, kind: Op) -> Result<Var> {
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { op });
        }
        let needs_grad = self.inputs(&kind).iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value: Tensor::from_parts(shape, data),
            op: kind,
            trainable: false,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } | Op::MatMulNt { a, b, .. } | Op::Add { a, b } => vec![*a, *b],
            Op::AddRowBias { x, b, .. } | Op::AddChannelBias { x, b, .. } => vec![*x, *b],
            Op::Conv2d { x, k, .. } => vec![*x, *k],
            Op::Relu { x }
            | Op::Reshape { x }
            | Op::Scale { x, .. }
            | Op::Sum { x }
            | Op::SelectPerRow { x, .. } => vec![*x],
            // targets are constants by contract
            Op::Huber { pred, .. } | Op::Mse { pred, .. } => vec![*pred],
            Op::SpectralDivide { w, .. } => vec![*w],
        }
    }

    /// `A[m×k] · B[k×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let c = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push("matmul", vec![m, n], c, Op::MatMul { a, b, m, k, n })
    }

    /// `x[N×k] · W[n×k]ᵀ`, i.e. a dense layer without bias.
    pub fn matmul_nt(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(Error::dim("matmul_nt", format!("{sx:?} x {sw:?}ᵀ")));
        }
        let (m, k, n) = (sx[0], sx[1], sw[0]);
        let c = kernels::matmul_nt(self.value(x).data(), self.value(w).data(), m, k, n);
        self.push("matmul_nt", vec![m, n], c, Op::MatMulNt { a: x, b: w, m, k, n })
    }

    /// Adds `b[F]` to every row of `x[N×F]`.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(b).to_vec());
        if sx.len() != 2 || sb != [sx[1]] {
            return Err(Error::dim("add_row_bias", format!("{sx:?} + {sb:?}")));
        }
        let cols = sx[1];
        let bd = self.value(b).data();
        let out: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bd[i % cols])
            .collect();
        self.push("add_row_bias", sx, out, Op::AddRowBias { x, b, cols })
    }

    /// Valid stride-1 cross-correlation. `x` is `C×H×W` or `N×C×H×W`,
    /// `k` is `O×C×kh×kw`. The output keeps the rank of the input.
    pub fn conv2d(&mut self, x: Var, k: Var) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        let (batch, rest) = match sx.len() {
            3 => (1, &sx[..]),
            4 => (sx[0], &sx[1..]),
            _ => return Err(Error::dim("conv2d", format!("input rank {}", sx.len()))),
        };
        if sk.len() != 4 || sk[1] != rest[0] {
            return Err(Error::dim("conv2d", format!("input {sx:?} kernel {sk:?}")));
        }
        if rest[1] < sk[2] || rest[2] < sk[3] {
            return Err(Error::dim(
                "conv2d",
                format!("input {sx:?} smaller than kernel {sk:?}"),
            ));
        }
        let geom = ConvGeom {
            batch,
            in_channels: rest[0],
            height: rest[1],
            width: rest[2],
            out_channels: sk[0],
            kh: sk[2],
            kw: sk[3],
        };
        let y = kernels::conv2d(self.value(x).data(), self.value(k).data(), &geom);
        let mut shape = vec![geom.out_channels, geom.out_h(), geom.out_w()];
        if sx.len() == 4 {
            shape.insert(0, batch);
        }
        self.push("conv2d", shape, y, Op::Conv2d { x, k, geom })
    }

    /// Adds `b[C]` to every channel plane of a `C×H×W` or `N×C×H×W` tensor.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(b).to_vec());
        let cdim = match sx.len() {
            3 => 0,
            4 => 1,
            _ => return Err(Error::dim("add_channel_bias", format!("rank {}", sx.len()))),
        };
        let channels = sx[cdim];
        if sb != [channels] {
            return Err(Error::dim("add_channel_bias", format!("{sx:?} + {sb:?}")));
        }
        let plane: usize = sx[cdim + 1..].iter().product();
        let bd = self.value(b).data();
        let out: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bd[(i / plane) % channels])
            .collect();
        self.push(
            "add_channel_bias",
            sx,
            out,
            Op::AddChannelBias { x, b, channels, plane },
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out: Vec<f64> = self.value(x).data().iter().map(|&v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        self.push("relu", shape, out, Op::Relu { x })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        self.push("reshape", shape.to_vec(), t.into_data(), Op::Reshape { x })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out: Vec<f64> = self.value(x).data().iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.push("scale", shape, out, Op::Scale { x, c })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                "add",
                format!("{:?} + {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push("add", shape, out, Op::Add { a, b })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", vec![1], vec![s], Op::Sum { x })
    }

    /// From `x[N×A]` picks `x[n, idx[n]]` for every row, giving `[N]`.
    pub fn select_per_row(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 || sx[0] != idx.len() || idx.iter().any(|&i| i >= sx[1]) {
            return Err(Error::dim(
                "select_per_row",
                format!("{sx:?} with {} indices", idx.len()),
            ));
        }
        let cols = sx[1];
        let d = self.value(x).data();
        let out: Vec<f64> = idx.iter().enumerate().map(|(n, &a)| d[n * cols + a]).collect();
        self.push(
            "select_per_row",
            vec![idx.len()],
            out,
            Op::SelectPerRow { x, cols, idx: idx.to_vec() },
        )
    }

    fn check_pair(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    /// Mean smooth-L1 loss with unit threshold. No gradient reaches `target`.
    pub fn huber_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.check_pair("huber_loss", pred, target)?;
        let (p, t) = (self.value(pred).data(), self.value(target).data());
        let n = p.len() as f64;
        let s: f64 = p
            .iter()
            .zip(t)
            .map(|(p, t)| {
                let r = p - t;
                if r.abs() <= 1.0 {
                    0.5 * r * r
                } else {
                    r.abs() - 0.5
                }
            })
            .sum();
        self.push("huber_loss", vec![1], vec![s / n], Op::Huber { pred, target })
    }

    /// Mean squared residual. No gradient reaches `target`.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.check_pair("mse_loss", pred, target)?;
        let (p, t) = (self.value(pred).data(), self.value(target).data());
        let n = p.len() as f64;
        let s: f64 = p.iter().zip(t).map(|(p, t)| (p - t) * (p - t)).sum();
        self.push("mse_loss", vec![1], vec![s / n], Op::Mse { pred, target })
    }

    /// `w / denom` with an optional gradient path through the denominator.
    pub fn spectral_divide(&mut self, w: Var, denom: f64, radius_grad: Option<RadiusGrad>) -> Result<Var> {
        if !(denom > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "projection denominator must be positive, got {denom}"
            )));
        }
        if let Some(rg) = &radius_grad {
            if rg.drho_dw.len() != self.value(w).numel() {
                return Err(Error::dim("spectral_divide", "radius gradient length"));
            }
        }
        let out: Vec<f64> = self.value(w).data().iter().map(|v| v / denom).collect();
        let shape = self.shape(w).to_vec();
        self.push(
            "spectral_divide",
            shape,
            out,
            Op::SpectralDivide { w, denom, radius_grad },
        )
    }

    /// Reverse sweep from a scalar node, filling the gradient of every
    /// trainable leaf. Leaves unreachable from `loss` get a zero gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(gy) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[id] = Some(gy);
                continue;
            }
            for (input, g) in self.local_grads(id, &gy) {
                if !self.nodes[input.0].needs_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }

        for (id, g) in grads.into_iter().enumerate() {
            if self.nodes[id].trainable {
                let n = self.nodes[id].value.numel();
                let g = g.unwrap_or_else(|| vec![0.0; n]);
                self.nodes[id].value.set_grad(g);
            }
        }
        for node in self.nodes.iter_mut().skip(loss.0 + 1) {
            if node.trainable {
                let n = node.value.numel();
                node.value.set_grad(vec![0.0; n]);
            }
        }
        self.backward_done = true;
        Ok(())
    }

    /// Vector-Jacobian products of node `id` for each of its inputs.
    fn local_grads(&self, id: usize, gy: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let val = |v: Var| self.nodes[v.0].value.data();
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        let mut out = Vec::with_capacity(2);
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                if needs(*a) {
                    // dA = dC · Bᵀ
                    out.push((*a, kernels::matmul_nt(gy, val(*b), *m, *n, *k)));
                }
                if needs(*b) {
                    // dB = Aᵀ · dC
                    out.push((*b, kernels::matmul_tn(val(*a), gy, *m, *k, *n)));
                }
            }
            Op::MatMulNt { a, b, m, k, n } => {
                if needs(*a) {
                    out.push((*a, kernels::matmul(gy, val(*b), *m, *n, *k)));
                }
                if needs(*b) {
                    out.push((*b, kernels::matmul_tn(gy, val(*a), *m, *n, *k)));
                }
            }
            Op::AddRowBias { x, b, cols } => {
                if needs(*b) {
                    let mut gb = vec![0.0; *cols];
                    for (i, g) in gy.iter().enumerate() {
                        gb[i % cols] += g;
                    }
                    out.push((*b, gb));
                }
                out.push((*x, gy.to_vec()));
            }
            Op::Conv2d { x, k, geom } => {
                if needs(*x) {
                    out.push((*x, kernels::conv2d_backward_input(gy, val(*k), geom)));
                }
                if needs(*k) {
                    out.push((*k, kernels::conv2d_backward_kernel(val(*x), gy, geom)));
                }
            }
            Op::AddChannelBias { x, b, channels, plane } => {
                if needs(*b) {
                    let mut gb = vec![0.0; *channels];
                    for (i, g) in gy.iter().enumerate() {
                        gb[(i / plane) % channels] += g;
                    }
                    out.push((*b, gb));
                }
                out.push((*x, gy.to_vec()));
            }
            Op::Relu { x } => {
                let g = val(*x)
                    .iter()
                    .zip(gy)
                    .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                out.push((*x, g));
            }
            Op::Reshape { x } => out.push((*x, gy.to_vec())),
            Op::Scale { x, c } => out.push((*x, gy.iter().map(|g| g * c).collect())),
            Op::Add { a, b } => {
                out.push((*a, gy.to_vec()));
                out.push((*b, gy.to_vec()));
            }
            Op::Sum { x } => out.push((*x, vec![gy[0]; val(*x).len()])),
            Op::SelectPerRow { x, cols, idx } => {
                let mut g = vec![0.0; val(*x).len()];
                for (n, &a) in idx.iter().enumerate() {
                    g[n * cols + a] = gy[n];
                }
                out.push((*x, g));
            }
            Op::Huber { pred, target } => {
                let (p, t) = (val(*pred), val(*target));
                let scale = gy[0] / p.len() as f64;
                let g = p
                    .iter()
                    .zip(t)
                    .map(|(p, t)| {
                        let r = p - t;
                        scale * if r.abs() <= 1.0 { r } else { r.signum() }
                    })
                    .collect();
                out.push((*pred, g));
            }
            Op::Mse { pred, target } => {
                let (p, t) = (val(*pred), val(*target));
                let scale = 2.0 * gy[0] / p.len() as f64;
                let g = p.iter().zip(t).map(|(p, t)| scale * (p - t)).collect();
                out.push((*pred, g));
            }
            Op::SpectralDivide { w, denom, radius_grad } => {
                let mut g: Vec<f64> = gy.iter().map(|v| v / denom).collect();
                if let Some(rg) = radius_grad {
                    let coef = rank_one_coefficient(gy, val(*w), *denom, rg.ddenom_drho);
                    g.iter_mut()
                        .zip(&rg.drho_dw)
                        .for_each(|(gv, d)| *gv -= coef * d);
                }
                out.push((*w, g));
            }
        }
        out
    }
}

/// Scalar multiplying `∂ρ/∂W` in the backprop-through-the-norm correction:
/// `⟨G, W⟩ · ddenom_drho / denom²`, with `G` the gradient w.r.t. the
/// normalised weight.
pub fn rank_one_coefficient(grad_normalised: &[f64], w: &[f64], denom: f64, ddenom_drho: f64) -> f64 {
    kernels::dot(grad_normalised, w) * ddenom_drho / (denom * denom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let b = g.constant(Tensor::matrix(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);

        let i = g.constant(Tensor::identity(2));
        let ib = g.matmul(i, b).unwrap();
        assert_eq!(g.value(ib).data(), g.value(b).data());

        let z = g.constant(Tensor::zeros(&[2, 2]));
        let az = g.matmul(a, z).unwrap();
        assert!(g.value(az).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.matmul(a, b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn conv_zero_kernel_and_single_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let x = g.constant(rand_tensor(&mut rng, &[1, 3, 3]));
        let zero = g.constant(Tensor::zeros(&[2, 1, 3, 3]));
        let y = g.conv2d(x, zero).unwrap();
        assert_eq!(g.shape(y), &[2, 1, 1]);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));

        let k = g.constant(g.value(x).reshape(&[1, 1, 3, 3]).unwrap());
        let y = g.conv2d(x, k).unwrap();
        let expect: f64 = g.value(x).data().iter().map(|v| v * v).sum();
        assert!((g.value(y).data()[0] - expect).abs() < 1e-14);
    }

    #[test]
    fn conv_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xt = rand_tensor(&mut rng, &[1, 5, 5]);
        let kt = rand_tensor(&mut rng, &[1, 1, 3, 3]);
        let mut g = Graph::new();
        let x = g.constant(xt.clone());
        let k = g.constant(kt.clone());
        let y = g.conv2d(x, k).unwrap();
        let (xd, kd) = (xt.data(), kt.data());
        for i in 0..3 {
            for j in 0..3 {
                let mut s = 0.0;
                for a in 0..3 {
                    for b in 0..3 {
                        s += xd[(i + a) * 5 + j + b] * kd[a * 3 + b];
                    }
                }
                assert!((g.value(y).data()[i * 3 + j] - s).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn conv_too_small_input() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 5]));
        let k = g.constant(Tensor::zeros(&[1, 1, 3, 3]));
        assert!(g.conv2d(x, k).is_err());
    }

    #[test]
    fn relu_forward_and_backward() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![-1.0, 0.0, 2.0]).unwrap());
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0, 1.0]);

        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![-1.0, -3.0]).unwrap());
        let y = g.relu(x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn huber_branches() {
        for (r, loss, grad) in [(0.5, 0.125, 0.5), (2.0, 1.5, 1.0), (0.0, 0.0, 0.0), (-3.0, 2.5, -1.0)] {
            let mut g = Graph::new();
            let p = g.param(Tensor::scalar(r).unwrap());
            let t = g.constant(Tensor::scalar(0.0).unwrap());
            let l = g.huber_loss(p, t).unwrap();
            assert_eq!(g.value(l).item().unwrap(), loss);
            g.backward(l).unwrap();
            assert_eq!(g.grad(p).unwrap()[0], grad);
            assert!(g.grad(t).is_none());
        }
    }

    #[test]
    fn mse_examples() {
        let mut g = Graph::new();
        let p = g.param(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let l = g.mse_loss(p, p).unwrap();
        assert_eq!(g.value(l).item().unwrap(), 0.0);

        let mut g = Graph::new();
        let p = g.param(Tensor::vector(vec![1.0, -1.0]).unwrap());
        let t = g.constant(Tensor::vector(vec![0.0, 0.0]).unwrap());
        let l = g.mse_loss(p, t).unwrap();
        assert_eq!(g.value(l).item().unwrap(), 1.0);

        let mut g = Graph::new();
        let p = g.param(Tensor::vector(vec![3.0]).unwrap());
        let t = g.constant(Tensor::vector(vec![0.0]).unwrap());
        let l = g.mse_loss(p, t).unwrap();
        assert_eq!(g.value(l).item().unwrap(), 9.0);
        g.backward(l).unwrap();
        assert_eq!(g.grad(p).unwrap(), &[6.0]);

        let mut g = Graph::new();
        let p = g.param(Tensor::vector(vec![3.0]).unwrap());
        let t = g.constant(Tensor::vector(vec![0.0, 1.0]).unwrap());
        assert!(g.mse_loss(p, t).is_err());
        assert!(g.huber_loss(p, t).is_err());
    }

    #[test]
    fn backward_linear_case_and_constant() {
        let mut g = Graph::new();
        let w = g.param(Tensor::matrix(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap());
        let x = g.constant(Tensor::matrix(&[vec![0.5], vec![-1.0], vec![2.0]]).unwrap());
        let unused = g.param(Tensor::vector(vec![1.0, 1.0]).unwrap());
        let y = g.matmul(w, x).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
        assert_eq!(g.grad(unused).unwrap(), &[0.0, 0.0]);
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]).unwrap());
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::BackwardTwice)));
        g.reset();
        assert!(g.grad(x).is_none());
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn nonfinite_surfaces_as_error() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1e300, 1e300]).unwrap());
        assert!(matches!(g.scale(x, 1e10), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn linearity_of_backward() {
        // backward(αf + βg) == α·backward(f) + β·backward(g)
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let wt = rand_tensor(&mut rng, &[3, 4]);
        let xt = rand_tensor(&mut rng, &[2, 4]);
        let tt = rand_tensor(&mut rng, &[2, 3]);
        let (alpha, beta) = (0.7, -1.3);

        let run = |a: f64, b: f64| {
            let mut g = Graph::new();
            let w = g.param(wt.clone());
            let x = g.constant(xt.clone());
            let t = g.constant(tt.clone());
            let y = g.matmul_nt(x, w).unwrap();
            let r = g.relu(y).unwrap();
            let f = g.mse_loss(r, t).unwrap();
            let h = g.huber_loss(y, t).unwrap();
            let fa = g.scale(f, a).unwrap();
            let hb = g.scale(h, b).unwrap();
            let l = g.add(fa, hb).unwrap();
            g.backward(l).unwrap();
            g.grad(w).unwrap().to_vec()
        };
        let both = run(alpha, beta);
        let f = run(1.0, 0.0);
        let h = run(0.0, 1.0);
        for i in 0..both.len() {
            assert!((both[i] - (alpha * f[i] + beta * h[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn spectral_divide_gradient_matches_finite_difference() {
        // denominator = ⟨d, w⟩ (linear in w), so its gradient is d exactly.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let wt = rand_tensor(&mut rng, &[2, 3]);
        let d = rand_tensor(&mut rng, &[2, 3]);
        let x = rand_tensor(&mut rng, &[3, 1]);
        let shift = 5.0;
        let loss_of = |w: &Tensor| {
            let denom = kernels::dot(d.data(), w.data()) + shift;
            let y = kernels::matmul(w.data(), x.data(), 2, 3, 1);
            y.iter().map(|v| (v / denom).powi(2)).sum::<f64>()
        };
        let mut g = Graph::new();
        let w = g.param(wt.clone());
        let denom = kernels::dot(d.data(), wt.data()) + shift;
        let wn = g
            .spectral_divide(w, denom, Some(RadiusGrad { drho_dw: d.data().to_vec(), ddenom_drho: 1.0 }))
            .unwrap();
        let xv = g.constant(x.clone());
        let y = g.matmul(wn, xv).unwrap();
        let zeros = g.constant(Tensor::zeros(&[2, 1]));
        let l = g.mse_loss(y, zeros).unwrap();
        let l = g.scale(l, 2.0).unwrap();
        g.backward(l).unwrap();
        let fd = finite_diff(loss_of, &wt, 1e-6).unwrap();
        for (a, b) in g.grad(w).unwrap().iter().zip(fd.data()) {
            assert!((a - b).abs() < 1e-8 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }
}
