//! Raw slice kernels shared by the graph, power iteration and the tests.
//!
//! Everything is row-major. Convolutions are valid (no padding), stride 1,
//! cross-correlation, over a batch laid out as `N×C×H×W`.

/// `c[m×n] = a[m×k] · b[k×n]`
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for t in 0..k {
            let av = a[i * k + t];
            if av == 0.0 {
                continue;
            }
            let brow = &b[t * n..(t + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `c[m×n] = a[m×k] · b[n×k]ᵀ`
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] = dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
    c
}

/// `c[k×n] = a[m×k]ᵀ · b[m×n]`
pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for t in 0..k {
            let av = a[i * k + t];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[t * n..(t + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `y[m] = W[m×n] · x[n]`
pub fn matvec(w: &[f64], x: &[f64], m: usize, n: usize) -> Vec<f64> {
    (0..m).map(|i| dot(&w[i * n..(i + 1) * n], x)).collect()
}

/// `y[n] = W[m×n]ᵀ · x[m]`
pub fn matvec_t(w: &[f64], x: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut y = vec![0.0; n];
    for i in 0..m {
        let xi = x[i];
        for (yj, wij) in y.iter_mut().zip(&w[i * n..(i + 1) * n]) {
            *yj += xi * wij;
        }
    }
    y
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Geometry of a valid, stride-1 convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.height + 1 - self.kh
    }

    pub fn out_w(&self) -> usize {
        self.width + 1 - self.kw
    }

    pub fn input_len(&self) -> usize {
        self.batch * self.in_channels * self.height * self.width
    }

    pub fn output_len(&self) -> usize {
        self.batch * self.out_channels * self.out_h() * self.out_w()
    }

    pub fn kernel_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kh * self.kw
    }
}

pub fn conv2d(x: &[f64], k: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut y = vec![0.0; g.output_len()];
    for n in 0..g.batch {
        for o in 0..g.out_channels {
            let ybase = (n * g.out_channels + o) * oh * ow;
            for c in 0..g.in_channels {
                let xbase = (n * g.in_channels + c) * g.height * g.width;
                for ki in 0..g.kh {
                    for kj in 0..g.kw {
                        let kv = k[((o * g.in_channels + c) * g.kh + ki) * g.kw + kj];
                        if kv == 0.0 {
                            continue;
                        }
                        for i in 0..oh {
                            let xrow = &x[xbase + (i + ki) * g.width + kj..][..ow];
                            let yrow = &mut y[ybase + i * ow..][..ow];
                            for (yv, xv) in yrow.iter_mut().zip(xrow) {
                                *yv += kv * xv;
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

/// Gradient w.r.t. the input: the transposed convolution of `dy`.
pub fn conv2d_backward_input(dy: &[f64], k: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut dx = vec![0.0; g.input_len()];
    for n in 0..g.batch {
        for o in 0..g.out_channels {
            let ybase = (n * g.out_channels + o) * oh * ow;
            for c in 0..g.in_channels {
                let xbase = (n * g.in_channels + c) * g.height * g.width;
                for ki in 0..g.kh {
                    for kj in 0..g.kw {
                        let kv = k[((o * g.in_channels + c) * g.kh + ki) * g.kw + kj];
                        if kv == 0.0 {
                            continue;
                        }
                        for i in 0..oh {
                            let dyrow = &dy[ybase + i * ow..][..ow];
                            let dxrow = &mut dx[xbase + (i + ki) * g.width + kj..][..ow];
                            for (dxv, dyv) in dxrow.iter_mut().zip(dyrow) {
                                *dxv += kv * dyv;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Gradient w.r.t. the kernel: correlation of the input with `dy`.
pub fn conv2d_backward_kernel(x: &[f64], dy: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut dk = vec![0.0; g.kernel_len()];
    for n in 0..g.batch {
        for o in 0..g.out_channels {
            let ybase = (n * g.out_channels + o) * oh * ow;
            for c in 0..g.in_channels {
                let xbase = (n * g.in_channels + c) * g.height * g.width;
                for ki in 0..g.kh {
                    for kj in 0..g.kw {
                        let mut acc = 0.0;
                        for i in 0..oh {
                            let xrow = &x[xbase + (i + ki) * g.width + kj..][..ow];
                            let dyrow = &dy[ybase + i * ow..][..ow];
                            acc += dot(xrow, dyrow);
                        }
                        dk[((o * g.in_channels + c) * g.kh + ki) * g.kw + kj] += acc;
                    }
                }
            }
        }
    }
    dk
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn naive_conv(x: &[f64], k: &[f64], g: &ConvGeom) -> Vec<f64> {
        let (oh, ow) = (g.out_h(), g.out_w());
        let mut y = vec![0.0; g.output_len()];
        for n in 0..g.batch {
            for o in 0..g.out_channels {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut s = 0.0;
                        for c in 0..g.in_channels {
                            for a in 0..g.kh {
                                for b in 0..g.kw {
                                    s += x[((n * g.in_channels + c) * g.height + i + a) * g.width
                                        + j
                                        + b]
                                        * k[((o * g.in_channels + c) * g.kh + a) * g.kw + b];
                                }
                            }
                        }
                        y[((n * g.out_channels + o) * oh + i) * ow + j] = s;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn matmul_variants_agree() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let (m, k, n) = (4, 5, 3);
        let a: Vec<f64> = (0..m * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let c = matmul(&a, &b, m, k, n);
        let mut bt = vec![0.0; n * k];
        for t in 0..k {
            for j in 0..n {
                bt[j * k + t] = b[t * n + j];
            }
        }
        let c2 = matmul_nt(&a, &bt, m, k, n);
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for t in 0..k {
                at[t * m + i] = a[i * k + t];
            }
        }
        let c3 = matmul_tn(&at, &b, k, m, n);
        for ((x, y), z) in c.iter().zip(&c2).zip(&c3) {
            assert!((x - y).abs() < 1e-14 && (x - z).abs() < 1e-14);
        }
    }

    #[test]
    fn conv_matches_sliding_window() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let g = ConvGeom {
            batch: 2,
            in_channels: 3,
            height: 6,
            width: 5,
            out_channels: 2,
            kh: 3,
            kw: 3,
        };
        let x: Vec<f64> = (0..g.input_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let k: Vec<f64> = (0..g.kernel_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = conv2d(&x, &k, &g);
        let yn = naive_conv(&x, &k, &g);
        for (a, b) in y.iter().zip(&yn) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_adjoint_identity() {
        // <conv(x), y> == <x, convᵀ(y)> and == <k, dK(x, y)>
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let g = ConvGeom {
            batch: 1,
            in_channels: 2,
            height: 5,
            width: 7,
            out_channels: 3,
            kh: 3,
            kw: 3,
        };
        let x: Vec<f64> = (0..g.input_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let k: Vec<f64> = (0..g.kernel_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..g.output_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let lhs = dot(&conv2d(&x, &k, &g), &y);
        let rhs = dot(&x, &conv2d_backward_input(&y, &k, &g));
        let rhs2 = dot(&k, &conv2d_backward_kernel(&x, &y, &g));
        assert!((lhs - rhs).abs() < 1e-12);
        assert!((lhs - rhs2).abs() < 1e-12);
    }
}
