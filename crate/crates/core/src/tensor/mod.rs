//! Dense row-major `f64` tensors and a define-by-run reverse-mode graph.
//!
//! [`Tensor`] is a plain value type. All differentiable computation happens
//! on a [`Graph`], which records primitive operations as they are executed
//! and replays them backwards once to accumulate gradients into the leaves
//! that were registered as trainable.

pub mod graph;
pub mod kernels;

pub use graph::{Graph, Var};

use crate::error::{Error, Result};

/// Dense n-dimensional array with an optional gradient slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Builds a tensor, checking the shape and that every element is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::dim("tensor", format!("zero extent in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {shape:?} needs {n} elements, got {}", data.len()),
            ));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { op: "tensor" });
        }
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    /// Internal constructor for kernel outputs whose shape is known to be right.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data,
            grad: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![0.0; n])
    }

    pub fn scalar(x: f64) -> Result<Self> {
        Self::new(vec![1], vec![x])
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    /// Row-major matrix from nested rows.
    pub fn matrix(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::dim("tensor", "ragged matrix rows"));
        }
        Self::new(vec![m, n], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self::from_parts(vec![n, n], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub(crate) fn set_grad(&mut self, grad: Vec<f64>) {
        debug_assert_eq!(grad.len(), self.data.len());
        self.grad = Some(grad);
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::NonScalarLoss(self.shape.clone()));
        }
        Ok(self.data[0])
    }

    /// Same data viewed with another shape of equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.numel() || shape.contains(&0) {
            return Err(Error::dim(
                "reshape",
                format!("{:?} -> {:?}", self.shape, shape),
            ));
        }
        Ok(Self::from_parts(shape.to_vec(), self.data.clone()))
    }

    /// In-place update of the payload. Fails, leaving the tensor untouched,
    /// if the closure would produce a non-finite element.
    pub fn update<F>(&mut self, mut f: F) -> Result<()>
    where
        F: FnMut(usize, f64) -> f64,
    {
        let next: Vec<f64> = self
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| f(i, x))
            .collect();
        if next.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { op: "update" });
        }
        self.data = next;
        Ok(())
    }

    /// Tensor scaled by a constant.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(self.shape.clone(), self.data.iter().map(|x| x * c).collect())
    }

    pub fn frobenius_norm(&self) -> f64 {
        kernels::norm2(&self.data)
    }

    pub(crate) fn into_data(self) -> Vec<f64> {
        self.data
    }
}

/// Central finite-difference gradient of a scalar function.
///
/// Each coordinate is perturbed by `±h` in turn; `f` sees the perturbed copy.
pub fn finite_diff<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("finite_diff step must be > 0, got {h}")));
    }
    let mut probe = x.clone();
    probe.grad = None;
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data[i];
        probe.data[i] = orig + h;
        let fp = f(&probe);
        probe.data[i] = orig - h;
        let fm = f(&probe);
        probe.data[i] = orig;
        out.push((fp - fm) / (2.0 * h));
    }
    Tensor::new(x.shape.clone(), out)
}
