//! Dense 64-bit tensors.
//!
//! Row-major storage, rank 1 or 2 in practice. `Tensor` is a plain value:
//! graph building and gradient flow live in [`crate::graph`]; a tensor only
//! carries an accumulation buffer (`grad`) so parameters can gather gradients
//! across the per-item graphs of a minibatch.

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    /// Present iff `requires_grad`, same length as `data`.
    grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Build from explicit shape and data. The element count must match the
    /// shape product; a zero-sized tensor is rejected.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || numel == 0 {
            return Err(Error::Shape(format!("degenerate shape {shape:?}")));
        }
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} implies {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        assert!(numel > 0, "zeros with degenerate shape {shape:?}");
        Tensor { shape, data: vec![0.0; numel], requires_grad: false, grad: None }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v], requires_grad: false, grad: None }
    }

    /// Matrix filled from `rng` with uniform values in [-limit, limit],
    /// row-major draw order.
    pub fn uniform(rows: usize, cols: usize, limit: f64, rng: &mut Rng) -> Self {
        let data = (0..rows * cols).map(|_| rng.uniform(-limit, limit)).collect();
        Tensor { shape: vec![rows, cols], data, requires_grad: false, grad: None }
    }

    /// Matrix filled from `rng` with N(0, sigma^2) values, row-major order.
    pub fn normal(rows: usize, cols: usize, sigma: f64, rng: &mut Rng) -> Self {
        let data = (0..rows * cols).map(|_| sigma * rng.normal()).collect();
        Tensor { shape: vec![rows, cols], data, requires_grad: false, grad: None }
    }

    /// Mark as trainable. Allocates the gradient buffer.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self.grad = Some(vec![0.0; self.data.len()]);
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Rows of a rank-2 tensor; a rank-1 tensor is treated as a single row.
    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Columns of a rank-2 tensor, or the length of a rank-1 tensor.
    pub fn cols(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[1]
        } else {
            self.numel()
        }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Add `delta` into the gradient buffer.
    ///
    /// Panics if the tensor does not require grad or the length differs; both
    /// indicate a bug in the caller, not a data-dependent condition.
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        let g = self
            .grad
            .as_mut()
            .expect("accumulate_grad on a tensor without requires_grad");
        assert_eq!(g.len(), delta.len(), "gradient length mismatch");
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.fill(0.0);
        }
    }

    /// Same data, new shape. The element count must be preserved.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} ({} elements) to {shape:?}",
                self.shape,
                self.data.len()
            )));
        }
        let mut t = Tensor::from_vec(shape, self.data.clone())?;
        if self.requires_grad {
            t = t.with_grad();
        }
        Ok(t)
    }

    /// Euclidean norm of the flattened data.
    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// Cosine similarity between two equal-length vectors.
///
/// Errors if either vector has zero norm: similarity is undefined there and
/// silently returning 0 would corrupt retrieval rankings.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "cosine of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Numeric("cosine similarity of a zero vector".into()));
    }
    Ok(dot / (na.sqrt() * nb.sqrt()))
}
