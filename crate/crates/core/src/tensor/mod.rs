//! Dense fp64 tensors and a minimal reverse-mode autodiff tape.
//!
//! Everything numeric in this crate — network forwards, losses, the
//! sanitizer — is expressed through [`Tensor`] values and the [`Graph`]
//! tape. Buffers are flat row-major `f64`; no views, no strides beyond
//! transpose-on-copy inside the matmul kernels.

mod adam;
mod graph;

pub use adam::{adam_step, cosine_lr, AdamState};
pub use graph::{Graph, NodeId, LOG_CLAMP};

use crate::error::{Error, Result};

/// Dense n-dimensional array with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    /// Builds a tensor from a flat row-major buffer.
    pub fn from_vec(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Shape(format!("dimensions must be positive, got {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} implies {numel} values, got {}",
                values.len()
            )));
        }
        Ok(Self { shape, values, grad: None, requires_grad: false })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        Self::from_vec(shape, vec![0.0; numel])
    }

    /// A single-element tensor of shape `[1]`.
    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![1], values: vec![v], grad: None, requires_grad: false }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.values.len() == 1
    }

    /// The single value of a scalar tensor.
    pub fn item(&self) -> Result<f64> {
        if !self.is_scalar() {
            return Err(Error::Shape(format!("expected scalar, shape is {:?}", self.shape)));
        }
        Ok(self.values[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if on && self.grad.is_none() {
            self.grad = Some(vec![0.0; self.values.len()]);
        }
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Adds `delta` into the gradient buffer, allocating it if absent.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.values.len() {
            return Err(Error::Shape(format!(
                "gradient length {} does not match {} values",
                delta.len(),
                self.values.len()
            )));
        }
        let grad = self.grad.get_or_insert_with(|| vec![0.0; delta.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Errors if any entry is NaN or infinite.
    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        if self.values.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }

    /// FNV-1a hash over the exact bit patterns of the value buffer; used to
    /// assert that frozen parameters stay bit-identical.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in &self.values {
            for byte in v.to_bits().to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }
}

/// Temperature softmax of a logit slice: `exp(z_c/tau) / sum exp(z_c'/tau)`,
/// computed with max-subtraction.
pub fn softmax_tau(logits: &[f64], tau: f64) -> Result<Vec<f64>> {
    if tau <= 0.0 {
        return Err(Error::Value(format!("temperature must be positive, got {tau}")));
    }
    if logits.is_empty() {
        return Err(Error::Value("softmax of empty logit vector".into()));
    }
    if !logits.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("softmax input".into()));
    }
    Ok(softmax_tau_unchecked(logits, tau))
}

pub(crate) fn softmax_tau_unchecked(logits: &[f64], tau: f64) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|z| ((z - max) / tau).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    out
}
