//! Dense row-major tensors.
//!
//! Shapes follow `[batch, height, width, channels]` ordering for image-like
//! data. Training runs at `f32`; the whole stack can be instantiated at `f64`
//! for finite-difference verification.

use crate::error::{Error, Result};

/// Element type for the numeric stack. Implemented for `f32` and `f64`.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssign
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense tensor: shape plus a flat row-major data buffer.
///
/// A scalar is represented with an empty shape (`numel == 1`). The
/// `requires_grad` flag controls whether a tape treats the tensor as a
/// trainable leaf when it is recorded.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F: Scalar> {
    shape: Vec<usize>,
    data: Vec<F>,
    requires_grad: bool,
}

impl<F: Scalar> Tensor<F> {
    /// Builds a tensor, checking that `data` matches `shape` and is finite.
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "tensor.new",
                detail: format!("shape {shape:?} needs {numel} elements, got {}", data.len()),
            });
        }
        let t = Tensor { shape, data, requires_grad: false };
        t.check_finite("tensor.new")?;
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![F::zero(); numel], requires_grad: false }
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; numel], requires_grad: false }
    }

    pub fn scalar(value: F) -> Self {
        Tensor { shape: vec![], data: vec![value], requires_grad: false }
    }

    /// 1-D tensor from a slice.
    pub fn from_slice(values: &[F]) -> Self {
        Tensor { shape: vec![values.len()], data: values.to_vec(), requires_grad: false }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Marks the tensor as a trainable leaf for tape recording.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn detached(mut self) -> Self {
        self.requires_grad = false;
        self
    }

    /// Extracts the value of a single-element tensor.
    pub fn item(&self) -> F {
        assert_eq!(self.numel(), 1, "item() on tensor with {} elements", self.numel());
        self.data[0]
    }

    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    /// Largest element; rejects empty tensors.
    pub fn max_value(&self) -> Result<F> {
        self.data
            .iter()
            .copied()
            .fold(None, |acc: Option<F>, v| Some(acc.map_or(v, |a| if v > a { v } else { a })))
            .ok_or(Error::Empty { what: "max" })
    }

    /// Smallest element; rejects empty tensors.
    pub fn min_value(&self) -> Result<F> {
        self.data
            .iter()
            .copied()
            .fold(None, |acc: Option<F>, v| Some(acc.map_or(v, |a| if v < a { v } else { a })))
            .ok_or(Error::Empty { what: "min" })
    }

    /// Elementwise `self + other`; shapes must match exactly.
    pub fn add(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                op: "tensor.add",
                detail: format!("{:?} vs {:?}", self.shape, other.shape),
            });
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| *a + *b).collect();
        Tensor::new(self.shape.clone(), data)
    }

    pub fn scale(&self, k: F) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| *v * k).collect(),
            requires_grad: false,
        }
    }

    /// Reinterprets the buffer under a new shape with equal element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor<F>> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::Shape {
                op: "tensor.reshape",
                detail: format!("{:?} -> {:?}", self.shape, shape),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
            requires_grad: self.requires_grad,
        })
    }

    /// Copies rows `rows` of the leading axis into a new tensor.
    pub fn gather_rows(&self, rows: &[usize]) -> Result<Tensor<F>> {
        if self.shape.is_empty() {
            return Err(Error::Shape { op: "tensor.gather_rows", detail: "rank-0 tensor".into() });
        }
        let row_len: usize = self.shape[1..].iter().product();
        let n = self.shape[0];
        let mut data = Vec::with_capacity(rows.len() * row_len);
        for &r in rows {
            if r >= n {
                return Err(Error::IndexOutOfRange { index: r, len: n });
            }
            data.extend_from_slice(&self.data[r * row_len..(r + 1) * row_len]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Ok(Tensor { shape, data, requires_grad: false })
    }

    /// Copies row `i` of the leading axis, dropping that axis.
    pub fn row(&self, i: usize) -> Result<Tensor<F>> {
        let picked = self.gather_rows(&[i])?;
        let shape = self.shape[1..].to_vec();
        picked.reshaped(&shape)
    }

    /// Stacks same-shaped tensors along a new leading axis.
    pub fn stack(parts: &[&Tensor<F>]) -> Result<Tensor<F>> {
        let first = parts.first().ok_or(Error::Empty { what: "tensor.stack" })?;
        let mut data = Vec::with_capacity(parts.len() * first.numel());
        for p in parts {
            if p.shape() != first.shape() {
                return Err(Error::Shape {
                    op: "tensor.stack",
                    detail: format!("{:?} vs {:?}", p.shape(), first.shape()),
                });
            }
            data.extend_from_slice(p.data());
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(first.shape());
        Tensor::new(shape, data)
    }

    /// Converts the element type (used by the f64 verification mode).
    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::from_f64(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
        }
    }
}
