//! Dense row-major `f32` tensors and the kernel types built on them.

use std::fmt;

use crate::error::{Error, Result};

/// Dense N-dimensional array of `f32`, row-major.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?} ", self.shape)?;
        if self.data.len() <= SHOWN {
            write!(f, "{:?}", self.data)
        } else {
            write!(f, "{:?}..", &self.data[..SHOWN])
        }
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Builds a tensor from external data, rejecting zero extents, a length
    /// mismatch and non-finite values.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape(format!("zero extent in shape {shape:?}")));
        }
        if numel(&shape) != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {} values, got {}",
                numel(&shape),
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("element {i} is {}", data[i])));
        }
        Ok(Tensor { shape, data })
    }

    /// Internal constructor for values produced by our own kernels.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let data = (0..numel(shape)).map(&mut f).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Mutable access to the values. The shape stays fixed.
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f32> {
        match self.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::shape(format!(
                "item() on tensor with shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.data.len() || shape.contains(&0) {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_with(&self, other: &Tensor, op: &str, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "{op}: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, s: f32) -> Tensor {
        self.map(|v| v * s)
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "add_assign: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_all_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bitwise equality, so `-0.0 != 0.0` and identical NaN payloads match.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "max_abs_diff: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a as f64 - b as f64).abs())
            .fold(0.0, f64::max))
    }
}

/// `‖a − b‖_F / max(‖a‖_F, ‖b‖_F)`, or the absolute error when both are zero.
pub fn relative_error(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "relative_error: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let diff = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt();
    let scale = a.frobenius_norm().max(b.frobenius_norm());
    Ok(if scale == 0.0 { diff } else { diff / scale })
}

/// Dense convolution kernel laid out `(h, w, C, T)` with optional bias `(T)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvKernel {
    weights: Tensor,
    bias: Option<Tensor>,
}

impl ConvKernel {
    pub fn new(weights: Tensor, bias: Option<Tensor>) -> Result<Self> {
        if weights.rank() != 4 {
            return Err(Error::shape(format!(
                "conv kernel must be (h, w, C, T), got {:?}",
                weights.shape()
            )));
        }
        let t = weights.shape()[3];
        if let Some(b) = &bias {
            if b.shape() != [t] {
                return Err(Error::shape(format!(
                    "conv bias must be ({t}), got {:?}",
                    b.shape()
                )));
            }
        }
        Ok(ConvKernel { weights, bias })
    }

    pub fn zeros(h: usize, w: usize, c: usize, t: usize, bias: bool) -> Self {
        ConvKernel {
            weights: Tensor::zeros(&[h, w, c, t]),
            bias: bias.then(|| Tensor::zeros(&[t])),
        }
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Tensor {
        &mut self.weights
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn bias_mut(&mut self) -> Option<&mut Tensor> {
        self.bias.as_mut()
    }

    pub fn h(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn w(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[2]
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[3]
    }
}

/// One `(h, w)` spatial filter per channel, laid out `(h, w, G)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthwiseKernel {
    weights: Tensor,
}

impl DepthwiseKernel {
    pub fn new(weights: Tensor) -> Result<Self> {
        if weights.rank() != 3 {
            return Err(Error::shape(format!(
                "depthwise kernel must be (h, w, G), got {:?}",
                weights.shape()
            )));
        }
        Ok(DepthwiseKernel { weights })
    }

    pub fn zeros(h: usize, w: usize, channels: usize) -> Self {
        DepthwiseKernel {
            weights: Tensor::zeros(&[h, w, channels]),
        }
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Tensor {
        &mut self.weights
    }

    pub fn h(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn w(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.weights.shape()[2]
    }
}

/// Channel-mixing `1×1` kernel laid out `(C, T)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PointwiseKernel {
    weights: Tensor,
}

impl PointwiseKernel {
    pub fn new(weights: Tensor) -> Result<Self> {
        if weights.rank() != 2 {
            return Err(Error::shape(format!(
                "pointwise kernel must be (C, T), got {:?}",
                weights.shape()
            )));
        }
        Ok(PointwiseKernel { weights })
    }

    pub fn zeros(c: usize, t: usize) -> Self {
        PointwiseKernel {
            weights: Tensor::zeros(&[c, t]),
        }
    }

    pub fn identity(c: usize) -> Self {
        PointwiseKernel {
            weights: Tensor::from_fn(&[c, c], |i| if i / c == i % c { 1.0 } else { 0.0 }),
        }
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Tensor {
        &mut self.weights
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[1]
    }
}
