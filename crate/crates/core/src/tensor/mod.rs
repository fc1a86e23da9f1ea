//! Dense 64-bit tensors, the layer kernels the networks are built from, and
//! a tape for reverse-mode differentiation.

pub mod checkpoint;
mod gemm;
pub mod ops;
pub mod tape;

use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};

pub use ops::{bilinear_sample, conv2d, instance_norm};
pub use tape::{Tape, Var};

/// Row-major dense array of `f64` with an optional gradient buffer.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {:?} needs {} values, got {}", shape, n, data.len()),
            ));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f64) -> Self {
        let mut t = Self::zeros(shape);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = f(i);
        }
        t
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, lo: f64, hi: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| rng.gen_range(lo..hi))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a scalar (or single-element) tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape, shape),
            ));
        }
        self.shape = shape;
        self.grad = None;
        Ok(self)
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if !on {
            self.grad = None;
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub(crate) fn accumulate_grad(&mut self, g: &[f64]) {
        debug_assert_eq!(g.len(), self.data.len());
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(b, v)| *b += v),
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on different shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Element at a multi-index.
    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        let mut o = 0;
        for (i, (&ix, &ext)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < ext, "index {ix} out of range for axis {i} of extent {ext}");
            o = o * ext + ix;
        }
        o
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &preview)
            .field("requires_grad", &self.requires_grad)
            .field("has_grad", &self.grad.is_some())
            .finish()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv2d,
    InstanceNorm,
    GroupConv,
}

/// Weights and bias of one learnable layer.
///
/// For `InstanceNorm` the "weights" are the per-channel scale and the bias is
/// the per-channel shift.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub kind: LayerKind,
    pub weights: Tensor,
    pub bias: Tensor,
}

impl LayerParams {
    pub fn conv2d(weights: Tensor, bias: Tensor) -> Result<Self> {
        Self::check_conv("conv2d", &weights, &bias)?;
        Ok(LayerParams {
            kind: LayerKind::Conv2d,
            weights,
            bias,
        })
    }

    /// Group convolution weights: `(out, in, 3, 3)` indexed by the
    /// neighbourhood stencil.
    pub fn group_conv(weights: Tensor, bias: Tensor) -> Result<Self> {
        Self::check_conv("group_conv", &weights, &bias)?;
        if weights.shape()[2] != 3 || weights.shape()[3] != 3 {
            return Err(Error::shape(
                "group_conv",
                format!("stencil must be 3x3, got {:?}", weights.shape()),
            ));
        }
        Ok(LayerParams {
            kind: LayerKind::GroupConv,
            weights,
            bias,
        })
    }

    /// Scale 1 and shift 0 for every channel.
    pub fn instance_norm(channels: usize) -> Self {
        LayerParams {
            kind: LayerKind::InstanceNorm,
            weights: Tensor::full([channels], 1.0),
            bias: Tensor::zeros([channels]),
        }
    }

    /// Kaiming-uniform weights (gain sqrt(2)) and zero bias.
    pub fn kaiming<R: Rng + ?Sized>(kind: LayerKind, out_ch: usize, in_ch: usize, k: usize, rng: &mut R) -> Self {
        let fan_in = (in_ch * k * k) as f64;
        let bound = (6.0 / fan_in).sqrt();
        LayerParams {
            kind,
            weights: Tensor::uniform([out_ch, in_ch, k, k], -bound, bound, rng),
            bias: Tensor::zeros([out_ch]),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.bias.len()
    }

    pub fn in_channels(&self) -> usize {
        match self.kind {
            LayerKind::InstanceNorm => self.bias.len(),
            _ => self.weights.shape()[1],
        }
    }

    fn check_conv(op: &'static str, w: &Tensor, b: &Tensor) -> Result<()> {
        if w.ndim() != 4 {
            return Err(Error::shape(op, format!("weights must be rank 4, got {:?}", w.shape())));
        }
        if b.shape() != [w.shape()[0]] {
            return Err(Error::shape(
                op,
                format!("bias shape {:?} does not match {} output channels", b.shape(), w.shape()[0]),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_wrong_length() {
        assert!(Tensor::new([2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::new([2, 3], (0..6).map(f64::from).collect()).unwrap();
        assert_eq!(t.at(&[1, 2]), 5.0);
    }

    #[test]
    fn grad_accumulates() {
        let mut t = Tensor::zeros([2]).with_grad();
        t.accumulate_grad(&[1.0, 2.0]);
        t.accumulate_grad(&[1.0, 2.0]);
        assert_eq!(t.grad().unwrap(), &[2.0, 4.0]);
        t.zero_grad();
        assert!(t.grad().is_none());
    }

    #[test]
    fn conv_params_checked() {
        assert!(LayerParams::conv2d(Tensor::zeros([4, 3, 3, 3]), Tensor::zeros([3])).is_err());
        assert!(LayerParams::group_conv(Tensor::zeros([4, 3, 5, 5]), Tensor::zeros([4])).is_err());
        let norm = LayerParams::instance_norm(3);
        assert_eq!(norm.weights.data(), &[1.0, 1.0, 1.0]);
        assert_eq!(norm.bias.data(), &[0.0, 0.0, 0.0]);
    }
}
