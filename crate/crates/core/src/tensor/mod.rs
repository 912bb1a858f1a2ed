//! Dense 4-D `f32` tensors, the raw compute kernels behind every block, a
//! 2-D real Fourier transform, and the reverse-mode tape that differentiates
//! all of it.

pub mod fft;
pub mod kernels;
pub mod param;
pub mod tape;

use crate::error::{Error, Result};

pub use kernels::{ConvMode, ScanDir};

/// Logical layout of a tensor: (batch, channel, height, width), row-major
/// with `w` fastest.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Flat offset of element (n, c, h, w).
    #[inline]
    pub const fn at(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }

    /// Elements in one (n, c) plane.
    pub const fn plane(&self) -> usize {
        self.h * self.w
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{},{},{})", self.n, self.c, self.h, self.w)
    }
}

/// Dense 4-D tensor of 32-bit reals.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.numel()],
        }
    }

    pub fn full(shape: Shape, value: f32) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    /// Wraps a flat row-major buffer. The length must match the shape.
    pub fn from_vec(shape: Shape, data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::contract(format!(
                "tensor data length {} does not match shape {} ({} elements)",
                data.len(),
                shape,
                shape.numel()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// A (1,1,1,1) scalar tensor.
    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: Shape::new(1, 1, 1, 1),
            data: vec![value],
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, h: usize, w: usize) -> f32 {
        self.data[self.shape.at(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: f32) {
        let i = self.shape.at(n, c, h, w);
        self.data[i] = v;
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> Result<f32> {
        if self.numel() != 1 {
            return Err(Error::contract(format!(
                "item() on non-scalar tensor of shape {}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshaped(mut self, shape: Shape) -> Result<Self> {
        if shape.numel() != self.data.len() {
            return Err(Error::contract(format!(
                "reshape {} -> {} changes element count",
                self.shape, shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub fn fill(&mut self, value: f32) {
        self.data.iter_mut().for_each(|v| *v = value);
    }
}

fn check_same_shape(context: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            context,
            lhs: a.shape().to_string(),
            rhs: b.shape().to_string(),
        });
    }
    Ok(())
}

/// Elementwise sum of two equally shaped tensors.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same_shape("add", a, b)?;
    Ok(Tensor {
        shape: a.shape,
        data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
    })
}

/// Elementwise product of two equally shaped tensors.
pub fn multiply(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same_shape("multiply", a, b)?;
    Ok(Tensor {
        shape: a.shape,
        data: a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect(),
    })
}

pub fn relu(x: &Tensor) -> Tensor {
    map(x, |v| v.max(0.0))
}

/// Leaky ReLU; the negative slope is 0.2 everywhere in this crate.
pub fn leaky_relu(x: &Tensor, slope: f32) -> Tensor {
    map(x, |v| if v > 0.0 { v } else { slope * v })
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    map(x, sigmoid_scalar)
}

pub fn scale(x: &Tensor, factor: f32) -> Tensor {
    map(x, |v| v * factor)
}

/// Sliding-window convolution; forward only. The differentiable form lives
/// on the tape ([`tape::Tape::conv2d`]).
pub fn conv2d(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    mode: ConvMode,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let d = kernels::conv_dims(input.shape(), kernel.shape(), mode, stride, padding)?;
    if let Some(b) = bias {
        if b.numel() != d.co {
            return Err(Error::ShapeMismatch {
                context: "conv2d bias",
                lhs: b.shape().to_string(),
                rhs: format!("({} outputs)", d.co),
            });
        }
    }
    Ok(kernels::conv2d_fwd(input, kernel, bias, &d))
}

/// Softmax along the final axis, max-shifted for stability.
pub fn softmax_last(x: &Tensor) -> Tensor {
    kernels::softmax_last(x)
}

/// Per-pixel channel normalization with learnable gain and shift.
pub fn layer_norm_channels(x: &Tensor, gain: &Tensor, shift: &Tensor, eps: f32) -> Result<Tensor> {
    if gain.numel() != x.shape().c || shift.numel() != x.shape().c {
        return Err(Error::contract(format!(
            "layer_norm_channels needs one gain/shift per channel ({}), got {}/{}",
            x.shape().c,
            gain.numel(),
            shift.numel()
        )));
    }
    Ok(kernels::layer_norm_fwd(x, gain, shift, eps))
}

pub(crate) fn map(x: &Tensor, f: impl Fn(f32) -> f32) -> Tensor {
    Tensor {
        shape: x.shape,
        data: x.data.iter().map(|&v| f(v)).collect(),
    }
}

/// Numerically stable logistic function.
#[inline]
pub(crate) fn sigmoid_scalar(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_bad_length() {
        let err = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![0.0; 3]).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn indexing_is_row_major() {
        let t = Tensor::from_vec(
            Shape::new(1, 2, 2, 2),
            vec![0., 1., 2., 3., 4., 5., 6., 7.],
        )
        .unwrap();
        assert_eq!(t.get(0, 0, 0, 1), 1.0);
        assert_eq!(t.get(0, 0, 1, 0), 2.0);
        assert_eq!(t.get(0, 1, 0, 0), 4.0);
        assert_eq!(t.get(0, 1, 1, 1), 7.0);
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let t = sigmoid(&Tensor::scalar(0.0));
        assert_eq!(t.item().unwrap(), 0.5);
    }

    #[test]
    fn relu_pair_is_abs() {
        let x = Tensor::from_vec(Shape::new(1, 1, 1, 4), vec![-2.0, -0.5, 0.0, 3.0]).unwrap();
        let neg = scale(&x, -1.0);
        let s = add(&relu(&x), &relu(&neg)).unwrap();
        for (got, want) in s.data().iter().zip(x.data().iter().map(|v| v.abs())) {
            assert_eq!(*got, want);
        }
    }

    #[test]
    fn add_matches_flat_loop() {
        let a = Tensor::from_vec(Shape::new(1, 2, 1, 3), vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::from_vec(Shape::new(1, 2, 1, 3), vec![6., 5., 4., 3., 2., 1.]).unwrap();
        let s = add(&a, &b).unwrap();
        for i in 0..6 {
            assert_eq!(s.data()[i], a.data()[i] + b.data()[i]);
        }
        let err = add(&a, &Tensor::zeros(Shape::new(1, 2, 3, 1))).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }
}
