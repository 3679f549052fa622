use super::ParamBuilder;
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Square-kernel convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv2d<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> Conv2d<T> {
    /// "Same" convolution (stride 1, padding k/2) with Kaiming init.
    pub fn new(b: &mut ParamBuilder<T>, name: &str, c_in: usize, c_out: usize, k: usize) -> Result<Self> {
        Self::with_stride(b, name, c_in, c_out, k, 1)
    }

    pub fn with_stride(b: &mut ParamBuilder<T>, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize) -> Result<Self> {
        let weight = b.kaiming(&format!("{name}.weight"), Shape::new(c_out, c_in, k, k), c_in * k * k)?;
        let bias = b.zeros(&format!("{name}.bias"), Shape::new(1, c_out, 1, 1))?;
        Ok(Self { weight, bias, stride, padding: k / 2 })
    }

    /// Same geometry, all weights zero.
    pub fn zeroed(b: &mut ParamBuilder<T>, name: &str, c_in: usize, c_out: usize, k: usize) -> Result<Self> {
        let weight = b.zeros(&format!("{name}.weight"), Shape::new(c_out, c_in, k, k))?;
        let bias = b.zeros(&format!("{name}.bias"), Shape::new(1, c_out, 1, 1))?;
        Ok(Self { weight, bias, stride: 1, padding: k / 2 })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.conv2d(&self.weight, &self.bias, self.stride, self.padding)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape().0[0]
    }
}

/// `3x3 conv -> IN -> ReLU -> AvgPool2`.
#[derive(Clone, Debug)]
pub struct DownBlock<T: Scalar> {
    pub conv: Conv2d<T>,
}

impl<T: Scalar> DownBlock<T> {
    pub fn new(b: &mut ParamBuilder<T>, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Self { conv: Conv2d::new(b, &format!("{name}.conv"), c_in, c_out, 3)? })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.conv.forward(x)?.instance_norm()?.relu()?.avg_pool2()
    }
}

/// `x2 bilinear upsample -> 3x3 conv`.
#[derive(Clone, Debug)]
pub struct UpBlock<T: Scalar> {
    pub conv: Conv2d<T>,
}

impl<T: Scalar> UpBlock<T> {
    pub fn new(b: &mut ParamBuilder<T>, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Self { conv: Conv2d::new(b, &format!("{name}.conv"), c_in, c_out, 3)? })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let s = x.shape();
        self.conv.forward(&x.resize(2 * s.h(), 2 * s.w())?)
    }
}
