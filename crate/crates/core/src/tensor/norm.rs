use super::{Backward, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

struct InstanceNormBackward<T: Scalar> {
    input: Tensor<T>,
    inv_std: Vec<T>,
}

impl<T: Scalar> Backward<T> for InstanceNormBackward<T> {
    fn inputs(&self) -> Vec<&Tensor<T>> {
        vec![&self.input]
    }

    fn backward(&self, out: &Tensor<T>, grad: &[T]) {
        let hw = self.input.shape().hw();
        let count = T::from_usize(hw).unwrap();
        let y = out.data();
        self.input.accumulate_with(|g| {
            for (plane, &inv) in self.inv_std.iter().enumerate() {
                let r = plane * hw..(plane + 1) * hw;
                let (gy, yy) = (&grad[r.clone()], &y[r.clone()]);
                let mean_g = gy.iter().copied().sum::<T>() / count;
                let mean_gy = gy.iter().zip(yy).map(|(&a, &b)| a * b).sum::<T>() / count;
                for ((gx, &d), &yv) in g[r].iter_mut().zip(gy).zip(yy) {
                    *gx = *gx + inv * (d - mean_g - yv * mean_gy);
                }
            }
        });
    }
}

/// Per-(sample, channel) normalisation to zero mean and unit (biased)
/// variance, without affine parameters.
pub fn instance_norm<T: Scalar>(x: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    let s = x.shape();
    let hw = s.hw();
    if hw < 2 {
        return Err(Error::shape("instance_norm", format!("needs at least 2 spatial elements, got {s}")));
    }
    let count = T::from_usize(hw).unwrap();
    let mut out = Vec::with_capacity(s.numel());
    let mut inv_std = Vec::with_capacity(s.n() * s.c());
    {
        let d = x.data();
        for p in d.chunks(hw) {
            let rough = p.iter().copied().sum::<T>() / count;
            // Corrected two-pass mean: exact for constant planes.
            let mean = rough + p.iter().map(|&v| v - rough).sum::<T>() / count;
            let var = p.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / count;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            out.extend(p.iter().map(|&v| (v - mean) * inv));
        }
    }
    Tensor::from_op("instance_norm", s, out, InstanceNormBackward { input: x.clone(), inv_std })
}
