use super::{Backward, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

struct AvgPoolBackward<T: Scalar> {
    input: Tensor<T>,
}

impl<T: Scalar> Backward<T> for AvgPoolBackward<T> {
    fn inputs(&self) -> Vec<&Tensor<T>> {
        vec![&self.input]
    }

    fn backward(&self, out: &Tensor<T>, grad: &[T]) {
        let s = self.input.shape();
        let (ho, wo) = (out.shape().h(), out.shape().w());
        let quarter = T::of(0.25);
        self.input.accumulate_with(|g| {
            for plane in 0..s.n() * s.c() {
                let gi = &mut g[plane * s.hw()..(plane + 1) * s.hw()];
                let go = &grad[plane * ho * wo..(plane + 1) * ho * wo];
                for oy in 0..ho {
                    for ox in 0..wo {
                        let d = go[oy * wo + ox] * quarter;
                        for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            let idx = (2 * oy + dy) * s.w() + 2 * ox + dx;
                            gi[idx] = gi[idx] + d;
                        }
                    }
                }
            }
        });
    }
}

/// 2x2 average pooling with stride 2.
pub fn avg_pool2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.h() % 2 != 0 || s.w() % 2 != 0 || s.h() == 0 || s.w() == 0 {
        return Err(Error::shape("avg_pool2", format!("spatial size of {s} must be even and non-zero")));
    }
    let (ho, wo) = (s.h() / 2, s.w() / 2);
    let out_shape = s.with_hw(ho, wo);
    let quarter = T::of(0.25);
    let mut out = Vec::with_capacity(out_shape.numel());
    {
        let d = x.data();
        for plane in 0..s.n() * s.c() {
            let p = &d[plane * s.hw()..(plane + 1) * s.hw()];
            for oy in 0..ho {
                let r0 = &p[2 * oy * s.w()..(2 * oy + 1) * s.w()];
                let r1 = &p[(2 * oy + 1) * s.w()..(2 * oy + 2) * s.w()];
                for ox in 0..wo {
                    out.push((r0[2 * ox] + r0[2 * ox + 1] + r1[2 * ox] + r1[2 * ox + 1]) * quarter);
                }
            }
        }
    }
    Tensor::from_op("avg_pool2", out_shape, out, AvgPoolBackward { input: x.clone() })
}
