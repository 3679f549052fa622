use super::{Backward, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Source taps for one output coordinate under the half-pixel
/// (align-corners = false) convention.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap<T> {
    pub i0: usize,
    pub i1: usize,
    pub frac: T,
}

pub(crate) fn taps<T: Scalar>(in_size: usize, out_size: usize) -> Vec<Tap<T>> {
    let scale = T::from_usize(in_size).unwrap() / T::from_usize(out_size).unwrap();
    let half = T::of(0.5);
    (0..out_size)
        .map(|o| {
            let src = ((T::from_usize(o).unwrap() + half) * scale - half).max(T::zero());
            let i0 = src.floor().to_usize().unwrap().min(in_size - 1);
            let i1 = (i0 + 1).min(in_size - 1);
            Tap { i0, i1, frac: src - T::from_usize(i0).unwrap() }
        })
        .collect()
}

struct ResizeBackward<T: Scalar> {
    input: Tensor<T>,
    ty: Vec<Tap<T>>,
    tx: Vec<Tap<T>>,
}

impl<T: Scalar> Backward<T> for ResizeBackward<T> {
    fn inputs(&self) -> Vec<&Tensor<T>> {
        vec![&self.input]
    }

    fn backward(&self, _out: &Tensor<T>, grad: &[T]) {
        let s = self.input.shape();
        let (ho, wo) = (self.ty.len(), self.tx.len());
        self.input.accumulate_with(|g| {
            for plane in 0..s.n() * s.c() {
                let gi = &mut g[plane * s.hw()..(plane + 1) * s.hw()];
                let go = &grad[plane * ho * wo..(plane + 1) * ho * wo];
                for (oy, ty) in self.ty.iter().enumerate() {
                    let (wy0, wy1) = (T::one() - ty.frac, ty.frac);
                    for (ox, tx) in self.tx.iter().enumerate() {
                        let d = go[oy * wo + ox];
                        let (wx0, wx1) = (T::one() - tx.frac, tx.frac);
                        let w = s.w();
                        gi[ty.i0 * w + tx.i0] = gi[ty.i0 * w + tx.i0] + d * wy0 * wx0;
                        gi[ty.i0 * w + tx.i1] = gi[ty.i0 * w + tx.i1] + d * wy0 * wx1;
                        gi[ty.i1 * w + tx.i0] = gi[ty.i1 * w + tx.i0] + d * wy1 * wx0;
                        gi[ty.i1 * w + tx.i1] = gi[ty.i1 * w + tx.i1] + d * wy1 * wx1;
                    }
                }
            }
        });
    }
}

/// Bilinear resize with half-pixel centres (align-corners = false).
pub fn bilinear_resize<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument(format!("resize target {out_h}x{out_w} must be positive")));
    }
    let s = x.shape();
    if s.h() == 0 || s.w() == 0 {
        return Err(Error::shape("bilinear_resize", format!("empty input {s}")));
    }
    let ty = taps::<T>(s.h(), out_h);
    let tx = taps::<T>(s.w(), out_w);
    let out_shape = s.with_hw(out_h, out_w);
    let mut out = Vec::with_capacity(out_shape.numel());
    {
        let d = x.data();
        for plane in 0..s.n() * s.c() {
            let p = &d[plane * s.hw()..(plane + 1) * s.hw()];
            for t_y in &ty {
                let r0 = &p[t_y.i0 * s.w()..(t_y.i0 + 1) * s.w()];
                let r1 = &p[t_y.i1 * s.w()..(t_y.i1 + 1) * s.w()];
                for t_x in &tx {
                    let top = r0[t_x.i0] + (r0[t_x.i1] - r0[t_x.i0]) * t_x.frac;
                    let bot = r1[t_x.i0] + (r1[t_x.i1] - r1[t_x.i0]) * t_x.frac;
                    out.push(top + (bot - top) * t_y.frac);
                }
            }
        }
    }
    Tensor::from_op("bilinear_resize", out_shape, out, ResizeBackward { input: x.clone(), ty, tx })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn same_size_is_identity() {
        let data: Vec<f32> = (0..24).map(|v| (v as f32).sqrt()).collect();
        let x = Tensor::from_vec(Shape::new(1, 2, 3, 4), data.clone()).unwrap();
        assert_eq!(bilinear_resize(&x, 3, 4).unwrap().to_vec(), data);
    }

    #[test]
    fn constant_stays_constant() {
        let x = Tensor::<f64>::full(Shape::new(1, 1, 4, 6), 0.3);
        for (h, w) in [(8, 12), (2, 3), (5, 7), (1, 1)] {
            let y = bilinear_resize(&x, h, w).unwrap();
            assert!(y.data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
        }
    }

    #[test]
    fn zero_target_is_an_error() {
        assert!(bilinear_resize(&Tensor::<f32>::zeros(Shape::new(1, 1, 2, 2)), 0, 2).is_err());
    }
}
