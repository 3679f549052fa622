use super::{Backward, Shape, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Clamped sampling position along one axis plus d(position)/d(flow).
#[derive(Clone, Copy)]
struct Coord<T> {
    i0: usize,
    i1: usize,
    frac: T,
    dpos: T,
}

fn coord<T: Scalar>(out_idx: usize, out_size: usize, in_size: usize, flow: T) -> Coord<T> {
    let two = T::of(2.0);
    let n_in = T::from_usize(in_size).unwrap();
    // Input-pixel position of the output pixel centre: ((2o+1)·in − out) / 2out.
    // The numerator is an exact integer, so equal sizes map o to exactly o.
    let num = (2 * out_idx + 1) * in_size;
    let base = (T::from_usize(num).unwrap() - T::from_usize(out_size).unwrap()) / T::from_usize(2 * out_size).unwrap();
    let p = base + flow * n_in / two;
    let hi = n_in - T::one();
    let inside = p > T::zero() && p < hi;
    let p = p.max(T::zero()).min(hi);
    let i0 = p.floor().to_usize().unwrap().min(in_size - 1);
    let i1 = (i0 + 1).min(in_size - 1);
    Coord { i0, i1, frac: p - T::from_usize(i0).unwrap(), dpos: if inside { n_in / two } else { T::zero() } }
}

struct GridSampleBackward<T: Scalar> {
    input: Tensor<T>,
    flow: Tensor<T>,
}

impl<T: Scalar> Backward<T> for GridSampleBackward<T> {
    fn inputs(&self) -> Vec<&Tensor<T>> {
        vec![&self.input, &self.flow]
    }

    fn backward(&self, out: &Tensor<T>, grad: &[T]) {
        let is = self.input.shape();
        let os = out.shape();
        let (ho, wo) = (os.h(), os.w());
        let plane_out = ho * wo;
        let flow = self.flow.data();
        let x = self.input.data();
        let mut dflow = if self.flow.requires_grad() { Some(vec![T::zero(); flow.len()]) } else { None };
        let mut dinput = if self.input.requires_grad() { Some(vec![T::zero(); x.len()]) } else { None };
        for n in 0..is.n() {
            let fx = &flow[(2 * n) * plane_out..(2 * n + 1) * plane_out];
            let fy = &flow[(2 * n + 1) * plane_out..(2 * n + 2) * plane_out];
            for oy in 0..ho {
                for ox in 0..wo {
                    let k = oy * wo + ox;
                    let cx = coord(ox, wo, is.w(), fx[k]);
                    let cy = coord(oy, ho, is.h(), fy[k]);
                    let (ax, ay) = (cx.frac, cy.frac);
                    let mut gx = T::zero();
                    let mut gy = T::zero();
                    for c in 0..is.c() {
                        let base = (n * is.c() + c) * is.hw();
                        let d = grad[(n * is.c() + c) * plane_out + k];
                        let v00 = x[base + cy.i0 * is.w() + cx.i0];
                        let v01 = x[base + cy.i0 * is.w() + cx.i1];
                        let v10 = x[base + cy.i1 * is.w() + cx.i0];
                        let v11 = x[base + cy.i1 * is.w() + cx.i1];
                        gx = gx + d * ((T::one() - ay) * (v01 - v00) + ay * (v11 - v10));
                        gy = gy + d * ((T::one() - ax) * (v10 - v00) + ax * (v11 - v01));
                        if let Some(di) = dinput.as_mut() {
                            di[base + cy.i0 * is.w() + cx.i0] = di[base + cy.i0 * is.w() + cx.i0] + d * (T::one() - ay) * (T::one() - ax);
                            di[base + cy.i0 * is.w() + cx.i1] = di[base + cy.i0 * is.w() + cx.i1] + d * (T::one() - ay) * ax;
                            di[base + cy.i1 * is.w() + cx.i0] = di[base + cy.i1 * is.w() + cx.i0] + d * ay * (T::one() - ax);
                            di[base + cy.i1 * is.w() + cx.i1] = di[base + cy.i1 * is.w() + cx.i1] + d * ay * ax;
                        }
                    }
                    if let Some(df) = dflow.as_mut() {
                        df[(2 * n) * plane_out + k] = gx * cx.dpos;
                        df[(2 * n + 1) * plane_out + k] = gy * cy.dpos;
                    }
                }
            }
        }
        drop((flow, x));
        if let Some(df) = dflow {
            self.flow.accumulate_grad(&df);
        }
        if let Some(di) = dinput {
            self.input.accumulate_grad(&di);
        }
    }
}

/// Backward warp: `out(p) = input(p + flow(p))` with bilinear sampling.
///
/// `flow` is `(N, 2, H_out, W_out)`, channel 0 horizontal and channel 1
/// vertical, in normalised units where the image spans `[-1, 1]` (one
/// pixel = `2 / size`). Samples outside the image read the nearest border
/// value.
pub fn grid_sample<T: Scalar>(input: &Tensor<T>, flow: &Tensor<T>) -> Result<Tensor<T>> {
    let is = input.shape();
    let fs = flow.shape();
    if fs.c() != 2 {
        return Err(Error::shape("grid_sample", format!("flow {fs} must have 2 channels")));
    }
    if fs.n() != is.n() {
        return Err(Error::shape("grid_sample", format!("batch of flow {fs} vs input {is}")));
    }
    let (ho, wo) = (fs.h(), fs.w());
    let out_shape = Shape::new(is.n(), is.c(), ho, wo);
    let plane_out = ho * wo;
    let mut out = vec![T::zero(); out_shape.numel()];
    {
        let x = input.data();
        let f = flow.data();
        for n in 0..is.n() {
            for oy in 0..ho {
                for ox in 0..wo {
                    let k = oy * wo + ox;
                    let cx = coord(ox, wo, is.w(), f[(2 * n) * plane_out + k]);
                    let cy = coord(oy, ho, is.h(), f[(2 * n + 1) * plane_out + k]);
                    for c in 0..is.c() {
                        let base = (n * is.c() + c) * is.hw();
                        let v00 = x[base + cy.i0 * is.w() + cx.i0];
                        let v01 = x[base + cy.i0 * is.w() + cx.i1];
                        let v10 = x[base + cy.i1 * is.w() + cx.i0];
                        let v11 = x[base + cy.i1 * is.w() + cx.i1];
                        let top = v00 + (v01 - v00) * cx.frac;
                        let bot = v10 + (v11 - v10) * cx.frac;
                        out[(n * is.c() + c) * plane_out + k] = top + (bot - top) * cy.frac;
                    }
                }
            }
        }
    }
    Tensor::from_op("grid_sample", out_shape, out, GridSampleBackward { input: input.clone(), flow: flow.clone() })
}
