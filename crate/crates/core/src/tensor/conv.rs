use rayon::prelude::*;

use super::{Backward, Shape, Tensor};
use crate::error::{Error, Result};
use crate::scalar::{gemm, MatRef, Scalar};

#[derive(Clone, Copy, Debug)]
struct Geometry {
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
    h_out: usize,
    w_out: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.h_out * self.w_out
    }

    /// A 1x1, stride-1, unpadded conv reads its input directly as the
    /// column matrix.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Output spatial extent of a convolution along one axis.
pub fn conv_out_size(size: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    if stride == 0 || padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// Valid output-column range `[lo, hi)` for kernel column `kx` when
/// `stride == 1`.
fn valid_cols(g: &Geometry, kx: usize) -> (usize, usize) {
    let lo = g.padding.saturating_sub(kx).min(g.w_out);
    let hi = (g.w + g.padding).saturating_sub(kx).min(g.w_out).max(lo);
    (lo, hi)
}

fn im2col<T: Scalar>(g: &Geometry, input: &[T], cols: &mut [T]) {
    let (hw_out, k) = (g.cols(), g.k);
    for c in 0..g.c_in {
        let plane = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * hw_out;
                let dst = &mut cols[row..row + hw_out];
                for oy in 0..g.h_out {
                    let line = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        let (lo, hi) = valid_cols(g, kx);
                        line[..lo].fill(T::zero());
                        line[hi..].fill(T::zero());
                        let off = lo + kx - g.padding;
                        line[lo..hi].copy_from_slice(&src[off..off + hi - lo]);
                    } else {
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                            *v = if ix >= 0 && ix < g.w as isize { src[ix as usize] } else { T::zero() };
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &Geometry, cols: &[T], grad_in: &mut [T]) {
    let (hw_out, k) = (g.cols(), g.k);
    for c in 0..g.c_in {
        let plane = &mut grad_in[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * hw_out;
                let src = &cols[row..row + hw_out];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let line = &src[oy * g.w_out..(oy + 1) * g.w_out];
                    if g.stride == 1 {
                        let (lo, hi) = valid_cols(g, kx);
                        let off = lo + kx - g.padding;
                        for (d, v) in dst[off..off + hi - lo].iter_mut().zip(&line[lo..hi]) {
                            *d = *d + *v;
                        }
                        continue;
                    }
                    for (ox, v) in line.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] = dst[ix as usize] + *v;
                        }
                    }
                }
            }
        }
    }
}

/// 2-D convolution (cross-correlation) of an NCHW input with a
/// `(C_out, C_in, k, k)` weight and a `(1, C_out, 1, 1)` bias.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let xs = input.shape();
    let ws = weight.shape();
    let [c_out, c_in, kh, kw] = ws.0;
    if kh != kw {
        return Err(Error::shape("conv2d", format!("non-square kernel {ws}")));
    }
    if xs.c() != c_in {
        return Err(Error::shape("conv2d", format!("input {xs} has {} channels, weight {ws} expects {c_in}", xs.c())));
    }
    if bias.shape() != Shape::new(1, c_out, 1, 1) {
        return Err(Error::shape("conv2d", format!("bias {} for {c_out} output channels", bias.shape())));
    }
    let (Some(h_out), Some(w_out)) = (
        conv_out_size(xs.h(), kh, stride, padding),
        conv_out_size(xs.w(), kw, stride, padding),
    ) else {
        return Err(Error::shape("conv2d", format!("non-positive output size for {xs} with k={kh} s={stride} p={padding}")));
    };
    let g = Geometry { c_in, h: xs.h(), w: xs.w(), k: kh, stride, padding, h_out, w_out };
    let out_shape = Shape::new(xs.n(), c_out, h_out, w_out);

    let x_ref = input.data();
    let w_ref = weight.data();
    let b_ref = bias.data();
    let (x, wt, b): (&[T], &[T], &[T]) = (&x_ref, &w_ref, &b_ref);
    let in_len = c_in * g.h * g.w;
    let out_len = c_out * g.cols();
    let mut out = vec![T::zero(); out_shape.numel()];
    out.par_chunks_mut(out_len).enumerate().for_each(|(n, y)| {
        let xn = &x[n * in_len..(n + 1) * in_len];
        let owned;
        let cols: &[T] = if g.is_pointwise() {
            xn
        } else {
            let mut buf = vec![T::zero(); g.rows() * g.cols()];
            im2col(&g, xn, &mut buf);
            owned = buf;
            &owned
        };
        gemm(MatRef::new(wt, c_out, g.rows()), MatRef::new(cols, g.rows(), g.cols()), y, false);
        for (co, row) in y.chunks_mut(g.cols()).enumerate() {
            let bv = b[co];
            row.iter_mut().for_each(|v| *v = *v + bv);
        }
    });
    drop((x_ref, w_ref, b_ref));
    Tensor::from_op(
        "conv2d",
        out_shape,
        out,
        ConvBackward { input: input.clone(), weight: weight.clone(), bias: bias.clone(), geometry: g },
    )
}

struct ConvBackward<T: Scalar> {
    input: Tensor<T>,
    weight: Tensor<T>,
    bias: Tensor<T>,
    geometry: Geometry,
}

impl<T: Scalar> Backward<T> for ConvBackward<T> {
    fn inputs(&self) -> Vec<&Tensor<T>> {
        vec![&self.input, &self.weight, &self.bias]
    }

    fn backward(&self, _out: &Tensor<T>, grad: &[T]) {
        let g = self.geometry;
        let c_out = self.weight.shape().0[0];
        let n_batch = self.input.shape().n();
        let in_len = g.c_in * g.h * g.w;
        let out_len = c_out * g.cols();
        let (rows, cols_n) = (g.rows(), g.cols());

        if self.bias.requires_grad() {
            self.bias.accumulate_with(|gb| {
                for n in 0..n_batch {
                    for (co, row) in grad[n * out_len..(n + 1) * out_len].chunks(cols_n).enumerate() {
                        gb[co] = gb[co] + row.iter().copied().sum::<T>();
                    }
                }
            });
        }

        let x_ref = self.input.data();
        let w_ref = self.weight.data();
        let (x, wt): (&[T], &[T]) = (&x_ref, &w_ref);

        if self.weight.requires_grad() {
            // Per-sample partials summed in batch order keep the result
            // independent of the worker count.
            let partials: Vec<Vec<T>> = (0..n_batch)
                .into_par_iter()
                .map(|n| {
                    let xn = &x[n * in_len..(n + 1) * in_len];
                    let owned;
                    let cols: &[T] = if g.is_pointwise() {
                        xn
                    } else {
                        let mut buf = vec![T::zero(); rows * cols_n];
                        im2col(&g, xn, &mut buf);
                        owned = buf;
                        &owned
                    };
                    let dy = &grad[n * out_len..(n + 1) * out_len];
                    let mut dw = vec![T::zero(); c_out * rows];
                    gemm(MatRef::new(dy, c_out, cols_n), MatRef::new(cols, rows, cols_n).t(), &mut dw, false);
                    dw
                })
                .collect();
            self.weight.accumulate_with(|gw| {
                for p in &partials {
                    for (a, b) in gw.iter_mut().zip(p) {
                        *a = *a + *b;
                    }
                }
            });
        }

        if self.input.requires_grad() {
            self.input.accumulate_with(|gx| {
                gx.par_chunks_mut(in_len).enumerate().for_each(|(n, gxn)| {
                    let dy = &grad[n * out_len..(n + 1) * out_len];
                    let wmat = MatRef::new(wt, c_out, rows).t();
                    if g.is_pointwise() {
                        gemm(wmat, MatRef::new(dy, c_out, cols_n), gxn, true);
                    } else {
                        let mut dcols = vec![T::zero(); rows * cols_n];
                        gemm(wmat, MatRef::new(dy, c_out, cols_n), &mut dcols, false);
                        col2im(&g, &dcols, gxn);
                    }
                });
            });
        }
    }
}
