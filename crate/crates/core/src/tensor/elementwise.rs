use super::{same_shape, Backward, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

struct Binary<T: Scalar> {
    a: Tensor<T>,
    b: Tensor<T>,
    kind: BinaryKind,
}

#[derive(Clone, Copy)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

impl<T: Scalar> Backward<T> for Binary<T> {
    fn inputs(&self) -> Vec<&Tensor<T>> {
        vec![&self.a, &self.b]
    }

    fn backward(&self, _out: &Tensor<T>, grad: &[T]) {
        match self.kind {
            BinaryKind::Add => {
                self.a.accumulate_grad(grad);
                self.b.accumulate_grad(grad);
            }
            BinaryKind::Sub => {
                self.a.accumulate_grad(grad);
                self.b.accumulate_with(|g| {
                    for (gv, d) in g.iter_mut().zip(grad) {
                        *gv = *gv - *d;
                    }
                });
            }
            BinaryKind::Mul => {
                if self.a.requires_grad() {
                    let b = self.b.data();
                    self.a.accumulate_with(|g| {
                        for ((gv, d), bv) in g.iter_mut().zip(grad).zip(b.iter()) {
                            *gv = *gv + *d * *bv;
                        }
                    });
                }
                if self.b.requires_grad() {
                    let a = self.a.data();
                    self.b.accumulate_with(|g| {
                        for ((gv, d), av) in g.iter_mut().zip(grad).zip(a.iter()) {
                            *gv = *gv + *d * *av;
                        }
                    });
                }
            }
        }
    }
}

fn binary<T: Scalar>(name: &'static str, a: &Tensor<T>, b: &Tensor<T>, kind: BinaryKind) -> Result<Tensor<T>> {
    same_shape(name, a, b)?;
    let data = {
        let (x, y) = (a.data(), b.data());
        x.iter()
            .zip(y.iter())
            .map(|(&p, &q)| match kind {
                BinaryKind::Add => p + q,
                BinaryKind::Sub => p - q,
                BinaryKind::Mul => p * q,
            })
            .collect()
    };
    Tensor::from_op(name, a.shape(), data, Binary { a: a.clone(), b: b.clone(), kind })
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    binary("add", a, b, BinaryKind::Add)
}

pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    binary("sub", a, b, BinaryKind::Sub)
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    binary("mul", a, b, BinaryKind::Mul)
}

/// Pointwise op whose derivative only needs the input and output values.
struct Unary<T: Scalar> {
    input: Tensor<T>,
    kind: UnaryKind<T>,
}

#[derive(Clone, Copy)]
enum UnaryKind<T> {
    Affine(T),
    Relu,
    Sigmoid,
    Abs,
    Clamp(T, T),
}

impl<T: Scalar> Backward<T> for Unary<T> {
    fn inputs(&self) -> Vec<&Tensor<T>> {
        vec![&self.input]
    }

    fn backward(&self, out: &Tensor<T>, grad: &[T]) {
        let x = self.input.data();
        let y = out.data();
        let kind = self.kind;
        self.input.accumulate_with(|g| {
            for i in 0..g.len() {
                let d = match kind {
                    UnaryKind::Affine(s) => s,
                    UnaryKind::Relu => {
                        if x[i] > T::zero() {
                            T::one()
                        } else {
                            T::zero()
                        }
                    }
                    UnaryKind::Sigmoid => y[i] * (T::one() - y[i]),
                    UnaryKind::Abs => {
                        if x[i] > T::zero() {
                            T::one()
                        } else if x[i] < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        }
                    }
                    UnaryKind::Clamp(lo, hi) => {
                        if x[i] > lo && x[i] < hi {
                            T::one()
                        } else {
                            T::zero()
                        }
                    }
                };
                g[i] = g[i] + grad[i] * d;
            }
        });
    }
}

fn unary<T: Scalar>(name: &'static str, x: &Tensor<T>, kind: UnaryKind<T>, f: impl Fn(T) -> T) -> Result<Tensor<T>> {
    let data = x.data().iter().map(|&v| f(v)).collect();
    Tensor::from_op(name, x.shape(), data, Unary { input: x.clone(), kind })
}

/// `scale * x + shift`, elementwise.
pub fn affine<T: Scalar>(x: &Tensor<T>, scale: T, shift: T) -> Result<Tensor<T>> {
    unary("affine", x, UnaryKind::Affine(scale), |v| v * scale + shift)
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    unary("relu", x, UnaryKind::Relu, |v| if v > T::zero() { v } else { T::zero() })
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    unary("sigmoid", x, UnaryKind::Sigmoid, |v| {
        // Split by sign so exp never overflows.
        if v >= T::zero() {
            T::one() / (T::one() + (-v).exp())
        } else {
            let e = v.exp();
            e / (T::one() + e)
        }
    })
}

pub fn abs<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    unary("abs", x, UnaryKind::Abs, |v| v.abs())
}

pub fn clamp<T: Scalar>(x: &Tensor<T>, lo: T, hi: T) -> Result<Tensor<T>> {
    if lo > hi {
        return Err(Error::InvalidArgument(format!("clamp range [{lo}, {hi}] is empty")));
    }
    unary("clamp", x, UnaryKind::Clamp(lo, hi), |v| v.max(lo).min(hi))
}

struct Concat<T: Scalar> {
    parts: Vec<Tensor<T>>,
}

impl<T: Scalar> Backward<T> for Concat<T> {
    fn inputs(&self) -> Vec<&Tensor<T>> {
        self.parts.iter().collect()
    }

    fn backward(&self, out: &Tensor<T>, grad: &[T]) {
        let os = out.shape();
        let out_plane = os.c() * os.hw();
        let mut offset = 0;
        for p in &self.parts {
            let len = p.shape().c() * os.hw();
            p.accumulate_with(|g| {
                for n in 0..os.n() {
                    let src = &grad[n * out_plane + offset..n * out_plane + offset + len];
                    for (gv, d) in g[n * len..(n + 1) * len].iter_mut().zip(src) {
                        *gv = *gv + *d;
                    }
                }
            });
            offset += len;
        }
    }
}

/// Stacks tensors along the channel axis.
pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?
        .shape();
    for p in parts {
        let s = p.shape();
        if s.n() != first.n() || s.h() != first.h() || s.w() != first.w() {
            return Err(Error::shape("concat", format!("{s} vs {first}")));
        }
    }
    let c_total: usize = parts.iter().map(|p| p.shape().c()).sum();
    let shape = first.with_c(c_total);
    let hw = first.hw();
    let mut data = Vec::with_capacity(shape.numel());
    for n in 0..first.n() {
        for p in parts {
            let len = p.shape().c() * hw;
            data.extend_from_slice(&p.data()[n * len..(n + 1) * len]);
        }
    }
    Tensor::from_op("concat", shape, data, Concat { parts: parts.iter().map(|&p| p.clone()).collect() })
}

struct Slice<T: Scalar> {
    input: Tensor<T>,
    start: usize,
}

impl<T: Scalar> Backward<T> for Slice<T> {
    fn inputs(&self) -> Vec<&Tensor<T>> {
        vec![&self.input]
    }

    fn backward(&self, out: &Tensor<T>, grad: &[T]) {
        let is = self.input.shape();
        let len = out.shape().c() * is.hw();
        let plane = is.c() * is.hw();
        let offset = self.start * is.hw();
        self.input.accumulate_with(|g| {
            for n in 0..is.n() {
                let dst = &mut g[n * plane + offset..n * plane + offset + len];
                for (gv, d) in dst.iter_mut().zip(&grad[n * len..(n + 1) * len]) {
                    *gv = *gv + *d;
                }
            }
        });
    }
}

/// Channels `start..start + len` of `x`.
pub fn slice_channels<T: Scalar>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if len == 0 || start + len > s.c() {
        return Err(Error::shape("slice_channels", format!("channels {start}..{} of {s}", start + len)));
    }
    let shape = s.with_c(len);
    let plane = s.c() * s.hw();
    let mut data = Vec::with_capacity(shape.numel());
    {
        let d = x.data();
        for n in 0..s.n() {
            let base = n * plane + start * s.hw();
            data.extend_from_slice(&d[base..base + len * s.hw()]);
        }
    }
    Tensor::from_op("slice_channels", shape, data, Slice { input: x.clone(), start })
}
