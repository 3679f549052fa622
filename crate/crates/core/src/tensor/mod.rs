//! Dense NCHW tensors with tape-free reverse-mode differentiation.
//!
//! Every op output keeps `Rc` handles to its inputs plus whatever it saved
//! for the backward pass, so the graph is simply the set of tensors
//! reachable from the loss. Leaves (parameters, inputs) accumulate
//! gradients; intermediate gradients are transient and released as soon as
//! they have been propagated.

mod conv;
mod elementwise;
mod grid;
mod norm;
mod pool;
mod reduce;
mod resize;

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub use conv::{conv2d, conv_out_size};
pub use elementwise::{abs, add, affine, clamp, concat_channels, mul, relu, sigmoid, slice_channels, sub};
pub use grid::grid_sample;
pub use norm::{instance_norm, INSTANCE_NORM_EPS};
pub use pool::avg_pool2;
pub use reduce::{mean, mean_abs_diff, sum};
pub use resize::bilinear_resize;

/// (batch, channels, height, width).
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, serde::Serialize, serde::Deserialize)]
pub struct Shape(pub [usize; 4]);

impl Shape {
    pub const SCALAR: Shape = Shape([1, 1, 1, 1]);

    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape([n, c, h, w])
    }

    pub fn n(&self) -> usize {
        self.0[0]
    }

    pub fn c(&self) -> usize {
        self.0[1]
    }

    pub fn h(&self) -> usize {
        self.0[2]
    }

    pub fn w(&self) -> usize {
        self.0[3]
    }

    pub fn hw(&self) -> usize {
        self.0[2] * self.0[3]
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    pub fn with_c(self, c: usize) -> Self {
        Shape([self.0[0], c, self.0[2], self.0[3]])
    }

    pub fn with_hw(self, h: usize, w: usize) -> Self {
        Shape([self.0[0], self.0[1], h, w])
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [n, c, h, w] = self.0;
        write!(f, "{n}x{c}x{h}x{w}")
    }
}

/// Backward rule of one recorded op.
pub(crate) trait Backward<T: Scalar> {
    fn inputs(&self) -> Vec<&Tensor<T>>;

    /// Accumulates input gradients given the gradient of the op output.
    fn backward(&self, out: &Tensor<T>, grad: &[T]);
}

struct Node<T: Scalar> {
    shape: Shape,
    data: RefCell<Vec<T>>,
    grad: RefCell<Option<Vec<T>>>,
    requires_grad: Cell<bool>,
    op: Option<Box<dyn Backward<T>>>,
}

/// Reference-counted handle to a tensor node.
pub struct Tensor<T: Scalar> {
    node: Rc<Node<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor { node: Rc::clone(&self.node) }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("dtype", &T::NAME)
            .field("requires_grad", &self.requires_grad())
            .finish()
    }
}

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording any differentiation graph.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

pub(crate) fn check_finite<T: Scalar>(op: &'static str, data: &[T]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { op, index }),
        None => Ok(()),
    }
}

impl<T: Scalar> Tensor<T> {
    fn leaf(shape: Shape, data: Vec<T>, requires_grad: bool) -> Self {
        Tensor {
            node: Rc::new(Node {
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: Cell::new(requires_grad),
                op: None,
            }),
        }
    }

    /// Builds a constant (non-differentiated) tensor.
    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::shape(
                "from_vec",
                format!("{} values for shape {shape}", data.len()),
            ));
        }
        check_finite("from_vec", &data)?;
        Ok(Self::leaf(shape, data, false))
    }

    /// Builds a leaf that accumulates gradients.
    pub fn variable(shape: Shape, data: Vec<T>) -> Result<Self> {
        let t = Self::from_vec(shape, data)?;
        t.set_requires_grad(true);
        Ok(t)
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::leaf(shape, vec![T::zero(); shape.numel()], false)
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Self::leaf(shape, vec![value; shape.numel()], false)
    }

    pub fn scalar(value: T) -> Self {
        Self::full(Shape::SCALAR, value)
    }

    /// Records an op output. The op is kept only when some input needs a
    /// gradient and recording is enabled.
    pub(crate) fn from_op(
        name: &'static str,
        shape: Shape,
        data: Vec<T>,
        op: impl Backward<T> + 'static,
    ) -> Result<Self> {
        debug_assert_eq!(data.len(), shape.numel());
        check_finite(name, &data)?;
        let needs = grad_enabled() && op.inputs().iter().any(|t| t.requires_grad());
        let op: Option<Box<dyn Backward<T>>> = if needs { Some(Box::new(op)) } else { None };
        Ok(Tensor {
            node: Rc::new(Node {
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: Cell::new(needs),
                op,
            }),
        })
    }

    pub fn shape(&self) -> Shape {
        self.node.shape
    }

    pub fn numel(&self) -> usize {
        self.node.shape.numel()
    }

    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.node.data.borrow()
    }

    /// Mutable access to the values of a leaf. Intended for optimizers and
    /// weight loading; op outputs are immutable.
    pub fn data_mut(&self) -> RefMut<'_, Vec<T>> {
        assert!(self.node.op.is_none(), "only leaf tensors may be mutated");
        self.node.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        let d = self.data();
        assert_eq!(d.len(), 1, "item() on non-scalar tensor");
        d[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad.get()
    }

    /// Toggles gradient tracking on a leaf.
    pub fn set_requires_grad(&self, on: bool) {
        assert!(self.node.op.is_none(), "requires_grad can only be set on leaves");
        self.node.requires_grad.set(on);
    }

    pub fn is_leaf(&self) -> bool {
        self.node.op.is_none()
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// Multiplies the accumulated gradient, if any, by `factor`.
    pub fn scale_grad(&self, factor: T) {
        if let Some(g) = self.node.grad.borrow_mut().as_mut() {
            g.iter_mut().for_each(|v| *v = *v * factor);
        }
    }

    /// Copy of the values detached from the graph.
    pub fn detach(&self) -> Self {
        Self::leaf(self.shape(), self.to_vec(), false)
    }

    /// Same values, converted to another scalar type (no graph).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        let data = self.data().iter().map(|v| U::of(v.to_f64_lossy())).collect();
        Tensor::leaf(self.shape(), data, false)
    }

    pub fn ptr_eq(&self, other: &Self) -> bool {
        Rc::ptr_eq(&self.node, &other.node)
    }

    fn id(&self) -> usize {
        Rc::as_ptr(&self.node) as *const () as usize
    }

    /// Adds `g` into this tensor's gradient buffer.
    pub(crate) fn accumulate_grad(&self, g: &[T]) {
        self.accumulate_with(|buf| {
            for (b, v) in buf.iter_mut().zip(g) {
                *b = *b + *v;
            }
        });
    }

    /// Gives `f` the (zero-initialised on first use) gradient buffer.
    pub(crate) fn accumulate_with(&self, f: impl FnOnce(&mut [T])) {
        if !self.requires_grad() {
            return;
        }
        let mut slot = self.node.grad.borrow_mut();
        let buf = slot.get_or_insert_with(|| vec![T::zero(); self.numel()]);
        f(buf);
    }

    /// Reverse-mode pass from a scalar loss. Leaf gradients accumulate
    /// across calls until cleared.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        self.accumulate_grad(&[T::one()]);
        for t in order.iter().rev() {
            let Some(op) = t.node.op.as_ref() else { continue };
            let Some(g) = t.node.grad.borrow_mut().take() else { continue };
            op.backward(t, &g);
        }
        Ok(())
    }

    /// Post-order over the differentiable subgraph reachable from `self`.
    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut seen = HashSet::new();
        let mut stack = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !seen.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(op) = t.node.op.as_ref() {
                for p in op.inputs() {
                    if p.requires_grad() && !seen.contains(&p.id()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }

    // Method forms of the free-function ops.

    pub fn conv2d(&self, weight: &Self, bias: &Self, stride: usize, padding: usize) -> Result<Self> {
        conv2d(self, weight, bias, stride, padding)
    }

    pub fn avg_pool2(&self) -> Result<Self> {
        avg_pool2(self)
    }

    pub fn resize(&self, h: usize, w: usize) -> Result<Self> {
        bilinear_resize(self, h, w)
    }

    pub fn grid_sample(&self, flow: &Self) -> Result<Self> {
        grid_sample(self, flow)
    }

    pub fn instance_norm(&self) -> Result<Self> {
        instance_norm(self, T::of(INSTANCE_NORM_EPS))
    }

    pub fn relu(&self) -> Result<Self> {
        relu(self)
    }

    pub fn sigmoid(&self) -> Result<Self> {
        sigmoid(self)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        add(self, other)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        sub(self, other)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        mul(self, other)
    }

    /// `scale * self + shift`.
    pub fn affine(&self, scale: T, shift: T) -> Result<Self> {
        affine(self, scale, shift)
    }

    pub fn scale(&self, scale: T) -> Result<Self> {
        affine(self, scale, T::zero())
    }

    pub fn abs(&self) -> Result<Self> {
        abs(self)
    }

    pub fn clamp(&self, lo: T, hi: T) -> Result<Self> {
        clamp(self, lo, hi)
    }

    pub fn sum(&self) -> Result<Self> {
        sum(self)
    }

    pub fn mean(&self) -> Result<Self> {
        mean(self)
    }

    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Self> {
        slice_channels(self, start, len)
    }
}

pub(crate) fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{} vs {}", a.shape(), b.shape())));
    }
    Ok(())
}
