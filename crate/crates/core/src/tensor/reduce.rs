use super::{same_shape, Backward, Shape, Tensor};
use crate::error::Result;
use crate::scalar::Scalar;

struct ReduceBackward<T: Scalar> {
    input: Tensor<T>,
    scale: T,
}

impl<T: Scalar> Backward<T> for ReduceBackward<T> {
    fn inputs(&self) -> Vec<&Tensor<T>> {
        vec![&self.input]
    }

    fn backward(&self, _out: &Tensor<T>, grad: &[T]) {
        let d = grad[0] * self.scale;
        self.input.accumulate_with(|g| g.iter_mut().for_each(|v| *v = *v + d));
    }
}

/// Sum of all elements as a `1x1x1x1` tensor.
pub fn sum<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let total = x.data().iter().copied().sum::<T>();
    Tensor::from_op("sum", Shape::SCALAR, vec![total], ReduceBackward { input: x.clone(), scale: T::one() })
}

/// Mean of all elements as a `1x1x1x1` tensor.
pub fn mean<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let n = T::from_usize(x.numel()).unwrap();
    let total = x.data().iter().copied().sum::<T>();
    Tensor::from_op("mean", Shape::SCALAR, vec![total / n], ReduceBackward { input: x.clone(), scale: T::one() / n })
}

/// `mean(|a - b|)`, the L1 distance used by every image loss.
pub fn mean_abs_diff<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("mean_abs_diff", a, b)?;
    a.sub(b)?.abs()?.mean()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_gradient_is_uniform() {
        let x = Tensor::<f64>::variable(Shape::new(1, 1, 2, 5), vec![1.0; 10]).unwrap();
        x.mean().unwrap().backward().unwrap();
        assert!(x.grad().unwrap().iter().all(|&g| (g - 0.1).abs() < 1e-15));
    }

    #[test]
    fn l1_of_constant_offset() {
        let a = Tensor::<f64>::full(Shape::new(1, 3, 4, 4), 0.75);
        let b = Tensor::<f64>::full(Shape::new(1, 3, 4, 4), 0.5);
        assert!((mean_abs_diff(&a, &b).unwrap().item() - 0.25).abs() < 1e-15);
    }
}
