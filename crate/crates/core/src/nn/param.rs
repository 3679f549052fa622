use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// A named trainable tensor. Names are dotted paths such as
/// `coarse.enc.0.weight` and stay fixed across save/load.
#[derive(Clone, Debug)]
pub struct Parameter<T: Scalar> {
    pub name: String,
    pub tensor: Tensor<T>,
}

/// Ordered collection of uniquely named parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<T: Scalar> {
    params: Vec<Parameter<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::InvalidArgument(format!("duplicate parameter name `{name}`")));
        }
        tensor.set_requires_grad(true);
        self.params.push(Parameter { name, tensor });
        Ok(())
    }

    pub fn extend(&mut self, other: ParamSet<T>) -> Result<()> {
        for p in other.params {
            self.insert(p.name, p.tensor)?;
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Parameter<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count.
    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a Parameter<T>> + 'a {
        self.params.iter().filter(move |p| p.name.starts_with(prefix))
    }

    /// Enables or disables gradient tracking for every parameter under
    /// `prefix`.
    pub fn set_trainable(&self, prefix: &str, on: bool) {
        self.with_prefix(prefix).for_each(|p| p.tensor.set_requires_grad(on));
    }

    pub fn trainable(&self) -> Vec<&Parameter<T>> {
        self.params.iter().filter(|p| p.tensor.requires_grad()).collect()
    }

    pub fn zero_grad(&self) {
        self.params.iter().for_each(|p| p.tensor.zero_grad());
    }

    /// Copies values from `other`, matching by name.
    pub fn copy_from(&self, other: &ParamSet<T>) -> Result<()> {
        for p in &self.params {
            let src = other
                .get(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{}`", p.name)))?;
            if src.tensor.shape() != p.tensor.shape() {
                return Err(Error::shape("copy_from", format!("`{}`: {} vs {}", p.name, src.tensor.shape(), p.tensor.shape())));
            }
            p.tensor.data_mut().copy_from_slice(&src.tensor.data());
        }
        Ok(())
    }
}

/// Creates parameters in a deterministic order from a seeded stream.
pub struct ParamBuilder<T: Scalar> {
    prefix: String,
    set: ParamSet<T>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> ParamBuilder<T> {
    pub fn new(prefix: impl Into<String>, seed: u64) -> Self {
        Self { prefix: prefix.into(), set: ParamSet::new(), rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    /// Kaiming-uniform fan-in init for ReLU networks: `U(-b, b)` with
    /// `b = sqrt(6 / fan_in)`.
    pub fn kaiming(&mut self, name: &str, shape: Shape, fan_in: usize) -> Result<Tensor<T>> {
        let bound = (6.0 / fan_in as f64).sqrt();
        let data = (0..shape.numel()).map(|_| T::of(self.rng.random_range(-bound..bound))).collect();
        self.register(name, shape, data)
    }

    pub fn zeros(&mut self, name: &str, shape: Shape) -> Result<Tensor<T>> {
        self.register(name, shape, vec![T::zero(); shape.numel()])
    }

    fn register(&mut self, name: &str, shape: Shape, data: Vec<T>) -> Result<Tensor<T>> {
        let t = Tensor::variable(shape, data)?;
        self.set.insert(self.full_name(name), t.clone())?;
        Ok(t)
    }

    pub fn finish(self) -> ParamSet<T> {
        self.set
    }
}
