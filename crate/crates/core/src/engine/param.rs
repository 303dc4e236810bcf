use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::{Scalar, Tensor, Var};

/// A learnable tensor with a unique dotted name such as `enc.0.block1.conv1.weight`.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    key: usize,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(registry: &mut ParamRegistry, name: impl Into<String>, value: Tensor<T>) -> Self {
        let name = name.into();
        let key = registry.register(&name);
        Self { name, value, key }
    }

    pub fn key(&self) -> usize {
        self.key
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }

    /// Graph leaf for this parameter. With `track` off the leaf is a
    /// constant and no gradient will be recorded.
    pub fn var(&self, track: bool) -> Var<T> {
        Var::leaf(self.value.clone(), track, Some(self.key))
    }
}

/// Hands out parameter keys and rejects duplicate names.
#[derive(Debug, Default)]
pub struct ParamRegistry {
    names: Vec<String>,
}

impl ParamRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    fn register(&mut self, name: &str) -> usize {
        assert!(
            !self.names.iter().any(|n| n == name),
            "duplicate parameter name {name}"
        );
        self.names.push(name.to_owned());
        self.names.len() - 1
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// Weight initialization schemes.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// Uniform in `±sqrt(6 / fan_in)`.
    HeUniform { fan_in: usize },
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    GlorotUniform { fan_in: usize, fan_out: usize },
    Normal { std: f64 },
    Zeros,
    Ones,
}

impl Init {
    pub fn tensor<T: Scalar, R: Rng>(self, shape: &[usize], rng: &mut R) -> Tensor<T> {
        let uniform = |rng: &mut R, bound: f64| {
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            Tensor::from_fn(shape, |_| T::lit(dist.sample(rng)))
        };
        match self {
            Init::HeUniform { fan_in } => uniform(rng, (6.0 / fan_in.max(1) as f64).sqrt()),
            Init::GlorotUniform { fan_in, fan_out } => {
                uniform(rng, (6.0 / (fan_in + fan_out).max(1) as f64).sqrt())
            }
            Init::Normal { std } => {
                let dist = Normal::new(0.0, std).expect("valid std");
                Tensor::from_fn(shape, |_| T::lit(dist.sample(rng)))
            }
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::ones(shape),
        }
    }
}
