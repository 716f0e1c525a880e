use std::collections::BTreeMap;

use ndarray::IxDyn;
use rand::Rng;

use super::{NnError, Result, Tensor};

/// How a parameter is filled at initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    Uniform,
    Zeros,
    Ones,
}

/// Name, shape and initializer of one parameter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }
}

/// A named trainable tensor with a lazily materialized gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

/// Parameters keyed by dot-separated path, iterated in lexicographic order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    params: BTreeMap<String, Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a set from specs, drawing random values in lexicographic name order.
    pub fn from_specs(specs: impl IntoIterator<Item = ParamSpec>, rng: &mut impl Rng) -> Self {
        let mut sorted: Vec<ParamSpec> = specs.into_iter().collect();
        sorted.sort_by(|a, b| a.name.cmp(&b.name));
        let mut ps = Self::new();
        for spec in sorted {
            match spec.init {
                Init::Uniform => ps.insert_uniform(spec.name, &spec.shape, rng),
                Init::Zeros => ps.insert_zeros(spec.name, &spec.shape),
                Init::Ones => ps.insert_ones(spec.name, &spec.shape),
            }
        }
        ps
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), Param { value, grad: None });
    }

    /// Uniform(-k, k) with `k = 1/sqrt(fan_in)`, where `fan_in` is the leading dimension.
    pub fn insert_uniform(&mut self, name: impl Into<String>, shape: &[usize], rng: &mut impl Rng) {
        let k = 1.0 / (shape[0] as f64).sqrt();
        let value = Tensor::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-k..k));
        self.insert(name, value);
    }

    pub fn insert_zeros(&mut self, name: impl Into<String>, shape: &[usize]) {
        self.insert(name, Tensor::zeros(IxDyn(shape)));
    }

    pub fn insert_ones(&mut self, name: impl Into<String>, shape: &[usize]) {
        self.insert(name, Tensor::ones(IxDyn(shape)));
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.params
            .get(name)
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.params
            .get_mut(name)
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.get(name)?.value)
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        Ok(&mut self.get_mut(name)?.value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }

    /// Adds `scale * grad` into the named parameter's gradient.
    pub fn accumulate_grad(&mut self, name: &str, grad: &Tensor, scale: f64) -> Result<()> {
        let p = self.get_mut(name)?;
        if p.value.shape() != grad.shape() {
            return Err(super::shape_err(
                "accumulate_grad",
                format!("{name}: {:?} vs {:?}", p.value.shape(), grad.shape()),
            ));
        }
        match &mut p.grad {
            Some(g) => g.scaled_add(scale, grad),
            None => p.grad = Some(grad * scale),
        }
        Ok(())
    }
}
