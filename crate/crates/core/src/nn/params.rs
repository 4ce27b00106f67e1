use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Conv weight `[k, c, kd, kh, kw]` drawn from U(-b, b), b = sqrt(3 / fan_in).
    pub(crate) fn add_conv_weight(&mut self, name: String, shape: [usize; 5], rng: &mut ChaCha8Rng) -> ParamId {
        let fan_in = (shape[1] * shape[2] * shape[3] * shape[4]) as f64;
        let bound = (3.0 / fan_in).sqrt();
        let value = Tensor::from_fn(&shape, |_| rng.random_range(-bound..bound));
        self.add(name, value)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    /// Replaces every value, checking names and shapes line up.
    pub fn load(&mut self, entries: Vec<(String, Tensor)>) -> Result<()> {
        if entries.len() != self.values.len() {
            return Err(Error::Config(format!(
                "expected {} parameters, found {}",
                self.values.len(),
                entries.len()
            )));
        }
        for (i, (name, value)) in entries.iter().enumerate() {
            if *name != self.names[i] || value.shape() != self.values[i].shape() {
                return Err(Error::Config(format!(
                    "parameter {i} is {name} {:?}, expected {} {:?}",
                    value.shape(),
                    self.names[i],
                    self.values[i].shape()
                )));
            }
        }
        self.values = entries.into_iter().map(|(_, v)| v).collect();
        Ok(())
    }
}

/// A forward pass in progress: a tape plus the parameters bound onto it.
pub struct Graph {
    pub tape: Tape,
    params: Vec<Var>,
}

impl Graph {
    /// Binds every parameter as a leaf; `trainable` controls `requires_grad`.
    pub fn new(store: &ParamStore, trainable: bool) -> Result<Self> {
        let mut tape = Tape::new();
        let params = store
            .values()
            .iter()
            .map(|v| tape.leaf(v.clone(), trainable))
            .collect::<Result<_>>()?;
        Ok(Self { tape, params })
    }

    pub fn param(&self, id: ParamId) -> Var {
        self.params[id.0]
    }

    /// Gradients for every parameter after [`Tape::backward`], in store order.
    pub fn param_grads(&mut self) -> Result<Vec<Tensor>> {
        self.params
            .iter()
            .map(|&v| {
                self.tape
                    .take_grad(v)
                    .ok_or_else(|| Error::Tape("parameter gradient missing; was backward run?".into()))
            })
            .collect()
    }
}
