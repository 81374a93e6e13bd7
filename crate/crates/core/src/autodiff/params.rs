use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::Rng;

use super::Tensor;
use crate::error::{Error, Result};

/// Parameter groups: shared encoder, RNN-T decoder, deliberation decoder
/// (including the additional encoder).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    Enc,
    Rnnt,
    Delib,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Enc, Group::Rnnt, Group::Delib];

    pub fn name(self) -> &'static str {
        match self {
            Group::Enc => "enc",
            Group::Rnnt => "rnnt",
            Group::Delib => "delib",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.name() == name)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: Group,
    pub tensor: Tensor,
}

/// Ordered collection of named, grouped parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, group: Group, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter name {name}");
        self.params.push(Param {
            name,
            group,
            tensor,
        });
        ParamId(self.params.len() - 1)
    }

    /// Adds a parameter drawn uniformly from `[-scale, scale]`.
    pub fn add_uniform<R: Rng>(
        &mut self,
        group: Group,
        name: impl Into<String>,
        shape: &[usize],
        scale: f64,
        rng: &mut R,
    ) -> ParamId {
        let numel: usize = shape.iter().product();
        let values = (0..numel).map(|_| rng.random_range(-scale..=scale)).collect();
        self.add(group, name, Tensor::from_parts(shape.to_vec(), values))
    }

    /// Redraws every value uniformly from `[-scale, scale]`.
    pub fn randomize<R: Rng>(&mut self, scale: f64, rng: &mut R) {
        for p in &mut self.params {
            for v in p.tensor.values_mut() {
                *v = rng.random_range(-scale..=scale);
            }
        }
    }

    pub fn add_zeros(&mut self, group: Group, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(group, name, Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Number of scalar parameters in `group`.
    pub fn count(&self, group: Group) -> usize {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .map(|p| p.tensor.len())
            .sum()
    }

    /// Number of scalars across parameters whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.tensor.len())
            .sum()
    }

    /// Hash of names, shapes and value bits for every parameter in `group`.
    pub fn fingerprint(&self, group: Group) -> u64 {
        let mut h = DefaultHasher::new();
        for p in self.params.iter().filter(|p| p.group == group) {
            p.name.hash(&mut h);
            p.tensor.shape().hash(&mut h);
            for v in p.tensor.values() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    /// Replaces the values of the parameter called `name`, checking shape.
    pub fn assign(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let id = self
            .find(name)
            .ok_or_else(|| Error::Format(format!("unknown parameter {name}")))?;
        let current = &mut self.params[id.0].tensor;
        if current.shape() != tensor.shape() {
            return Err(Error::shape("assign", current.shape(), tensor.shape()));
        }
        *current = tensor;
        Ok(())
    }
}

/// Gradient buffers aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    values: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            values: store.params.iter().map(|p| vec![0.0; p.tensor.len()]).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.values[id.0]
    }

    pub(crate) fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.values[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.values.iter().enumerate().map(|(i, g)| (ParamId(i), g.as_slice()))
    }

    /// Accumulates `other` into `self`, elementwise, in parameter order.
    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.values {
            for x in g.iter_mut() {
                *x *= factor;
            }
        }
    }

    /// Euclidean norm over the parameters belonging to `group`.
    pub fn group_norm(&self, store: &ParamStore, group: Group) -> f64 {
        self.iter()
            .filter(|(id, _)| store.param(*id).group == group)
            .flat_map(|(_, g)| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().flatten().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().flatten().all(|x| x.is_finite())
    }
}
