//! Named parameter storage with optimizer groups.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Optimizer group a parameter belongs to; each group has its own learning rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    Backbone,
    Transformer,
}

impl Group {
    pub fn label(self) -> &'static str {
        match self {
            Group::Backbone => "backbone",
            Group::Transformer => "transformer",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Group {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "backbone" => Ok(Group::Backbone),
            "transformer" => Ok(Group::Transformer),
            other => Err(Error::Parse(format!("unknown parameter group `{other}`"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Parameter<T: Scalar = f64> {
    pub name: String,
    pub value: Tensor<T>,
    pub group: Group,
    /// Frozen buffers (random projections, fixed tables) are stored alongside
    /// parameters but never receive gradients.
    pub trainable: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Gradients of the parameters bound in one graph, detached from it.
#[derive(Clone, Debug, Default)]
pub struct ParamGrads<T: Scalar = f64>(pub Vec<(ParamId, Vec<T>)>);

impl<T: Scalar> ParamGrads<T> {
    pub fn max_abs(&self) -> f64 {
        self.0
            .iter()
            .flat_map(|(_, g)| g.iter())
            .fold(0.0, |m, v| m.max(v.as_f64().abs()))
    }
}

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Scalar = f64> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    fn insert(&mut self, name: String, mut value: Tensor<T>, group: Group, trainable: bool) -> ParamId {
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        value.set_requires_grad(trainable);
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            value,
            group,
            trainable,
        });
        ParamId(id)
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, group: Group) -> ParamId {
        self.insert(name.into(), value, group, true)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>, group: Group) -> ParamId {
        self.insert(name.into(), value, group, false)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    /// Overwrites the value of `id`, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::shapes("param set", p.value.shape(), value.shape()));
        }
        let rg = p.value.requires_grad();
        p.value = value;
        p.value.set_requires_grad(rg);
        Ok(())
    }

    /// Sets every parameter whose name contains `pattern` to zero.
    pub fn zero_matching(&mut self, pattern: &str) -> usize {
        let mut n = 0;
        for p in self.params.iter_mut().filter(|p| p.name.contains(pattern)) {
            p.value.data_mut().iter_mut().for_each(|v| *v = T::zero());
            n += 1;
        }
        n
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.value.zero_grad();
        }
    }

    /// Adds extracted parameter gradients into each trainable parameter's slot.
    pub fn accumulate(&mut self, grads: &ParamGrads<T>) -> Result<()> {
        for (id, g) in &grads.0 {
            let p = &mut self.params[id.0];
            if p.trainable {
                p.value.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Order-sensitive checksum of all values in `group`.
    pub fn checksum(&self, group: Option<Group>) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in self.params.iter().filter(|p| group.is_none_or(|g| p.group == g)) {
            for v in p.value.data() {
                for b in v.as_f64().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }
}

/// Weight initializers.
pub mod init {
    use super::*;

    pub fn normal<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<T> {
        Tensor::from_fn(shape, |_| {
            let z: f64 = rng.sample(StandardNormal);
            T::lit(z * std)
        })
    }

    /// Normal with standard deviation `1/sqrt(fan_in)`.
    pub fn fan_in<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor<T> {
        normal(rng, shape, 1.0 / (fan_in.max(1) as f64).sqrt())
    }
}
