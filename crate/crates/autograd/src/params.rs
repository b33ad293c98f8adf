use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::{Float, Tensor};

/// Handle to one parameter tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Optimization group tag. A tape only records gradients for the groups it
/// was opened with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Group(pub u8);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Constant(f64),
    Normal(f64),
    /// Kaiming-style uniform bound `gain / sqrt(fan_in)`.
    FanIn {
        fan_in: usize,
        gain: f64,
    },
}

#[derive(Clone, Debug)]
struct Entry<T> {
    name: String,
    group: Group,
    value: Tensor<T>,
}

/// Named parameter tensors. Model structs hold [`ParamId`]s into a store so
/// the same architecture can be materialized in any [`Float`] type.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Register a tensor. Panics on a duplicate name.
    pub fn insert(&mut self, name: impl Into<String>, group: Group, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        let id = ParamId(self.entries.len());
        self.index.insert(name.clone(), id);
        self.entries.push(Entry { name, group, value });
        id
    }

    /// Register a freshly initialized tensor. Values are drawn in f64 so
    /// stores of different precision built from the same RNG agree.
    pub fn init<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        group: Group,
        shape: &[usize],
        init: Init,
        rng: &mut R,
    ) -> ParamId {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Constant(c) => vec![c; n],
            Init::Normal(std) => (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    z * std
                })
                .collect(),
            Init::FanIn { fan_in, gain } => {
                let bound = gain / (fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            }
        };
        self.insert(name, group, Tensor::from_f64(shape, &data))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) {
        let entry = &mut self.entries[id.0];
        assert_eq!(entry.value.shape(), value.shape(), "shape change for {}", entry.name);
        entry.value = value;
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn group(&self, id: ParamId) -> Group {
        self.entries[id.0].group
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn num_scalars(&self, group: Option<Group>) -> usize {
        self.entries
            .iter()
            .filter(|e| group.is_none_or(|g| e.group == g))
            .map(|e| e.value.numel())
            .sum()
    }

    /// Copy of every tensor in `group`, in registration order.
    pub fn snapshot(&self, group: Group) -> Vec<Tensor<T>> {
        self.entries
            .iter()
            .filter(|e| e.group == group)
            .map(|e| e.value.clone())
            .collect()
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    group: e.group,
                    value: e.value.cast(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}
