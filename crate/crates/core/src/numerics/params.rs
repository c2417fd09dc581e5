use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Grads, Graph, NumericsError, Scalar, Tensor, Var};

pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    /// Non-trainable state such as batch-norm running statistics.
    Buffer,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Constant(f64),
    /// `U(−b, b)` with `b = √(6 / fan_in)`.
    KaimingUniform { fan_in: usize },
}

#[derive(Debug, Clone)]
pub struct ParamEntry<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub kind: ParamKind,
}

/// Named parameters and buffers in registration order, initialized from a
/// seeded generator.
#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    index: BTreeMap<String, usize>,
    rng: ChaCha8Rng,
}

/// Graph variables of the trainable parameters for one forward pass.
pub struct BoundParams {
    vars: Vec<Option<Var>>,
}

impl BoundParams {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0].expect("trainable parameter is bound")
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        Self {
            entries: Vec::new(),
            index: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn insert(&mut self, name: &str, tensor: Tensor<T>, kind: ParamKind) -> Result<ParamId, NumericsError> {
        if self.index.contains_key(name) {
            return Err(NumericsError::DuplicateParam(name.to_string()));
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            tensor,
            kind,
        });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn add(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId, NumericsError> {
        let numel: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![T::zero(); numel],
            Init::Constant(c) => vec![T::from_f64_lossy(c); numel],
            Init::KaimingUniform { fan_in } => {
                let bound = (6.0 / fan_in.max(1) as f64).sqrt();
                (0..numel)
                    .map(|_| T::from_f64_lossy(self.rng.gen_range(-bound..bound)))
                    .collect()
            }
        };
        self.insert(name, Tensor::from_vec(shape, data)?, ParamKind::Trainable)
    }

    pub fn add_buffer(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId, NumericsError> {
        self.insert(name, Tensor::full(shape, T::from_f64_lossy(value)), ParamKind::Buffer)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.entries[id.0].kind
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.kind == ParamKind::Trainable)
            .map(|(i, _)| ParamId(i))
    }

    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Trainable)
            .map(|e| e.tensor.numel())
            .sum()
    }

    /// Binds every trainable parameter as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> BoundParams {
        self.bind_with(g, true)
    }

    /// Binds parameters as constants (inference without gradient tracking).
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> BoundParams {
        self.bind_with(g, false)
    }

    fn bind_with(&self, g: &mut Graph<T>, grad: bool) -> BoundParams {
        let vars = self
            .entries
            .iter()
            .map(|e| match e.kind {
                ParamKind::Trainable if grad => Some(g.leaf(e.tensor.clone())),
                ParamKind::Trainable => Some(g.input(e.tensor.clone())),
                ParamKind::Buffer => None,
            })
            .collect();
        BoundParams { vars }
    }

    /// Gradients of all trainable parameters, zero-filled where the loss
    /// does not depend on a parameter.
    pub fn collect_grads(&self, bound: &BoundParams, grads: &mut Grads<T>) -> Vec<(ParamId, Tensor<T>)> {
        self.trainable_ids()
            .map(|id| {
                let g = grads
                    .take(bound.var(id))
                    .unwrap_or_else(|| Tensor::zeros(self.get(id).shape()));
                (id, g)
            })
            .collect()
    }

    /// Blends batch statistics recorded during a training forward pass into
    /// the running-statistic buffers.
    pub fn apply_bn_updates(&mut self, g: &Graph<T>) {
        let m = BN_MOMENTUM;
        for u in &g.bn_updates {
            for (id, fresh) in [(u.mean_id, &u.mean), (u.var_id, &u.var)] {
                for (r, v) in self.entries[id.0].tensor.data_mut().iter_mut().zip(fresh) {
                    *r = T::from_f64_lossy((1.0 - m) * r.to_f64_lossy() + m * v);
                }
            }
        }
    }

    /// Copies tensors from `other` by name; shapes must agree.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<(), NumericsError> {
        for e in &mut self.entries {
            let src = other
                .id(&e.name)
                .ok_or_else(|| NumericsError::UnknownParam(e.name.clone()))?;
            let t = other.get(src);
            if t.shape() != e.tensor.shape() {
                return Err(super::shape_err(
                    "load_from",
                    format!("{}: {:?} vs {:?}", e.name, t.shape(), e.tensor.shape()),
                ));
            }
            e.tensor = t.clone();
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    tensor: e.tensor.cast(),
                    kind: e.kind,
                })
                .collect(),
            index: self.index.clone(),
            rng: self.rng.clone(),
        }
    }

    pub(crate) fn push_entry(&mut self, entry: ParamEntry<T>) -> Result<ParamId, NumericsError> {
        self.insert(&entry.name, entry.tensor, entry.kind)
    }
}
