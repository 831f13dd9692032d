use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{contract, Error, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors in registration order.
///
/// Buffers (batch-norm running statistics) live here too; they are
/// simply never marked trainable.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.iter()
            .filter(move |(_, n, _)| n.starts_with(prefix))
            .map(|(id, _, _)| id)
    }

    /// Replaces every tensor with the same-named tensor in `other`.
    /// Names and shapes must match exactly.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        for (i, name) in self.names.iter().enumerate() {
            let j = other
                .find(name)
                .ok_or_else(|| contract(alloc::format!("missing parameter {name}")))?;
            let src = other.get(j);
            if src.shape() != self.tensors[i].shape() {
                return Err(crate::error::dim_err(
                    "load_from",
                    self.tensors[i].shape(),
                    src.shape(),
                ));
            }
            self.tensors[i] = src.clone();
        }
        Ok(())
    }

    /// Copies parameters whose names exist in `other`; returns the count.
    pub fn load_matching(&mut self, other: &ParamStore) -> Result<usize> {
        let mut n = 0;
        for (i, name) in self.names.iter().enumerate() {
            if let Some(j) = other.find(name) {
                let src = other.get(j);
                if src.shape() != self.tensors[i].shape() {
                    return Err(crate::error::dim_err(
                        "load_matching",
                        self.tensors[i].shape(),
                        src.shape(),
                    ));
                }
                self.tensors[i] = src.clone();
                n += 1;
            }
        }
        Ok(n)
    }
}

/// Per-parameter trainability mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trainable(Vec<bool>);

impl Trainable {
    pub fn none(store: &ParamStore) -> Self {
        Self(vec![false; store.len()])
    }

    pub fn all(store: &ParamStore) -> Self {
        Self(vec![true; store.len()])
    }

    pub fn with(mut self, ids: impl IntoIterator<Item = ParamId>) -> Self {
        for id in ids {
            self.0[id.0] = true;
        }
        self
    }

    pub fn without(mut self, ids: impl IntoIterator<Item = ParamId>) -> Self {
        for id in ids {
            self.0[id.0] = false;
        }
        self
    }

    pub fn contains(&self, id: ParamId) -> bool {
        self.0.get(id.0).copied().unwrap_or(false)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.0
            .iter()
            .enumerate()
            .filter(|(_, &t)| t)
            .map(|(i, _)| ParamId(i))
    }
}

/// Forward-pass context: a tape plus lazily bound parameters.
pub struct Graph<'s> {
    pub tape: Tape,
    store: &'s ParamStore,
    trainable: Option<&'s Trainable>,
    bound: Vec<Option<Var>>,
    training: bool,
    buffer_updates: Vec<(ParamId, Tensor)>,
}

impl<'s> Graph<'s> {
    /// Evaluation mode: no parameter requires gradients.
    pub fn inference(store: &'s ParamStore) -> Self {
        Self {
            tape: Tape::new(),
            store,
            trainable: None,
            bound: vec![None; store.len()],
            training: false,
            buffer_updates: Vec::new(),
        }
    }

    /// Training mode: parameters in `trainable` are gradient leaves.
    pub fn training(store: &'s ParamStore, trainable: &'s Trainable) -> Self {
        Self {
            tape: Tape::new(),
            store,
            trainable: Some(trainable),
            bound: vec![None; store.len()],
            training: true,
            buffer_updates: Vec::new(),
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let t = self.store.get(id).clone();
        let v = if self.trainable.is_some_and(|tr| tr.contains(id)) {
            self.tape.leaf(t)
        } else {
            self.tape.constant(t)
        };
        self.bound[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    /// Records a buffer value to write back after the step (running stats).
    pub fn push_buffer_update(&mut self, id: ParamId, t: Tensor) {
        self.buffer_updates.push((id, t));
    }

    pub fn take_buffer_updates(&mut self) -> Vec<(ParamId, Tensor)> {
        core::mem::take(&mut self.buffer_updates)
    }

    /// Gradients for every bound trainable parameter.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(ParamId, Tensor)> {
        let Some(tr) = self.trainable else {
            return Vec::new();
        };
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
            .filter(|(id, _)| tr.contains(*id))
            .map(|(id, v)| (id, grads.wrt(&self.tape, v)))
            .collect()
    }
}

/// Sums per-sample parameter gradients over a batch.
#[derive(Debug, Default)]
pub struct GradAccumulator {
    sums: Vec<Option<Tensor>>,
    samples: usize,
}

impl GradAccumulator {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            sums: vec![None; store.len()],
            samples: 0,
        }
    }

    pub fn add(&mut self, grads: Vec<(ParamId, Tensor)>) {
        for (id, g) in grads {
            match &mut self.sums[id.0] {
                Some(s) => s
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        }
        self.samples += 1;
    }

    /// Mean gradient per parameter.
    pub fn mean(self) -> Vec<(ParamId, Tensor)> {
        let n = self.samples.max(1) as f64;
        self.sums
            .into_iter()
            .enumerate()
            .filter_map(|(i, s)| s.map(|t| (ParamId(i), t.map(|v| v / n))))
            .collect()
    }
}

/// First-order optimizers over a [`ParamStore`].
#[derive(Clone, Debug)]
pub enum Optimizer {
    /// Momentum-free gradient descent.
    Sgd {
        lr: f64,
    },
    Adam(Adam),
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Option<Vec<f64>>>,
    v: Vec<Option<Vec<f64>>>,
}

impl Optimizer {
    pub fn sgd(lr: f64) -> Self {
        Optimizer::Sgd { lr }
    }

    pub fn adam(lr: f64) -> Self {
        Optimizer::Adam(Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)]) -> Result<()> {
        self.step_scaled(store, grads, |_| 1.0)
    }

    /// Like [`Optimizer::step`] with a per-parameter learning-rate multiplier.
    pub fn step_scaled(
        &mut self,
        store: &mut ParamStore,
        grads: &[(ParamId, Tensor)],
        lr_scale: impl Fn(ParamId) -> f64,
    ) -> Result<()> {
        if grads.iter().any(|(_, g)| !g.all_finite()) {
            return Err(Error::NonFinite("optimizer gradient"));
        }
        match self {
            Optimizer::Sgd { lr } => {
                for (id, g) in grads {
                    let lr = *lr * lr_scale(*id);
                    let p = store.get_mut(*id);
                    p.data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .for_each(|(w, d)| *w -= lr * d);
                }
            }
            Optimizer::Adam(a) => {
                if a.m.len() < store.len() {
                    a.m.resize(store.len(), None);
                    a.v.resize(store.len(), None);
                }
                a.step += 1;
                let bc1 = 1.0 - libm::pow(a.beta1, a.step as f64);
                let bc2 = 1.0 - libm::pow(a.beta2, a.step as f64);
                for (id, g) in grads {
                    let lr = a.lr * lr_scale(*id);
                    let n = g.len();
                    let m = a.m[id.0].get_or_insert_with(|| vec![0.0; n]);
                    let v = a.v[id.0].get_or_insert_with(|| vec![0.0; n]);
                    let p = store.get_mut(*id).data_mut();
                    for k in 0..n {
                        let d = g.data()[k];
                        m[k] = a.beta1 * m[k] + (1.0 - a.beta1) * d;
                        v[k] = a.beta2 * v[k] + (1.0 - a.beta2) * d * d;
                        let mh = m[k] / bc1;
                        let vh = v[k] / bc2;
                        p[k] -= lr * mh / (libm::sqrt(vh) + a.eps);
                    }
                }
            }
        }
        Ok(())
    }
}
