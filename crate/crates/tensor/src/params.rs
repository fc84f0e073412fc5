use std::collections::HashMap;

use crate::{Result, Tape, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// `None` until the parameter has appeared on a tape that was
    /// back-propagated and folded in with [`ParamStore::accumulate`].
    pub grad: Option<Vec<f64>>,
    pub trainable: bool,
}

/// Named parameters in registration order. Registration order is also the
/// checkpoint order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.insert(name.into(), value, true)
    }

    pub fn add_frozen(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.insert(name.into(), value, false)
    }

    fn insert(&mut self, name: String, value: Tensor, trainable: bool) -> ParamId {
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name `{name}`"
        );
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            grad: None,
            trainable,
        });
        id
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param)> {
        self.params
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Adds the gradients recorded on `tape` into each parameter's grad
    /// buffer. A parameter that was on the tape but unreachable from the loss
    /// receives an explicit zero gradient.
    pub fn accumulate(&mut self, tape: &Tape) {
        for (id, var) in tape.param_vars() {
            let p = &mut self.params[id.0];
            if !p.trainable {
                continue;
            }
            let grad = p.grad.get_or_insert_with(|| vec![0.0; p.value.numel()]);
            if let Some(g) = tape.grad(var) {
                for (acc, x) in grad.iter_mut().zip(g) {
                    *acc += x;
                }
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Global L2 norm over all trainable gradients present.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .filter_map(|p| p.grad.as_ref())
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    /// Overwrites parameter values from another store with identical layout.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(TensorError::Contract(format!(
                "parameter count mismatch: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(TensorError::Contract(format!(
                    "parameter layout mismatch at `{}` {:?} vs `{}` {:?}",
                    dst.name,
                    dst.value.shape(),
                    src.name,
                    src.value.shape()
                )));
            }
            dst.value = src.value.clone();
        }
        Ok(())
    }
}
