use std::sync::Arc;

use indexmap::IndexMap;

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Named parameters (trainable) and buffers (running statistics) of one or
/// more networks. Iteration order is insertion order, which keeps
/// serialization and optimizer updates deterministic.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T> {
    params: IndexMap<String, Arc<Tensor<T>>>,
    buffers: IndexMap<String, Arc<Tensor<T>>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: IndexMap::new(),
            buffers: IndexMap::new(),
        }
    }

    pub fn insert_param(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.params.insert(name.into(), Arc::new(value));
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.buffers.insert(name.into(), Arc::new(value));
    }

    pub fn param(&self, name: &str) -> Result<&Arc<Tensor<T>>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor<T>> {
        self.buffers
            .get(name)
            .map(|b| b.as_ref())
            .ok_or_else(|| Error::invalid(format!("missing buffer `{name}`")))
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name).map(Arc::make_mut)
    }

    pub fn set_buffer(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = self
            .buffers
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("missing buffer `{name}`")))?;
        if slot.shape() != value.shape() {
            return Err(Error::shape(name, "buffer shape changed"));
        }
        *slot = Arc::new(value);
        Ok(())
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.params
            .iter_mut()
            .map(|(k, v)| (k.as_str(), Arc::make_mut(v)))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name) || self.buffers.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    /// Entries (params and buffers) whose names start with `prefix`.
    pub fn filter_prefix(&self, prefix: &str) -> ParamStore<T> {
        let keep = |m: &IndexMap<String, Arc<Tensor<T>>>| {
            m.iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect()
        };
        ParamStore {
            params: keep(&self.params),
            buffers: keep(&self.buffers),
        }
    }

    /// Appends every entry of `other`, replacing same-named entries.
    pub fn extend(&mut self, other: &ParamStore<T>) {
        for (k, v) in &other.params {
            self.params.insert(k.clone(), v.clone());
        }
        for (k, v) in &other.buffers {
            self.buffers.insert(k.clone(), v.clone());
        }
    }

    /// Overwrites existing entries with same-named entries of `source`,
    /// requiring identical shapes. Entries of `source` absent here are an
    /// error.
    pub fn load_from(&mut self, source: &ParamStore<T>) -> Result<()> {
        for (map, src) in [
            (&mut self.params, &source.params),
            (&mut self.buffers, &source.buffers),
        ] {
            for (k, v) in src {
                let slot = map.get_mut(k).ok_or_else(|| {
                    Error::IncompatibleCheckpoint(format!("unexpected entry `{k}`"))
                })?;
                if slot.shape() != v.shape() {
                    return Err(Error::IncompatibleCheckpoint(format!(
                        "`{k}` has shape {:?}, expected {:?}",
                        v.shape(),
                        slot.shape()
                    )));
                }
                *slot = v.clone();
            }
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let conv = |m: &IndexMap<String, Arc<Tensor<T>>>| {
            m.iter()
                .map(|(k, v)| (k.clone(), Arc::new(v.cast::<U>())))
                .collect()
        };
        ParamStore {
            params: conv(&self.params),
            buffers: conv(&self.buffers),
        }
    }

    /// Bitwise equality of the entries under `prefix` in both stores.
    pub fn same_prefix(&self, other: &ParamStore<T>, prefix: &str) -> bool {
        let (a, b) = (self.filter_prefix(prefix), other.filter_prefix(prefix));
        let same = |x: &IndexMap<String, Arc<Tensor<T>>>, y: &IndexMap<String, Arc<Tensor<T>>>| {
            x.len() == y.len()
                && x.iter().zip(y).all(|((ka, va), (kb, vb))| {
                    ka == kb
                        && va.shape() == vb.shape()
                        && va
                            .data()
                            .iter()
                            .zip(vb.data())
                            .all(|(p, q)| p.to_f64c().to_bits() == q.to_f64c().to_bits())
                })
        };
        same(&a.params, &b.params) && same(&a.buffers, &b.buffers)
    }
}
