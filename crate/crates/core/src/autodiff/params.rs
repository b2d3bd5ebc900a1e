//! Named parameter slots, their graph bindings, and gradient maps.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Which side of the parameter partition a slot belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    /// Adapted per task by the inner loop (θ).
    Task,
    /// Held fixed during adaptation, meta-learned (φ).
    Warp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Slot {
    pub role: Role,
    pub value: Tensor,
}

/// Insertion-ordered map from slot identifier to tensor and role.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    slots: IndexMap<String, Slot>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, role: Role, value: Tensor) -> Result<()> {
        let id = id.into();
        if self.slots.contains_key(&id) {
            return Err(Error::DuplicateSlot(id));
        }
        self.slots.insert(id, Slot { role, value });
        Ok(())
    }

    pub fn get(&self, id: &str) -> Result<&Tensor> {
        self.slots
            .get(id)
            .map(|s| &s.value)
            .ok_or_else(|| Error::UnknownSlot(id.to_string()))
    }

    pub fn role(&self, id: &str) -> Result<Role> {
        self.slots
            .get(id)
            .map(|s| s.role)
            .ok_or_else(|| Error::UnknownSlot(id.to_string()))
    }

    /// Replaces a slot's value; the new value must keep the slot's shape.
    pub fn set(&mut self, id: &str, value: Tensor) -> Result<()> {
        let slot = self
            .slots
            .get_mut(id)
            .ok_or_else(|| Error::UnknownSlot(id.to_string()))?;
        if slot.value.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "set",
                lhs: slot.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        slot.value = value;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Slot)> {
        self.slots.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn ids_with_role(&self, role: Role) -> Vec<String> {
        self.slots
            .iter()
            .filter(|(_, s)| s.role == role)
            .map(|(k, _)| k.clone())
            .collect()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.slots.values().map(|s| s.value.numel()).sum()
    }

    /// Copies the values of `ids` from `other` into `self`.
    pub fn assign_from(&mut self, other: &ParamStore, ids: &[String]) -> Result<()> {
        for id in ids {
            self.set(id, other.get(id)?.clone())?;
        }
        Ok(())
    }

    /// Applies `value ← value + factor · delta[id]` for every slot present in `delta`.
    pub fn add_scaled(&mut self, delta: &GradMap, factor: f64) -> Result<()> {
        for (id, d) in delta.iter() {
            let updated = self.get(id)?.axpy(factor, d)?;
            self.set(id, updated)?;
        }
        Ok(())
    }

    /// Binds every slot as a differentiable leaf of `graph`.
    pub fn bind<'g>(&self, graph: &'g Graph) -> ParamVars<'g> {
        ParamVars {
            vars: self
                .slots
                .iter()
                .map(|(k, s)| (k.clone(), graph.leaf(s.value.clone())))
                .collect(),
        }
    }

    /// Flattened values of `ids`, in order.
    pub fn flatten(&self, ids: &[String]) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for id in ids {
            out.extend_from_slice(self.get(id)?.data());
        }
        Ok(out)
    }
}

/// Graph variables standing in for parameter slots.
#[derive(Clone, Debug)]
pub struct ParamVars<'g> {
    vars: IndexMap<String, Var<'g>>,
}

impl<'g> ParamVars<'g> {
    pub fn get(&self, id: &str) -> Result<Var<'g>> {
        self.vars
            .get(id)
            .copied()
            .ok_or_else(|| Error::UnknownSlot(id.to_string()))
    }

    /// Rebinds a slot to a different variable (for example an updated θ).
    pub fn replace(&mut self, id: &str, var: Var<'g>) -> Result<()> {
        match self.vars.get_mut(id) {
            Some(v) => {
                *v = var;
                Ok(())
            }
            None => Err(Error::UnknownSlot(id.to_string())),
        }
    }

    pub fn select(&self, ids: &[String]) -> Result<Vec<Var<'g>>> {
        ids.iter().map(|id| self.get(id)).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var<'g>)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Gradient (or any per-slot tensor) keyed by slot identifier.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GradMap {
    entries: IndexMap<String, Tensor>,
}

impl GradMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_pairs(ids: &[String], grads: Vec<Tensor>) -> Self {
        Self {
            entries: ids.iter().cloned().zip(grads).collect(),
        }
    }

    /// Zero tensors shaped like the `ids` slots of `store`.
    pub fn zeros_like(store: &ParamStore, ids: &[String]) -> Result<Self> {
        let mut entries = IndexMap::new();
        for id in ids {
            entries.insert(id.clone(), Tensor::zeros(store.get(id)?.shape().to_vec()));
        }
        Ok(Self { entries })
    }

    pub fn get(&self, id: &str) -> Option<&Tensor> {
        self.entries.get(id)
    }

    pub fn insert(&mut self, id: impl Into<String>, value: Tensor) {
        self.entries.insert(id.into(), value);
    }

    pub fn ids(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `self += factor · other`, inserting missing entries.
    pub fn accumulate(&mut self, other: &GradMap, factor: f64) -> Result<()> {
        for (id, g) in other.iter() {
            let updated = match self.entries.get(id) {
                Some(acc) => acc.axpy(factor, g)?,
                None => Tensor::zeros(g.shape().to_vec()).axpy(factor, g)?,
            };
            self.entries.insert(id.to_string(), updated);
        }
        Ok(())
    }

    pub fn scaled(&self, factor: f64) -> GradMap {
        GradMap {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| {
                    let data = v.data().iter().map(|x| x * factor).collect();
                    (k.clone(), Tensor::new(v.shape().to_vec(), data).expect("same shape"))
                })
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.entries.values().all(Tensor::is_finite)
    }

    /// Concatenated values in entry order.
    pub fn flatten(&self) -> Vec<f64> {
        self.entries
            .values()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    pub fn dot(&self, other: &GradMap) -> f64 {
        self.iter()
            .filter_map(|(k, v)| other.get(k).map(|o| v.dot(o)))
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }
}
