use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use super::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Named trainable tensors. Iteration order is lexicographic by name, which
/// keeps every reduction over parameters deterministic.
///
/// Cloning is cheap: tensors are shared until an update replaces them.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Arc<Tensor>>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter `{name}`")));
        }
        self.tensors.insert(name, Arc::new(value));
        Ok(())
    }

    /// Replaces an existing tensor; the shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))?;
        if slot.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "set",
                lhs: slot.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        *slot = Arc::new(value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name).map(|t| t.as_ref())
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// Registers every tensor as a trainable leaf on `tape`.
    pub fn attach(&self, tape: &mut Tape) -> ParamVars {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| (k.clone(), tape.param(Arc::clone(v))))
            .collect();
        ParamVars { vars }
    }

    /// Hash over names, shapes and exact bit patterns.
    pub fn fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (name, t) in &self.tensors {
            name.hash(&mut h);
            t.shape().hash(&mut h);
            for v in t.data() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    /// Largest absolute elementwise difference to another set with the same layout.
    pub fn max_abs_diff(&self, other: &ParamSet) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for (name, t) in &self.tensors {
            let o = other.require(name)?;
            if o.shape() != t.shape() {
                return Err(Error::ShapeMismatch {
                    op: "max_abs_diff",
                    lhs: t.shape().to_vec(),
                    rhs: o.shape().to_vec(),
                });
            }
            for (a, b) in t.data().iter().zip(o.data()) {
                worst = worst.max((a - b).abs());
            }
        }
        if other.len() != self.len() {
            return Err(Error::invalid("parameter sets have different names"));
        }
        Ok(worst)
    }
}

/// Tape handles for each parameter of a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))
    }

    /// Gradients for every parameter, zero-filled where the loss did not reach.
    pub fn collect(&self, tape: &Tape, grads: &mut Gradients) -> Grads {
        let map = self
            .vars
            .iter()
            .map(|(name, &v)| {
                let g = grads
                    .take(v)
                    .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()));
                (name.clone(), g)
            })
            .collect();
        Grads { map }
    }
}

/// Named gradients aligned with a [`ParamSet`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Grads {
    map: BTreeMap<String, Tensor>,
}

impl Grads {
    pub fn zeros_like(params: &ParamSet) -> Self {
        let map = params
            .iter()
            .map(|(k, t)| (k.to_string(), Tensor::zeros(t.shape())))
            .collect();
        Self { map }
    }

    pub fn insert(&mut self, name: impl Into<String>, g: Tensor) {
        self.map.insert(name.into(), g);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// `self += other`, name by name.
    pub fn accumulate(&mut self, other: &Grads) -> Result<()> {
        for (name, g) in &other.map {
            match self.map.get_mut(name) {
                Some(existing) => {
                    if existing.shape() != g.shape() {
                        return Err(Error::ShapeMismatch {
                            op: "accumulate",
                            lhs: existing.shape().to_vec(),
                            rhs: g.shape().to_vec(),
                        });
                    }
                    existing.add_assign(g);
                }
                None => {
                    self.map.insert(name.clone(), g.clone());
                }
            }
        }
        Ok(())
    }

    pub fn scaled(&self, c: f64) -> Grads {
        let map = self
            .map
            .iter()
            .map(|(k, v)| (k.clone(), v.map(|x| x * c)))
            .collect();
        Grads { map }
    }

    pub fn max_abs(&self) -> f64 {
        self.map
            .values()
            .flat_map(|t| t.data().iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}
