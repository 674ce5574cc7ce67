use std::collections::HashMap;

use rand::Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to one entry of a [`ParameterSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Named learnable tensors with paired gradient buffers.
///
/// Entries keep insertion order, which is also the order used by
/// checkpoints and by the optimizer.
#[derive(Clone, Debug, Default)]
pub struct ParameterSet {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter `{name}`")));
        }
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.grads.push(Tensor::zeros(value.shape()));
        self.values.push(value);
        self.names.push(name);
        Ok(ParamId(id))
    }

    /// Inserts a tensor with entries drawn uniformly from `[-scale, scale]`.
    pub fn insert_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        scale: f64,
        rng: &mut R,
    ) -> Result<ParamId> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-scale..=scale)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn expect_id(&self, name: &str) -> Result<ParamId> {
        self.id(name)
            .ok_or_else(|| Error::contract(format!("no parameter named `{name}`")))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, delta: &[f64]) {
        for (g, d) in self.grads[id.0].data_mut().iter_mut().zip(delta) {
            *g += d;
        }
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            g.data_mut().fill(0.0);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn total_len(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Overwrites values from `(name, tensor)` pairs. Every entry of `self`
    /// must be present with a matching shape; extra entries are an error.
    pub fn load_entries(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        let mut seen = vec![false; self.len()];
        for (name, tensor) in entries {
            let id = self.id(name).ok_or_else(|| Error::CheckpointIncompatible {
                entry: name.clone(),
                detail: "not present in the model".into(),
            })?;
            let current = &self.values[id.0];
            if current.shape() != tensor.shape() {
                return Err(Error::CheckpointIncompatible {
                    entry: name.clone(),
                    detail: format!(
                        "model expects shape {:?}, checkpoint has {:?}",
                        current.shape(),
                        tensor.shape()
                    ),
                });
            }
            self.values[id.0] = tensor.clone();
            seen[id.0] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::CheckpointIncompatible {
                entry: self.names[missing].clone(),
                detail: "missing from checkpoint".into(),
            });
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(String, Tensor)> {
        self.iter().map(|(n, t)| (n.to_string(), t.clone())).collect()
    }

    /// Flattened copy of all values, in entry order.
    pub fn flat_values(&self) -> Vec<f64> {
        self.values.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn flat_grads(&self) -> Vec<f64> {
        self.grads.iter().flat_map(|t| t.data().iter().copied()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut p = ParameterSet::new();
        p.insert("w", Tensor::zeros(&[2])).unwrap();
        assert!(p.insert("w", Tensor::zeros(&[2])).is_err());
        assert_eq!(p.grad(p.id("w").unwrap()).shape(), &[2]);
    }

    #[test]
    fn load_reports_offending_entry() {
        let mut p = ParameterSet::new();
        p.insert("a", Tensor::zeros(&[2])).unwrap();
        p.insert("b", Tensor::zeros(&[3])).unwrap();
        let bad = vec![
            ("a".to_string(), Tensor::zeros(&[2])),
            ("b".to_string(), Tensor::zeros(&[4])),
        ];
        match p.load_entries(&bad) {
            Err(Error::CheckpointIncompatible { entry, .. }) => assert_eq!(entry, "b"),
            other => panic!("unexpected {other:?}"),
        }
        let missing = vec![("a".to_string(), Tensor::zeros(&[2]))];
        match p.load_entries(&missing) {
            Err(Error::CheckpointIncompatible { entry, .. }) => assert_eq!(entry, "b"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
