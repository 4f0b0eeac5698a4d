use std::collections::BTreeMap;

use crate::backward::Gradients;
use crate::element::Element;
use crate::error::{AutodiffError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Named parameters with deterministic (lexicographic) iteration order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Element> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(AutodiffError::DuplicateParameter(name));
        }
        self.tensors.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| AutodiffError::MissingParameter(name.to_string()))
    }

    /// Replace a value, keeping the shape fixed.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| AutodiffError::MissingParameter(name.to_string()))?;
        if slot.shape() != value.shape() {
            return Err(AutodiffError::shape("set parameter", slot.shape(), value.shape()));
        }
        *slot = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Element>(&self) -> ParamSet<U> {
        ParamSet {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Same keys and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    /// Register every tensor as a gradient-carrying leaf.
    pub fn bind(&self, graph: &mut Graph<T>) -> BoundParams {
        self.bind_with(|t| graph.parameter(t.clone()))
    }

    /// Register every tensor as a constant (no gradient, zero tangent).
    pub fn bind_constant(&self, graph: &mut Graph<T>) -> BoundParams {
        self.bind_with(|t| graph.constant(t.clone()))
    }

    fn bind_with(&self, mut leaf: impl FnMut(&Tensor<T>) -> Var) -> BoundParams {
        BoundParams {
            vars: self.tensors.iter().map(|(k, v)| (k.clone(), leaf(v))).collect(),
        }
    }
}

/// Parameter name to graph handle, produced by [`ParamSet::bind`].
#[derive(Debug, Clone, Default)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| AutodiffError::MissingParameter(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Gradients keyed and shaped exactly like the [`ParamSet`] they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct GradSet<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Element> GradSet<T> {
    pub(crate) fn from_gradients(graph: &Graph<T>, bound: &BoundParams, grads: &Gradients<T>) -> Self {
        let tensors = bound
            .iter()
            .map(|(name, var)| {
                let g = grads
                    .get(var)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(graph.shape(var)));
                (name.to_string(), g)
            })
            .collect();
        GradSet { tensors }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| AutodiffError::MissingParameter(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Global L2 norm over every component.
    pub fn norm(&self) -> f64 {
        self.tensors.values().map(Tensor::sum_squares).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors.values().fold(0.0, |m, t| m.max(t.max_abs()))
    }

    /// True when keys and shapes match `params` exactly.
    pub fn mirrors(&self, params: &ParamSet<T>) -> bool {
        self.tensors.len() == params.len()
            && self
                .tensors
                .iter()
                .zip(params.iter())
                .all(|((k, g), (n, p))| k == n && g.shape() == p.shape())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique_and_sorted() {
        let mut p = ParamSet::<f32>::new();
        p.insert("b", Tensor::zeros(&[1])).unwrap();
        p.insert("a", Tensor::zeros(&[2])).unwrap();
        assert!(matches!(
            p.insert("a", Tensor::zeros(&[2])),
            Err(AutodiffError::DuplicateParameter(_))
        ));
        assert_eq!(p.names().collect::<Vec<_>>(), vec!["a", "b"]);
        assert_eq!(p.numel(), 3);
        assert!(p.set("a", Tensor::zeros(&[3])).is_err());
        assert!(p.get("zz").is_err());
    }
}
