use std::collections::BTreeMap;

use crate::element::Element;
use crate::error::{NumericsError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
struct Entry<F: Element> {
    tensor: Tensor<F>,
    trainable: bool,
}

/// Named parameters with a per-name trainable mask.
///
/// Iteration order is the lexical order of names, which keeps checkpoints
/// and optimizer updates deterministic.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<F: Element = f32> {
    entries: BTreeMap<String, Entry<F>>,
}

impl<F: Element> ParamSet<F> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<F>, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(NumericsError::DuplicateParam(name));
        }
        self.entries.insert(name, Entry { tensor, trainable });
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<F>> {
        self.entries
            .get(name)
            .map(|e| &e.tensor)
            .ok_or_else(|| NumericsError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<F>> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.tensor)
            .ok_or_else(|| NumericsError::UnknownParam(name.to_string()))
    }

    pub fn is_trainable(&self, name: &str) -> Result<bool> {
        self.entries
            .get(name)
            .map(|e| e.trainable)
            .ok_or_else(|| NumericsError::UnknownParam(name.to_string()))
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        self.entries
            .get_mut(name)
            .map(|e| e.trainable = trainable)
            .ok_or_else(|| NumericsError::UnknownParam(name.to_string()))
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        self.entries.values_mut().for_each(|e| e.trainable = trainable);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count across all parameters.
    pub fn num_values(&self) -> usize {
        self.entries.values().map(|e| e.tensor.numel()).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>, bool)> {
        self.entries
            .iter()
            .map(|(k, e)| (k.as_str(), &e.tensor, e.trainable))
    }

    pub(crate) fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<F>, bool)> {
        self.entries
            .iter_mut()
            .map(|(k, e)| (k.as_str(), &mut e.tensor, e.trainable))
    }

    /// Clears every gradient buffer.
    pub fn zero_grad(&mut self) {
        for e in self.entries.values_mut() {
            e.tensor
                .set_grad(None)
                .expect("clearing a gradient cannot fail");
        }
    }

    /// Adds `grad` into the named parameter's gradient buffer.
    pub fn accumulate_grad(&mut self, name: &str, grad: &[F]) -> Result<()> {
        let t = self.get_mut(name)?;
        if grad.len() != t.numel() {
            return Err(NumericsError::ShapeMismatch {
                op: "accumulate_grad",
                lhs: t.shape().to_vec(),
                rhs: vec![grad.len()],
            });
        }
        t.accumulate_grad(grad);
        Ok(())
    }

    /// Gives every trainable parameter without a gradient a zero gradient.
    pub fn ensure_trainable_grads(&mut self) {
        for e in self.entries.values_mut() {
            if e.trainable && e.tensor.grad().is_none() {
                let zeros = vec![F::zero(); e.tensor.numel()];
                e.tensor.set_grad(Some(zeros)).expect("same length");
            }
        }
    }

    /// Copy in another element type; the trainable mask is kept, gradients are not.
    pub fn cast<G: Element>(&self) -> ParamSet<G> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| {
                    (
                        k.clone(),
                        Entry {
                            tensor: e.tensor.cast(),
                            trainable: e.trainable,
                        },
                    )
                })
                .collect(),
        }
    }

    /// True when every parameter's values are bitwise equal in both sets.
    pub fn bit_identical(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().all(|(k, e)| {
                other.entries.get(k).is_some_and(|o| {
                    o.tensor.shape() == e.tensor.shape()
                        && o
                            .tensor
                            .data()
                            .iter()
                            .zip(e.tensor.data())
                            .all(|(a, b)| a.to_f64().map(f64::to_bits) == b.to_f64().map(f64::to_bits))
                })
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ParamSet::<f32>::new();
        p.insert("w", Tensor::zeros([2]), true).unwrap();
        assert!(matches!(
            p.insert("w", Tensor::zeros([2]), true),
            Err(NumericsError::DuplicateParam(_))
        ));
        assert!(p.get("missing").is_err());
    }

    #[test]
    fn ensure_grads_only_touches_trainable() {
        let mut p = ParamSet::<f32>::new();
        p.insert("a", Tensor::zeros([3]), true).unwrap();
        p.insert("b", Tensor::zeros([3]), false).unwrap();
        p.ensure_trainable_grads();
        assert_eq!(p.get("a").unwrap().grad(), Some(&[0.0f32; 3][..]));
        assert!(p.get("b").unwrap().grad().is_none());
    }
}
