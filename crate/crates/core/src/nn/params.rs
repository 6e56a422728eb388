use std::collections::BTreeMap;

use super::{Gradients, NnError, Real, Tape, Tensor, Var};

/// Named trainable tensors, iterated in name order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<F> {
    tensors: BTreeMap<String, Tensor<F>>,
}

/// Tape handles of a [`ParamSet`] recorded for one forward pass.
///
/// Every parameter is recorded exactly once, so branches that reuse it
/// (siamese towers) accumulate into the same gradient.
#[derive(Debug, Clone, Default)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var, NnError> {
        self.vars.get(name).copied().ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    pub fn extend(&mut self, other: BoundParams) {
        self.vars.extend(other.vars);
    }
}

impl<F: Real> ParamSet<F> {
    pub fn new() -> Self {
        Self { tensors: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<F>) {
        self.tensors.insert(name.into(), t.requiring_grad());
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<F>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<F>)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn bind(&self, tape: &mut Tape<F>) -> BoundParams {
        BoundParams { vars: self.tensors.iter().map(|(k, t)| (k.clone(), tape.leaf(t))).collect() }
    }

    /// Adds the tape gradients of every bound parameter into its tensor.
    pub fn accumulate(&mut self, grads: &Gradients<F>, bound: &BoundParams) -> Result<(), NnError> {
        for (name, t) in self.tensors.iter_mut() {
            let Some(&v) = bound.vars.get(name) else { continue };
            if let Some(g) = grads.get(v) {
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.tensors.values_mut().for_each(Tensor::zero_grad);
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    pub fn cast<G: Real>(&self) -> ParamSet<G> {
        ParamSet { tensors: self.tensors.iter().map(|(k, t)| (k.clone(), t.cast())).collect() }
    }
}
