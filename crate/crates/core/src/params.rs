//! Named, shaped parameter tensors with a stable flat layout.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::{Gradients, Tape, Tensor, Var};

/// Index of a parameter inside a [`ParameterStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Layout(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(ParamId(self.names.len() - 1))
    }

    pub fn insert_normal(
        &mut self,
        name: &str,
        shape: &[usize],
        std: f64,
        rng: &mut impl Rng,
    ) -> Result<ParamId> {
        let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(rng)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn insert_const(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        self.insert(name, Tensor::new(shape.to_vec(), vec![value; n])?)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| Error::Layout(format!("no parameter named {name}")))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.tensors.iter_mut().collect()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// All values concatenated in insertion order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.numel() {
            return Err(Error::Layout(format!(
                "flat vector of {} values for {} parameters",
                flat.len(),
                self.numel()
            )));
        }
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// `(name, offset, len)` for each parameter in the flat layout.
    pub fn layout(&self) -> Vec<(String, usize, usize)> {
        let mut off = 0;
        self.iter()
            .map(|(n, t)| {
                let entry = (n.to_string(), off, t.len());
                off += t.len();
                entry
            })
            .collect()
    }

    /// Rounds every value to 32-bit precision so the checkpoint format
    /// stores it losslessly.
    pub fn round_to_f32(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::round_to_f32);
    }

    /// Records every parameter on `tape`, trainable or constant.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        BoundParams { vars }
    }

    /// Gradients for every parameter, flattened in layout order.
    pub fn flat_gradient(&self, bound: &BoundParams, grads: &Gradients) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.numel());
        for (&v, t) in bound.vars.iter().zip(&self.tensors) {
            match grads.get_ref(v) {
                Some(g) => out.extend_from_slice(g.data()),
                None => out.extend(std::iter::repeat_n(0.0, t.len())),
            }
        }
        out
    }

    /// Gradients aligned with the stored tensors (original shapes).
    pub fn gradients(&self, bound: &BoundParams, grads: &Gradients) -> Vec<Tensor> {
        bound
            .vars
            .iter()
            .zip(&self.tensors)
            .map(|(&v, t)| match grads.get_ref(v) {
                Some(g) => Tensor::new(t.shape().to_vec(), g.data().to_vec()).expect("same size"),
                None => Tensor::zeros(t.shape()),
            })
            .collect()
    }
}

/// Tape handles for every parameter of a store.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut s = ParameterStore::new();
        s.insert_const("a", &[2], 1.0).unwrap();
        assert!(s.insert_const("a", &[2], 1.0).is_err());
    }

    #[test]
    fn flat_layout_round_trips() {
        let mut s = ParameterStore::new();
        s.insert_const("a", &[2, 2], 1.0).unwrap();
        s.insert_const("b", &[3], 2.0).unwrap();
        let mut flat = s.flatten();
        assert_eq!(flat.len(), 7);
        flat[5] = -4.0;
        s.set_flat(&flat).unwrap();
        assert_eq!(s.get(s.id("b").unwrap()).data(), &[2.0, -4.0, 2.0]);
        assert_eq!(s.layout()[1], ("b".to_string(), 4, 3));
    }
}
