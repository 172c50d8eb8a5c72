use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{BatchNormStats, Parameter, Real, Tape, Tensor, Var};

/// Named learnable tensors in a fixed insertion order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T = f32> {
    names: Vec<String>,
    params: Vec<Parameter<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            names: Vec::new(),
            params: Vec::new(),
            index: HashMap::new(),
        }
    }
}

/// Tape handles of every parameter, in store order.
pub struct Bound {
    vars: Vec<Var>,
}

impl<T: Real> ParamStore<T> {
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter `{name}`")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.params.push(Parameter::new(value));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Parameter<T>> {
        self.position(name).map(|i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter<T>> {
        self.position(name).map(move |i| &mut self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter<T>)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    pub fn params_mut_named(&mut self) -> impl Iterator<Item = (&str, &mut Parameter<T>)> {
        self.names.iter().map(String::as_str).zip(self.params.iter_mut())
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        self.params.iter_mut().collect()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Places every parameter on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|p| tape.leaf(p.value.clone(), requires_grad))
                .collect(),
        }
    }

    pub fn var(&self, bound: &Bound, name: &str) -> Result<Var> {
        self.position(name)
            .map(|i| bound.vars[i])
            .ok_or_else(|| Error::config(format!("model has no parameter `{name}`")))
    }

    /// Adds the gradients the tape accumulated for `bound` onto the store.
    pub fn collect_grads(&mut self, tape: &Tape<T>, bound: &Bound) {
        for (p, &v) in self.params.iter_mut().zip(&bound.vars) {
            if let Some(g) = tape.grad(v) {
                p.accumulate(g);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }
}

/// Named batch-normalisation running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct StatStore<T = f32> {
    names: Vec<String>,
    stats: Vec<BatchNormStats<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> Default for StatStore<T> {
    fn default() -> Self {
        StatStore {
            names: Vec::new(),
            stats: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<T: Real> StatStore<T> {
    pub fn insert(&mut self, name: impl Into<String>, stats: BatchNormStats<T>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::config(format!("duplicate statistics `{name}`")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.stats.push(stats);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.stats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stats.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&BatchNormStats<T>> {
        self.index.get(name).map(|&i| &self.stats[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut BatchNormStats<T>> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.stats[i]),
            None => Err(Error::config(format!("model has no statistics `{name}`"))),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &BatchNormStats<T>)> {
        self.names.iter().map(String::as_str).zip(&self.stats)
    }
}
