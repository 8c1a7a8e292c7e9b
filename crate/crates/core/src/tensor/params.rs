use std::collections::{BTreeMap, HashMap};

use super::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Named tensors with a stable (lexicographic) iteration order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T: Real = f64> {
    tensors: BTreeMap<String, Tensor<T>>,
}

pub type Gradients<T> = BTreeMap<String, Vec<T>>;

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::Internal(format!(
                "parameter {name} registered twice"
            )));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Lookup(format!("no parameter named {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Lookup(format!("no parameter named {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.iter().filter(|(_, t)| t.requires_grad())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.values_mut().for_each(Tensor::zero_grad);
    }

    /// Adds `scale · g` into each named tensor's gradient accumulator.
    pub fn accumulate(&mut self, grads: &Gradients<T>, scale: T) -> Result<()> {
        for (name, g) in grads {
            let t = self.get_mut(name)?;
            if !t.requires_grad() {
                continue;
            }
            let scaled: Vec<T> = g.iter().map(|&v| v * scale).collect();
            t.accumulate_grad(&scaled)?;
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }
}

/// A tape plus lazily registered parameter leaves.
pub struct Graph<'a, T: Real = f64> {
    pub tape: Tape<'a, T>,
    store: &'a ParamStore<T>,
    bound: HashMap<&'a str, Var>,
}

impl<'a, T: Real> Graph<'a, T> {
    pub fn new(store: &'a ParamStore<T>) -> Self {
        Graph {
            tape: Tape::new(),
            store,
            bound: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    /// The tape node of a named parameter, registering it on first use.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let (key, tensor) = self
            .store
            .tensors
            .get_key_value(name)
            .ok_or_else(|| Error::Lookup(format!("no parameter named {name}")))?;
        let v = self.tape.leaf(tensor)?;
        self.bound.insert(key.as_str(), v);
        Ok(v)
    }

    /// Gradients of every bound trainable parameter after `backward`.
    pub fn gradients(&self) -> Gradients<T> {
        self.bound
            .iter()
            .filter_map(|(name, &v)| self.tape.grad(v).map(|g| (name.to_string(), g.to_vec())))
            .collect()
    }

    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        self.tape.backward(loss)?;
        Ok(self.gradients())
    }

    /// Runs `backward` and adds the parameter gradients into `acc`, reusing
    /// its buffers.
    pub fn accumulate_gradients(&mut self, loss: Var, acc: &mut Gradients<T>) -> Result<()> {
        let bound: Vec<(&'a str, Var)> = self.bound.iter().map(|(&k, &v)| (k, v)).collect();
        let seeds = bound
            .iter()
            .filter(|&&(_, v)| self.tape.requires_grad(v))
            .filter_map(|&(name, v)| acc.remove(name).map(|buf| (v, buf)))
            .collect();
        self.tape.backward_seeded(loss, seeds)?;
        for (name, v) in bound {
            if let Some(g) = self.tape.take_grad(v) {
                acc.insert(name.to_string(), g);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn graph_binds_each_param_once() {
        let mut store = ParamStore::<f64>::new();
        store
            .insert(
                "w",
                Tensor::from_vec(vec![2], vec![1.0, 2.0])
                    .unwrap()
                    .with_requires_grad(true),
            )
            .unwrap();
        store
            .insert("frozen", Tensor::from_vec(vec![2], vec![3.0, 4.0]).unwrap())
            .unwrap();
        let mut g = Graph::new(&store);
        let w1 = g.param("w").unwrap();
        let w2 = g.param("w").unwrap();
        assert_eq!(w1, w2);
        let f = g.param("frozen").unwrap();
        let prod = g.tape.mul(w1, f).unwrap();
        let s = g.tape.sum(prod).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.len(), 1);
        assert_eq!(grads["w"], vec![3.0, 4.0]);
        assert!(g.param("missing").is_err());
    }
}
