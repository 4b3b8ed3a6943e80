use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Join a scope prefix and a local parameter name with a dot.
pub fn scoped(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Uniform samples in `[-bound, bound)`, drawn in f64 and cast so that f32
/// and f64 models built from one seed agree to rounding.
pub fn uniform<T: Real>(rng: &mut impl Rng, dims: &[usize], bound: f64) -> Result<Tensor<T>> {
    Tensor::from_fn(dims, |_| T::from_f64(rng.gen_range(-bound..bound)))
}

/// Named tensors in insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> Default for Params<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Params<T> {
    pub fn new() -> Self {
        Params {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::shape(format!("duplicate parameter `{name}`")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.index
            .get(name)
            .map(|&i| &self.tensors[i])
            .ok_or_else(|| Error::shape(format!("no parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.tensors[i]),
            None => Err(Error::shape(format!("no parameter `{name}`"))),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Scalar count of every parameter whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.len())
            .sum()
    }

    pub fn cast<U: Real>(&self) -> Params<U> {
        Params {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Copy every tensor under `other`'s names into `self` (prefixing each).
    pub fn extend_scoped(&mut self, prefix: &str, other: Params<T>) -> Result<()> {
        for (n, t) in other.names.into_iter().zip(other.tensors) {
            self.insert(scoped(prefix, &n), t)?;
        }
        Ok(())
    }

    /// Record every tensor on `tape`, as named trainable leaves or as
    /// constants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Result<Bindings> {
        let mut vars = BTreeMap::new();
        for (n, t) in self.iter() {
            let v = if trainable {
                tape.param(n, t.clone())?
            } else {
                tape.constant(t.clone())
            };
            vars.insert(n.to_string(), v);
        }
        Ok(Bindings { vars })
    }

    pub fn bit_eq(&self, other: &Params<T>) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.bit_eq(b))
    }
}

/// Parameter name to tape variable.
#[derive(Debug, Clone, Default)]
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl Bindings {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::shape(format!("parameter `{name}` not bound")))
    }

    pub fn scoped(&self, prefix: &str, name: &str) -> Result<Var> {
        self.get(&scoped(prefix, name))
    }

    pub fn optional(&self, prefix: &str, name: &str) -> Option<Var> {
        self.vars.get(&scoped(prefix, name)).copied()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn duplicate_names_rejected() {
        let mut p = Params::<f64>::new();
        p.insert("a", Tensor::scalar(1.0)).unwrap();
        assert!(p.insert("a", Tensor::scalar(2.0)).is_err());
        assert_eq!(p.count(), 1);
    }

    #[test]
    fn uniform_respects_bound_and_seed() {
        let mut r1 = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let mut r2 = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let a: Tensor<f64> = uniform(&mut r1, &[100], 0.3).unwrap();
        let b: Tensor<f64> = uniform(&mut r2, &[100], 0.3).unwrap();
        assert!(a.bit_eq(&b));
        assert!(a.data().iter().all(|v| v.abs() <= 0.3));
    }
}
