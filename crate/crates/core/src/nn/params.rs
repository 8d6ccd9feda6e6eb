use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Ordered, uniquely named parameter set. The name set is fixed once the
/// model is built; only values change afterwards.
#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    entries: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn insert(&mut self, name: String, value: Tensor<T>) -> Result<ParamId> {
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(Param { name, value });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.entries[i].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.entries[i].value)
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|p| p.name.as_str()).collect()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> u64 {
        self.entries.iter().map(|p| p.value.numel() as u64).sum()
    }

    /// Sum of parameter counts whose name starts with `prefix`.
    pub fn numel_with_prefix(&self, prefix: &str) -> u64 {
        self.entries
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.numel() as u64)
            .sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Puts every parameter on `tape`; trainable parameters receive
    /// gradients, frozen ones are constants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|p| {
                if trainable {
                    tape.param(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect();
        Bound { vars }
    }
}

/// Tape variables of a bound [`ParamStore`], in store order.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps variables already on a tape, in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Gaussian with std `sqrt(2 / fan_in)`.
    Kaiming {
        fan_in: usize,
    },
    Normal {
        std: f64,
    },
}

/// Builds a [`ParamStore`] under a stack of name scopes, drawing initial
/// values from one seeded stream in construction order.
pub struct Builder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
    prefix: Vec<String>,
    structural: bool,
}

impl<'a, T: Scalar> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: u64) -> Self {
        Self {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
            prefix: Vec::new(),
            structural: false,
        }
    }

    /// Skips value generation: every parameter is zero. For shape and
    /// cost queries only.
    pub fn structural(mut self) -> Self {
        self.structural = true;
        self
    }

    pub fn scoped<R>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<R>) -> Result<R> {
        self.prefix.push(name.to_string());
        let out = f(self);
        self.prefix.pop();
        out
    }

    /// Fully qualified name of `leaf` in the current scope.
    pub fn qualify(&self, leaf: &str) -> String {
        let mut parts = self.prefix.clone();
        if !leaf.is_empty() {
            parts.push(leaf.to_string());
        }
        parts.join(".")
    }

    pub fn param(&mut self, leaf: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        if self.structural {
            return self.store.insert(self.qualify(leaf), Tensor::zeros(shape));
        }
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Kaiming { fan_in } => self.normal(n, (2.0 / fan_in.max(1) as f64).sqrt()),
            Init::Normal { std } => self.normal(n, std),
        };
        let value = Tensor::from_f64(shape, &data)?;
        self.store.insert(self.qualify(leaf), value)
    }

    /// Mutable access to a parameter created by this builder.
    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.store.entries[id.0].value
    }

    fn normal(&mut self, n: usize, std: f64) -> Vec<f64> {
        let dist = Normal::new(0.0, std).expect("finite std");
        (0..n).map(|_| dist.sample(&mut self.rng)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_hierarchical_and_unique() {
        let mut store = ParamStore::<f64>::new();
        let mut b = Builder::new(&mut store, 0);
        b.scoped("encoder", |b| {
            b.scoped("stem", |b| b.param("weight", &[2, 2], Init::Zeros))
        })
        .unwrap();
        assert!(b
            .scoped("encoder", |b| b.scoped("stem", |b| b.param(
                "weight",
                &[1],
                Init::Zeros
            )))
            .is_err());
        assert_eq!(store.names(), vec!["encoder.stem.weight"]);
    }

    #[test]
    fn same_seed_same_values() {
        let build = || {
            let mut store = ParamStore::<f64>::new();
            let mut b = Builder::new(&mut store, 7);
            b.param("w", &[16], Init::Kaiming { fan_in: 4 }).unwrap();
            store
        };
        assert_eq!(build().get("w"), build().get("w"));
    }
}
