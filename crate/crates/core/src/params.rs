//! Named parameter storage and graph binding.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Graph, Scalar, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Buffers (e.g. feature statistics) are persisted but never optimized.
    pub trainable: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.entries[i].value = value;
            self.entries[i].trainable = trainable;
        } else {
            self.index.insert(name.clone(), self.entries.len());
            self.entries.push(ParamEntry {
                name,
                value,
                trainable,
            });
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.entries[i].value)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.entries[i].value)
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn n_values(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    trainable: e.trainable,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Registers every entry as a graph leaf. With `train = false` all
    /// leaves are constants, so no gradient can reach the store.
    pub fn bind(&self, g: &mut Graph<T>, train: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|e| {
                if train && e.trainable {
                    g.param(e.value.clone())
                } else {
                    g.constant(e.value.clone())
                }
            })
            .collect();
        Bound {
            vars,
            index: self.index.clone(),
        }
    }

    /// He-style uniform initialization `U(-s, s)`, `s = gain * sqrt(3 / fan_in)`.
    pub fn init_uniform(
        &mut self,
        rng: &mut impl Rng,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        gain: f64,
    ) {
        let s = gain * (3.0 / fan_in.max(1) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64_lossy(rng.gen_range(-s..=s)))
            .collect();
        self.insert(name, Tensor::new(shape.to_vec(), data).unwrap(), true);
    }

    pub fn init_zeros(&mut self, name: impl Into<String>, shape: &[usize]) {
        self.insert(name, Tensor::zeros(shape.to_vec()), true);
    }
}

/// Graph handles for a [`ParamStore`], looked up by name.
pub struct Bound {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name}")))
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.index.get(name).map(|&i| self.vars[i])
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Finite-difference check of a scalar function of a whole parameter store:
/// each trainable entry is checked in turn with all others held constant.
/// Returns the worst relative error over every entry.
pub fn gradcheck_store<F>(store: &ParamStore<f64>, f: F, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &Bound) -> Result<Var>,
{
    let mut worst = 0.0f64;
    for (i, entry) in store.entries.iter().enumerate() {
        if !entry.trainable {
            continue;
        }
        let err = crate::numerics::finite_diff_check(
            |g, x| {
                let mut bound = store.bind(g, false);
                bound.vars[i] = x;
                f(g, &bound)
            },
            &entry.value,
            eps,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}
