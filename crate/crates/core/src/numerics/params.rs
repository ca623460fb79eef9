use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
struct Entry<R> {
    name: String,
    value: Tensor<R>,
    grad: Tensor<R>,
}

/// Named parameters plus a gradient accumulator per parameter.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<R> {
    entries: Vec<Entry<R>>,
    index: BTreeMap<String, usize>,
}

impl<R: Real> ParamStore<R> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<R>) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate parameter name {name}")));
        }
        let idx = self.entries.len();
        let grad = Tensor::zeros(value.shape());
        self.index.insert(name.clone(), idx);
        self.entries.push(Entry { name, value, grad });
        Ok(idx)
    }

    /// Gaussian init with the given standard deviation.
    pub fn insert_normal(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut impl Rng,
    ) -> Result<usize> {
        let n: usize = shape.iter().product();
        let data = if std == 0.0 {
            vec![R::zero(); n]
        } else {
            let normal = Normal::new(0.0, std).map_err(|e| Error::Domain(e.to_string()))?;
            (0..n).map(|_| R::lit(normal.sample(rng))).collect()
        };
        self.insert(name, Tensor::new(shape, data)?)
    }

    pub fn insert_const(&mut self, name: impl Into<String>, shape: &[usize], v: f64) -> Result<usize> {
        self.insert(name, Tensor::full(shape, R::lit(v)))
    }

    pub fn lookup(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<R>> {
        self.lookup(name).map(|i| &self.entries[i].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<R>> {
        self.lookup(name).map(move |i| &mut self.entries[i].value)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor<R>> {
        self.lookup(name).map(|i| &self.entries[i].grad)
    }

    pub fn value(&self, idx: usize) -> &Tensor<R> {
        &self.entries[idx].value
    }

    pub fn value_mut(&mut self, idx: usize) -> &mut Tensor<R> {
        &mut self.entries[idx].value
    }

    pub fn grad_at(&self, idx: usize) -> &Tensor<R> {
        &self.entries[idx].grad
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.entries[idx].name
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Parameter names in insertion order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad.data_mut().iter_mut().for_each(|g| *g = R::zero());
        }
    }

    pub fn accumulate(&mut self, idx: usize, grad: &Tensor<R>) -> Result<()> {
        let e = &mut self.entries[idx];
        if e.grad.shape() != grad.shape() {
            return crate::error::shape_err("accumulate", e.grad.shape(), grad.shape());
        }
        e.grad.add_assign(grad);
        Ok(())
    }

    pub fn grad_mut(&mut self, idx: usize) -> &mut Tensor<R> {
        &mut self.entries[idx].grad
    }

    pub fn cast<S: Real>(&self) -> ParamStore<S> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    grad: e.grad.cast(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Copies every parameter of `other` in, overwriting same-named values.
    pub fn absorb(&mut self, other: &ParamStore<R>) -> Result<()> {
        for e in &other.entries {
            match self.lookup(&e.name) {
                Some(i) => self.entries[i].value = e.value.clone(),
                None => {
                    self.insert(e.name.clone(), e.value.clone())?;
                }
            }
        }
        Ok(())
    }

    /// Bitwise equality of every parameter value restricted to `prefix`.
    pub fn same_values(&self, other: &ParamStore<R>, prefix: &str) -> bool {
        let mine: Vec<_> = self
            .entries
            .iter()
            .filter(|e| e.name.starts_with(prefix))
            .collect();
        mine.iter().all(|e| {
            other
                .get(&e.name)
                .is_some_and(|v| v.shape() == e.value.shape() && bit_equal(v.data(), e.value.data()))
        }) && other.names().filter(|n| n.starts_with(prefix)).count() == mine.len()
    }
}

fn bit_equal<R: Real>(a: &[R], b: &[R]) -> bool {
    a.len() == b.len()
        && a
            .iter()
            .zip(b)
            .all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits())
}
