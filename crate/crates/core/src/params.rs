//! Named parameter arrays shared by every trainable module.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{AstraError, Result};
use crate::float::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    frozen: Vec<bool>,
    index: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), values: Vec::new(), frozen: Vec::new(), index: HashMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        self.frozen.push(false);
        id
    }

    /// Gaussian init with the given standard deviation.
    pub fn normal(&mut self, name: impl Into<String>, rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> ParamId {
        let dist = Normal::new(0.0, std).expect("finite std");
        let t = Tensor::from_fn(rows, cols, |_, _| T::c(dist.sample(rng)));
        self.insert(name, t)
    }

    /// Fan-in scaled init for a `fan_in x fan_out` weight.
    pub fn linear_weight(&mut self, name: impl Into<String>, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> ParamId {
        self.normal(name, fan_in, fan_out, (1.0 / fan_in as f64).sqrt(), rng)
    }

    pub fn zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.insert(name, Tensor::zeros(rows, cols))
    }

    pub fn ones(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.insert(name, Tensor::full(rows, cols, T::one()))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn require(&self, name: &str) -> Result<ParamId> {
        self.id(name).ok_or_else(|| AstraError::Missing(format!("parameter {name}")))
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.ids().map(move |id| (id, self.names[id.0].as_str(), &self.values[id.0]))
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.frozen[id.0]
    }

    /// Freezes (or unfreezes) every parameter whose name starts with `prefix`.
    pub fn set_frozen_prefix(&mut self, prefix: &str, frozen: bool) {
        for (i, name) in self.names.iter().enumerate() {
            if name.starts_with(prefix) {
                self.frozen[i] = frozen;
            }
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Converts every array to another precision, keeping names and order.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (i, name) in self.names.iter().enumerate() {
            let v = &self.values[i];
            let data = v.data().iter().map(|x| U::c(x.f64())).collect();
            out.insert(name.clone(), Tensor::from_vec(v.rows(), v.cols(), data));
            out.frozen[i] = self.frozen[i];
        }
        out
    }

    /// Copies values for every name also present in `other` (shapes must agree).
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<usize> {
        let mut n = 0;
        for (i, name) in self.names.iter().enumerate() {
            if let Some(src) = other.id(name) {
                let src = other.value(src);
                if src.shape() != self.values[i].shape() {
                    return Err(AstraError::Shape(format!(
                        "parameter {name}: expected {:?}, found {:?}",
                        self.values[i].shape(),
                        src.shape()
                    )));
                }
                self.values[i] = src.clone();
                n += 1;
            }
        }
        Ok(n)
    }
}

/// Sinusoidal 2-D table over a `side x side` lattice; half the channels encode
/// the column, half the row. Used to initialize learned positional tables.
pub fn sincos_2d<T: Real>(side: usize, dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let quarter = (half / 2).max(1);
    Tensor::from_fn(side * side, dim, |p, c| {
        let (col, row) = ((p % side) as f64, (p / side) as f64);
        let (coord, c) = if c < half { (col, c) } else { (row, c - half) };
        let i = c % quarter;
        let freq = 1.0 / 10000f64.powf(i as f64 / quarter as f64);
        let v = if c < quarter { (coord * freq).sin() } else { (coord * freq).cos() };
        T::c(v)
    })
}
