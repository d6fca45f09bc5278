//! Named parameter storage with matching gradient buffers.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{read_fmt, write_fmt, Scalar, Tensor};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

const INDEX_FILE: &str = "params.index";

#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    grads: Vec<Tensor<T>>,
    lookup: HashMap<String, ParamId>,
    grads_ready: bool,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            lookup: HashMap::new(),
            grads_ready: false,
        }
    }

    /// Registers a parameter. Names are hierarchical (`stage1.fusion.conv_o.w`)
    /// and must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.lookup.contains_key(&name) {
            return Err(Error::Usage(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.values.len());
        self.grads.push(value.zeros_like());
        self.values.push(value);
        self.names.push(name.clone());
        self.lookup.insert(name, id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.grads[id.0]
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(Error::dim("set_value", self.values[id.0].shape(), value.shape()));
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
        self.grads_ready = false;
    }

    /// Adds `grad` into the gradient buffer of `id`.
    pub fn accumulate_grad(&mut self, id: ParamId, grad: &Tensor<T>) -> Result<()> {
        let dst = &mut self.grads[id.0];
        if dst.shape() != grad.shape() {
            return Err(Error::dim("accumulate_grad", dst.shape(), grad.shape()));
        }
        for (d, &g) in dst.data_mut().iter_mut().zip(grad.data()) {
            *d = *d + g;
        }
        Ok(())
    }

    /// Marks the gradient buffers as holding a complete backward result.
    pub fn mark_grads_ready(&mut self) {
        self.grads_ready = true;
    }

    pub fn grads_ready(&self) -> bool {
        self.grads_ready
    }

    pub(crate) fn values_and_grads_mut(&mut self) -> (&mut [Tensor<T>], &[Tensor<T>]) {
        (&mut self.values, &self.grads)
    }

    /// Writes every parameter as `<name>.fmt` plus an ordered name index.
    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut index = String::new();
        for (name, value) in self.names.iter().zip(&self.values) {
            write_fmt(dir.join(format!("{name}.fmt")), value)?;
            index.push_str(name);
            index.push('\n');
        }
        fs::write(dir.join(INDEX_FILE), index)?;
        Ok(())
    }

    /// Loads a store written by [`ParamStore::save_dir`], preserving order.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let index = fs::read_to_string(dir.join(INDEX_FILE))?;
        let mut store = Self::new();
        for name in index.lines().filter(|l| !l.is_empty()) {
            let t = read_fmt::<T>(dir.join(format!("{name}.fmt")))?;
            store.add(name, t)?;
        }
        Ok(store)
    }

    /// Overwrites values from `other`, which must have identical names and shapes.
    pub fn copy_values_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Usage("parameter layouts differ".into()));
        }
        for (dst, src) in self.values.iter_mut().zip(&other.values) {
            if dst.shape() != src.shape() {
                return Err(Error::dim("copy_values_from", dst.shape(), src.shape()));
            }
            *dst = src.clone();
        }
        Ok(())
    }

    /// Converts every tensor to another scalar type, keeping names and order.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (name, v) in self.names.iter().zip(&self.values) {
            out.add(name.clone(), v.cast()).expect("names already unique");
        }
        out
    }
}

/// Kaiming-uniform weights with unit gain: `U(-sqrt(3 / fan_in), sqrt(3 / fan_in))`.
pub fn kaiming_uniform<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Result<Tensor<T>> {
    let bound = (3.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64_lossy(rng.random_range(-bound..=bound)))
        .collect();
    Tensor::from_vec(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_xoshiro::Xoshiro256PlusPlus;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.add("a", Tensor::zeros(&[2]).unwrap()).unwrap();
        assert!(s.add("a", Tensor::zeros(&[2]).unwrap()).is_err());
    }

    #[test]
    fn save_load_is_bit_exact() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(3);
        let mut s = ParamStore::<f32>::new();
        s.add("block.w", kaiming_uniform(&[3, 4], 3, &mut rng).unwrap()).unwrap();
        s.add("block.b", kaiming_uniform(&[4], 3, &mut rng).unwrap()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        s.save_dir(dir.path()).unwrap();
        let back = ParamStore::<f32>::load_dir(dir.path()).unwrap();
        assert_eq!(back.names(), s.names());
        for id in s.ids() {
            let a = s.value(id).data().iter().map(|v| v.to_bits());
            let b = back.value(id).data().iter().map(|v| v.to_bits());
            assert!(a.eq(b));
        }
    }

    #[test]
    fn kaiming_bound_respected() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(9);
        let w: Tensor<f64> = kaiming_uniform(&[12, 12], 12, &mut rng).unwrap();
        assert!(w.max_abs() <= 0.5 + 1e-12);
    }
}
