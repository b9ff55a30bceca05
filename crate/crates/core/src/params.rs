//! Named parameter and buffer storage shared by every model component.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Parameters are tensors with `requires_grad` set while trainable; buffers
/// (batch-norm running statistics) never are.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
    buffers: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t.with_requires_grad(true));
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, t: Tensor) {
        self.buffers
            .insert(name.into(), t.with_requires_grad(false));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn buffer_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.buffers
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name) || self.buffers.contains_key(name)
    }

    /// Binds a parameter on the tape; frozen parameters enter as constants.
    pub fn bind(&self, tape: &mut Tape, name: &str) -> Result<Var> {
        let t = self.get(name)?;
        Ok(if t.requires_grad() {
            tape.param(name, t)
        } else {
            tape.constant(t.clone())
        })
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Sets the trainable flag on every parameter whose name starts with `prefix`.
    pub fn set_trainable(&mut self, prefix: &str, flag: bool) {
        for (name, t) in self.tensors.iter_mut() {
            if name.starts_with(prefix) {
                t.set_requires_grad(flag);
            }
        }
    }

    pub fn set_trainable_exact(&mut self, name: &str, flag: bool) -> Result<()> {
        self.get_mut(name)?.set_requires_grad(flag);
        Ok(())
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Copies every parameter and buffer under `prefix` from `other`,
    /// keeping this store's trainable flags.
    pub fn load_prefix(&mut self, other: &ParamStore, prefix: &str) -> Result<()> {
        for (name, t) in other.tensors.iter().filter(|(k, _)| k.starts_with(prefix)) {
            let dst = self.get_mut(name)?;
            if dst.shape() != t.shape() {
                return Err(Error::shape("load_prefix", dst.shape(), t.shape()));
            }
            dst.data_mut().copy_from_slice(t.data());
        }
        for (name, t) in other.buffers.iter().filter(|(k, _)| k.starts_with(prefix)) {
            let dst = self.buffer_mut(name)?;
            if dst.shape() != t.shape() {
                return Err(Error::shape("load_prefix", dst.shape(), t.shape()));
            }
            dst.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }

    /// Sub-store of the entries under `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
            buffers: self
                .buffers
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn extend(&mut self, other: ParamStore) {
        self.tensors.extend(other.tensors);
        self.buffers.extend(other.buffers);
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite) && self.buffers.values().all(Tensor::is_finite)
    }
}

/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, the usual default for linear and
/// convolution layers.
pub fn uniform_init<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-bound..=bound))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn frozen_params_bind_as_constants() {
        let mut ps = ParamStore::new();
        ps.insert("enc.w", Tensor::full([2], 1.0));
        ps.insert("head.w", Tensor::full([2], 2.0));
        ps.set_trainable("enc.", false);
        let mut tape = Tape::new();
        let a = ps.bind(&mut tape, "enc.w").unwrap();
        let b = ps.bind(&mut tape, "head.w").unwrap();
        assert!(!tape.requires_grad(a));
        assert!(tape.requires_grad(b));
        assert!(matches!(
            ps.bind(&mut tape, "nope"),
            Err(Error::MissingParam(_))
        ));
    }

    #[test]
    fn load_prefix_copies_values_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut a = ParamStore::new();
        a.insert("enc.w", uniform_init(&[3, 2], 2, &mut rng));
        a.insert_buffer("enc.bn.mean", Tensor::full([3], 0.5));
        a.insert("head.w", Tensor::zeros([2]));
        let mut b = a.clone();
        b.set_trainable("enc.", false);
        b.get_mut("enc.w").unwrap().data_mut().fill(9.0);
        b.buffer_mut("enc.bn.mean").unwrap().data_mut().fill(9.0);
        b.load_prefix(&a, "enc.").unwrap();
        assert_eq!(
            b.get("enc.w").unwrap().data(),
            a.get("enc.w").unwrap().data()
        );
        assert_eq!(b.buffer("enc.bn.mean").unwrap().data(), &[0.5; 3]);
        assert!(!b.get("enc.w").unwrap().requires_grad());
        assert_eq!(a.subset("enc.").num_parameters(), 6);
    }

    #[test]
    fn init_bounds() {
        let t = uniform_init(&[100], 4, &mut ChaCha8Rng::seed_from_u64(1));
        assert!(t.data().iter().all(|v| v.abs() <= 0.5));
    }
}
