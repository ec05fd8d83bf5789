//! Named parameter storage, initialisation, and the binary checkpoint format.
//!
//! Checkpoint layout (all integers little-endian): magic `ODTW`, version u32,
//! tensor count u32, then per tensor: name length u16, UTF-8 name, ndim u8,
//! one u32 per dim, then 32-bit little-endian float values.

use std::cell::RefCell;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CKPT_MAGIC: &[u8; 4] = b"ODTW";
pub const CKPT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

/// Flat registry of named parameter tensors, in registration order.
pub struct ParamStore<T> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn register(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.entries.iter().any(|(n, _)| *n == name) {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        self.entries.push((name, tensor));
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].1
    }

    pub fn set(&mut self, id: ParamId, tensor: Tensor<T>) {
        debug_assert_eq!(self.entries[id.0].1.shape(), tensor.shape());
        self.entries[id.0].1 = tensor;
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Total scalar parameter count.
    pub fn total_params(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.ndim() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.iter() {
                out.extend_from_slice(&v.as_f32().to_le_bytes());
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    /// Load a checkpoint into this store. Every file tensor must match a
    /// registered parameter by name and shape, and cover all of them.
    pub fn load_into(&mut self, path: &Path) -> Result<()> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        self.load_bytes(&bytes)
    }

    pub fn load_bytes(&mut self, bytes: &[u8]) -> Result<()> {
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(Error::Format("checkpoint truncated".into()));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 4)? != CKPT_MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        if version != CKPT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut seen = vec![false; self.entries.len()];
        for _ in 0..count {
            let name_len =
                u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
                .map_err(|_| Error::Format("non-UTF-8 tensor name".into()))?;
            let ndim = take(&mut pos, 1)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = take(&mut pos, numel * 4)?;
            let idx = self
                .entries
                .iter()
                .position(|(n, _)| *n == name)
                .ok_or_else(|| Error::Format(format!("unknown tensor {name} in checkpoint")))?;
            if self.entries[idx].1.shape() != shape.as_slice() {
                return Err(Error::Format(format!(
                    "tensor {name}: checkpoint shape {shape:?} != model shape {:?}",
                    self.entries[idx].1.shape()
                )));
            }
            let data: Vec<T> = raw
                .chunks_exact(4)
                .map(|c| T::cast(f32::from_le_bytes(c.try_into().unwrap())))
                .collect();
            self.entries[idx].1 = Tensor::new(shape, data)?;
            seen[idx] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Format(format!(
                "checkpoint is missing tensor {}",
                self.entries[i].0
            )));
        }
        Ok(())
    }
}

/// Deterministic weight initialiser.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Normal(0, std) truncated to two standard deviations.
    pub fn trunc_normal<T: Scalar>(&mut self, shape: Vec<usize>, std: f64) -> Tensor<T> {
        let dist = Normal::new(0.0, std).unwrap();
        Tensor::from_fn(shape, |_| loop {
            let v = dist.sample(&mut self.rng);
            if v.abs() <= 2.0 * std {
                break T::cast(v);
            }
        })
    }

    pub fn uniform<T: Scalar>(&mut self, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<T> {
        use rand::Rng;
        Tensor::from_fn(shape, |_| T::cast(self.rng.gen_range(lo..hi)))
    }
}

/// One forward pass: a fresh tape plus lazily created parameter leaves.
pub struct Forward<'a, T: Scalar> {
    tape: Tape<T>,
    store: &'a ParamStore<T>,
    vars: RefCell<Vec<Option<Var<T>>>>,
    train: bool,
}

impl<'a, T: Scalar> Forward<'a, T> {
    pub fn new(store: &'a ParamStore<T>, train: bool) -> Self {
        Self {
            tape: Tape::new(),
            store,
            vars: RefCell::new(vec![None; store.len()]),
            train,
        }
    }

    pub fn tape(&self) -> &Tape<T> {
        &self.tape
    }

    /// The tape leaf for a parameter, created on first use.
    pub fn param(&self, id: ParamId) -> Var<T> {
        let mut vars = self.vars.borrow_mut();
        if let Some(v) = &vars[id.0] {
            return v.clone();
        }
        let v = self.tape.leaf(self.store.get(id).clone(), self.train);
        vars[id.0] = Some(v.clone());
        v
    }

    /// Gradient of a parameter after backward, zero if it never entered the
    /// graph.
    pub fn param_grad(&self, id: ParamId) -> Tensor<T> {
        let vars = self.vars.borrow();
        match &vars[id.0] {
            Some(v) => v
                .grad()
                .unwrap_or_else(|| Tensor::zeros(self.store.get(id).shape().to_vec())),
            None => Tensor::zeros(self.store.get(id).shape().to_vec()),
        }
    }

    pub fn input(&self, tensor: Tensor<T>) -> Var<T> {
        self.tape.constant(tensor)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_roundtrip_preserves_values() {
        let mut store = ParamStore::<f32>::new();
        let a = store
            .register("block.weight", Tensor::from_fn(vec![2, 3], |i| i as f32 * 0.5))
            .unwrap();
        let b = store
            .register("block.bias", Tensor::from_fn(vec![3], |i| -(i as f32)))
            .unwrap();
        let bytes = store.to_bytes();

        let mut other = ParamStore::<f32>::new();
        other.register("block.weight", Tensor::zeros(vec![2, 3])).unwrap();
        other.register("block.bias", Tensor::zeros(vec![3])).unwrap();
        other.load_bytes(&bytes).unwrap();
        assert_eq!(other.get(a).data(), store.get(a).data());
        assert_eq!(other.get(b).data(), store.get(b).data());
    }

    #[test]
    fn checkpoint_rejects_mismatches() {
        let mut store = ParamStore::<f32>::new();
        store.register("w", Tensor::zeros(vec![2])).unwrap();
        let bytes = store.to_bytes();

        let mut wrong_shape = ParamStore::<f32>::new();
        wrong_shape.register("w", Tensor::zeros(vec![3])).unwrap();
        assert!(wrong_shape.load_bytes(&bytes).is_err());

        let mut missing = ParamStore::<f32>::new();
        missing.register("w", Tensor::zeros(vec![2])).unwrap();
        missing.register("extra", Tensor::zeros(vec![1])).unwrap();
        assert!(missing.load_bytes(&bytes).is_err());

        let mut garbage = bytes.clone();
        garbage[0] = b'X';
        let mut store2 = ParamStore::<f32>::new();
        store2.register("w", Tensor::zeros(vec![2])).unwrap();
        assert!(store2.load_bytes(&garbage).is_err());
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut store = ParamStore::<f32>::new();
        store.register("w", Tensor::zeros(vec![1])).unwrap();
        assert!(store.register("w", Tensor::zeros(vec![1])).is_err());
    }

    #[test]
    fn trunc_normal_is_bounded_and_deterministic() {
        let mut init = Init::new(42);
        let t: Tensor<f32> = init.trunc_normal(vec![512], 0.02);
        assert!(t.iter().all(|v| v.abs() <= 0.04 + 1e-9));
        let mut init2 = Init::new(42);
        let t2: Tensor<f32> = init2.trunc_normal(vec![512], 0.02);
        assert_eq!(t.data(), t2.data());
    }
}
