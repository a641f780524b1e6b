//! Named weight storage, lazy binding onto a tape, and the binary checkpoint format.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Gradients, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Ordered collection of named tensors. Insertion order fixes the checkpoint layout.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate parameter `{name}`")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
        Ok(ParamId(self.names.len() - 1))
    }

    /// He-style uniform init for a conv kernel `[co, ci, k, k]`.
    pub fn insert_kernel(&mut self, name: impl Into<String>, shape: [usize; 4], rng: &mut ChaCha8Rng) -> Result<ParamId> {
        let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    /// Overwrites every tensor with the same-named one from `other`.
    pub fn copy_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Shape(format!("checkpoint has {} tensors, expected {}", other.len(), self.len())));
        }
        for i in 0..self.names.len() {
            let j = other
                .index
                .get(&self.names[i])
                .ok_or_else(|| Error::Shape(format!("checkpoint lacks `{}`", self.names[i])))?;
            if other.tensors[*j].shape() != self.tensors[i].shape() {
                return Err(Error::Shape(format!("`{}` has the wrong shape", self.names[i])));
            }
            self.tensors[i] = other.tensors[*j].clone();
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Vec<Vec<f64>> {
        self.tensors.iter().map(|t| vec![0.0; t.len()]).collect()
    }

    /// All values concatenated in insertion order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(Error::Shape(format!("{} values for {} scalars", flat.len(), self.num_scalars())));
        }
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Write `<stem>.bin` (little-endian f64) and `<stem>.json` (manifest).
    pub fn save(&self, stem: &Path) -> Result<()> {
        let mut entries = Vec::with_capacity(self.len());
        let mut bytes = Vec::with_capacity(self.num_scalars() * 8);
        for (name, t) in self.names.iter().zip(&self.tensors) {
            entries.push(ManifestEntry { name: name.clone(), shape: t.shape().to_vec(), offset: bytes.len() / 8 });
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = Manifest { version: 1, scalars: self.num_scalars(), entries };
        std::fs::File::create(stem.with_extension("bin"))?.write_all(&bytes)?;
        std::fs::write(stem.with_extension("json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(stem.with_extension("json"))?)?;
        let bytes = std::fs::read(stem.with_extension("bin"))?;
        if bytes.len() != manifest.scalars * 8 {
            return Err(Error::Invalid(format!("checkpoint has {} bytes, manifest expects {}", bytes.len(), manifest.scalars * 8)));
        }
        let values: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let mut store = ParamStore::new();
        for e in manifest.entries {
            let n: usize = e.shape.iter().product();
            let end = e.offset + n;
            if end > values.len() {
                return Err(Error::Invalid(format!("entry `{}` runs past the end of the data", e.name)));
            }
            store.insert(e.name, Tensor::new(e.shape, values[e.offset..end].to_vec())?)?;
        }
        Ok(store)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    scalars: usize,
    entries: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

/// Places parameters on a tape the first time they are used.
#[derive(Debug)]
pub struct Binder<'a> {
    store: &'a ParamStore,
    vars: Vec<Option<Var>>,
}

impl<'a> Binder<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self { store, vars: vec![None; store.len()] }
    }

    pub fn var(&mut self, tape: &mut Tape, id: ParamId) -> Var {
        *self.vars[id.0].get_or_insert_with(|| tape.leaf(self.store.get(id).clone()))
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Add this sweep's gradients into `acc` (layout of [`ParamStore::zeros_like`]), scaled by `k`.
    pub fn accumulate(&self, grads: &Gradients, acc: &mut [Vec<f64>], k: f64) {
        for (i, v) in self.vars.iter().enumerate() {
            if let Some(v) = v {
                if grads.is_connected(*v) {
                    let g = grads.get(*v);
                    acc[i].iter_mut().zip(g.data()).for_each(|(a, b)| *a += k * b);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = ParamStore::new();
        s.insert_kernel("a", [2, 3, 3, 3], &mut rng).unwrap();
        s.insert("b", Tensor::vector(vec![0.1, -0.0, f64::MIN_POSITIVE])).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("w");
        s.save(&stem).unwrap();
        let back = ParamStore::load(&stem).unwrap();
        assert_eq!(back.len(), 2);
        for id in s.ids() {
            let a: Vec<u64> = s.get(id).data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = back.get(id).data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
            assert_eq!(s.name(id), back.name(id));
        }
    }

    #[test]
    fn duplicate_name_rejected() {
        let mut s = ParamStore::new();
        s.insert("x", Tensor::scalar(1.0)).unwrap();
        assert!(s.insert("x", Tensor::scalar(2.0)).is_err());
    }
}
