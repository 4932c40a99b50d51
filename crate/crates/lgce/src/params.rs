//! Named parameter storage, seeded initialization and checkpoint files.
//!
//! Checkpoint layout: an 8-byte little-endian manifest length, a UTF-8 JSON
//! manifest `[{"name", "shape", "offset"}]` (offset counted in values), then
//! every tensor's data as little-endian `f64`.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tape::{Tape, Var};
use crate::tensor::{Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

/// Tape handles for every parameter of a store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Handles in store order, e.g. leaves created by a gradient checker.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn get(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Panics on a duplicate name: parameter layouts are fixed by code.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(self.id(&name).is_none(), "duplicate parameter {name}");
        self.entries.push((name, value));
        ParamId(self.entries.len() - 1)
    }

    /// Uniform in `±1/√fan_in`.
    pub fn add_uniform(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        self.add(name, Tensor::uniform(shape, bound, rng))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|(n, _)| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound(self.entries.iter().map(|(_, t)| tape.leaf(t.clone())).collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0;
        let manifest: Vec<ManifestEntry> = self
            .entries
            .iter()
            .map(|(name, t)| {
                let e = ManifestEntry { name: name.clone(), shape: t.shape().to_vec(), offset };
                offset += t.numel();
                e
            })
            .collect();
        let header = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(8 + header.len() + offset * 8);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.entries {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| TensorError::Checkpoint(m.to_string());
        let len_bytes: [u8; 8] = bytes.get(..8).ok_or_else(|| bad("truncated header length"))?.try_into().unwrap();
        let hlen = usize::try_from(u64::from_le_bytes(len_bytes)).map_err(|_| bad("header length overflow"))?;
        let header = bytes.get(8..8 + hlen).ok_or_else(|| bad("truncated manifest"))?;
        let manifest: Vec<ManifestEntry> =
            serde_json::from_slice(header).map_err(|e| TensorError::Checkpoint(format!("manifest: {e}")))?;
        let body = &bytes[8 + hlen..];
        if !body.len().is_multiple_of(8) {
            return Err(bad("data section is not a whole number of f64 values"));
        }
        let values: Vec<f64> = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let mut store = ParamStore::new();
        for e in manifest {
            let n: usize = e.shape.iter().product();
            let data = values
                .get(e.offset..e.offset + n)
                .ok_or_else(|| TensorError::Checkpoint(format!("{} runs past the data section", e.name)))?;
            if store.id(&e.name).is_some() {
                return Err(TensorError::Checkpoint(format!("duplicate parameter {}", e.name)));
            }
            store.entries.push((e.name, Tensor::new(&e.shape, data.to_vec())?));
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        f.sync_all()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    /// Overwrites values from `other`, which must carry exactly the same
    /// names and shapes in the same order.
    pub fn load_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(TensorError::Checkpoint(format!(
                "expected {} parameters, checkpoint has {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for ((n, t), (on, ot)) in self.entries.iter_mut().zip(&other.entries) {
            if n != on || t.shape() != ot.shape() {
                return Err(TensorError::Checkpoint(format!("{on} {:?} does not match {n} {:?}", ot.shape(), t.shape())));
            }
            *t = ot.clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store(seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        s.add_uniform("a.weight", &[3, 4], 3, &mut rng);
        s.add_uniform("a.bias", &[4], 3, &mut rng);
        s.add("scalar", Tensor::scalar(-0.0));
        s
    }

    #[test]
    fn seeded_init_is_reproducible_and_bounded() {
        assert_eq!(store(3), store(3));
        assert_ne!(store(3), store(4));
        let s = store(3);
        let bound = 1.0 / 3f64.sqrt();
        assert!(s.get(s.id("a.weight").unwrap()).data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let s = store(5);
        let back = ParamStore::from_bytes(&s.to_bytes()).unwrap();
        assert_eq!(back.len(), s.len());
        for ((n1, t1), (n2, t2)) in s.iter().zip(back.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(t1), bits(t2));
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        s.save(&path).unwrap();
        let mut fresh = store(6);
        fresh.load_values_from(&ParamStore::load(&path).unwrap()).unwrap();
        assert_eq!(fresh, s);
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let bytes = store(1).to_bytes();
        assert!(ParamStore::from_bytes(&bytes[..4]).is_err());
        assert!(ParamStore::from_bytes(&bytes[..bytes.len() - 8]).is_err());
        assert!(ParamStore::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut other = ParamStore::new();
        other.add("x", Tensor::zeros(&[1]));
        assert!(other.load_values_from(&store(1)).is_err());
    }
}
