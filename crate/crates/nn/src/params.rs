//! Named parameter storage, initialization and the binary checkpoint format.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic   b"HRTKCKPT"
//! u32     format version (currently 1)
//! u64     config length, then that many bytes of UTF-8 JSON
//! u32     tensor count
//! repeat: u32 name length, name bytes, u32 rank, rank × u64 dims,
//!         numel × f64 values
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{NnError, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"HRTKCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Weight initialization schemes.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Constant(f64),
    /// Uniform in `±bound`.
    Uniform(f64),
    /// He-uniform for leaky activations: `±sqrt(6 / fan_in)`.
    HeUniform { fan_in: usize },
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    /// Create a parameter drawn from `init`.
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init, rng: &mut ChaCha8Rng) {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Constant(v) => vec![v; n],
            Init::Uniform(b) => (0..n).map(|_| rng.random_range(-b..=b)).collect(),
            Init::HeUniform { fan_in } => {
                let b = (6.0 / fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| rng.random_range(-b..=b)).collect()
            }
        };
        self.insert(name, Tensor::from_vec(shape, data).expect("sized from shape"));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Scalar count per name prefix (text before the first `.`).
    pub fn counts_by_prefix(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for (k, t) in &self.tensors {
            let prefix = k.split('.').next().unwrap_or(k).to_string();
            *out.entry(prefix).or_insert(0) += t.numel();
        }
        out
    }

    /// Merge `other` into `self`, overwriting duplicates.
    pub fn extend(&mut self, other: ParamStore) {
        self.tensors.extend(other.tensors);
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W, config_json: &str) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(config_json.len() as u64).to_le_bytes())?;
        w.write_all(config_json.as_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.numel() * 8);
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    /// Returns the embedded config JSON and the parameters.
    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(String, ParamStore)> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(NnError::Checkpoint("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(NnError::Checkpoint(format!("unsupported version {version}")));
        }
        let cfg_len = read_u64(&mut r)? as usize;
        let config = String::from_utf8(read_bytes(&mut r, cfg_len)?)
            .map_err(|_| NnError::Checkpoint("config is not UTF-8".into()))?;
        let count = read_u32(&mut r)?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let name = String::from_utf8(read_bytes(&mut r, name_len)?)
                .map_err(|_| NnError::Checkpoint("tensor name is not UTF-8".into()))?;
            let rank = read_u32(&mut r)? as usize;
            let shape = (0..rank).map(|_| read_u64(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = read_bytes(&mut r, n * 8)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            store.insert(name, Tensor::from_vec(&shape, data)?);
        }
        Ok((config, store))
    }

    pub fn save(&self, path: impl AsRef<Path>, config_json: &str) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_checkpoint(f, config_json)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(String, ParamStore)> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_checkpoint(f)
    }
}

fn read_bytes<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        store.add("gen.conv.w", &[4, 3, 3, 3], Init::HeUniform { fan_in: 27 }, &mut rng);
        store.add("gen.conv.b", &[4], Init::Zeros, &mut rng);
        let mut buf = Vec::new();
        store.write_checkpoint(&mut buf, r#"{"variant":"ead"}"#).unwrap();
        let (cfg, back) = ParamStore::read_checkpoint(&buf[..]).unwrap();
        assert_eq!(cfg, r#"{"variant":"ead"}"#);
        assert_eq!(back, store);
    }

    #[test]
    fn rejects_foreign_files() {
        let err = ParamStore::read_checkpoint(&b"NOTACKPT\x01\x00\x00\x00"[..]).unwrap_err();
        assert!(matches!(err, NnError::Checkpoint(_)));
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let mut s = ParamStore::new();
            s.add("a", &[10], Init::Uniform(0.5), &mut rng);
            s
        };
        assert_eq!(build(), build());
    }
}
