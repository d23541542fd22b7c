//! Named parameter registry, He initialization and the binary weight file.
//!
//! File layout (little-endian):
//!
//! ```text
//! "ESW1"                      magic, last byte is the format version
//! u32 tensor_count
//! per tensor:
//!   u16 name_len, name bytes (UTF-8)
//!   u8 rank, rank x u32 dims
//!   prod(dims) x f32 payload
//! u32 CRC-32 (IEEE) of every preceding byte
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Network, ParamRole};
use super::ModelError;
use crate::tensor::{Scalar, Shape, Tensor};

/// Parameters keyed by hierarchical name, iterated in name order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Option<Tensor<T>> {
        self.tensors.insert(name.into(), t)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>, ModelError> {
        self.tensors
            .get(name)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>, ModelError> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Default-valued parameters for `net`: zero weights and biases, and
    /// identity batch norm (gamma 1, beta 0, running mean 0, variance 1).
    pub fn for_network(net: &Network) -> Self {
        let mut store = Self::new();
        for spec in net.param_specs() {
            let fill = match spec.role {
                ParamRole::Gamma | ParamRole::RunningVar => T::one(),
                _ => T::zero(),
            };
            store.insert(spec.name, Tensor::full(spec.shape, fill));
        }
        store
    }

    /// Every parameter the network declares is present with the declared
    /// shape, and nothing else is.
    pub fn check_against(&self, net: &Network) -> Result<(), ModelError> {
        let specs = net.param_specs();
        for spec in &specs {
            let t = self.get(&spec.name)?;
            if t.shape() != spec.shape {
                return Err(ModelError::ParamShape {
                    name: spec.name.clone(),
                    expected: spec.shape,
                    got: t.shape(),
                });
            }
        }
        if self.len() != specs.len() {
            let declared: std::collections::HashSet<_> = specs.iter().map(|s| s.name.as_str()).collect();
            if let Some(extra) = self.names().find(|n| !declared.contains(n)) {
                return Err(ModelError::UnexpectedParam(extra.to_string()));
            }
        }
        Ok(())
    }
}

/// He-normal convolution weights (`std = sqrt(2 / fan_in)`), zero biases and
/// identity batch norm. Parameters are drawn in name order from one
/// ChaCha8 stream, so a seed fixes the registry bit for bit.
pub fn init_params(net: &Network, seed: u64) -> ParamStore<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut specs = net.param_specs();
    specs.sort_by(|a, b| a.name.cmp(&b.name));
    let mut store = ParamStore::new();
    for spec in specs {
        let t = match spec.role {
            ParamRole::Weight => Tensor::randn(spec.shape, (2.0 / spec.fan_in as f64).sqrt(), &mut rng),
            ParamRole::Gamma | ParamRole::RunningVar => Tensor::full(spec.shape, 1.0),
            ParamRole::Bias | ParamRole::Beta | ParamRole::RunningMean => Tensor::zeros(spec.shape),
        };
        store.insert(spec.name, t);
    }
    store
}

pub const MAGIC: &[u8; 4] = b"ESW1";

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum WeightFileError {
    #[error("bad magic {found:?}, expected \"ESW\"")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported weight-file version {0:?}")]
    UnsupportedVersion(char),
    #[error("truncated weight file while reading {what} at byte {offset}")]
    Truncated { what: &'static str, offset: usize },
    #[error("CRC mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),
    #[error("tensor name at byte {offset} is not valid UTF-8")]
    InvalidName { offset: usize },
    #[error("tensor {name:?} has unsupported rank {rank}")]
    BadRank { name: String, rank: u8 },
    #[error("{0} trailing bytes after the checksum")]
    TrailingBytes(usize),
    #[error("tensor {name:?} has a dimension over u32 or a name over u16 bytes")]
    TooLarge { name: String },
    #[error("tensor {0:?} contains non-finite values")]
    NonFinite(String),
    #[error("{path}: {kind}")]
    Io { path: String, kind: std::io::ErrorKind },
}

/// Serializes a registry. Every tensor is written with rank 4.
pub fn encode_weights(params: &ParamStore<f32>) -> Result<Vec<u8>, WeightFileError> {
    let mut buf = Vec::with_capacity(12 + params.numel() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        if !t.all_finite() {
            return Err(WeightFileError::NonFinite(name.clone()));
        }
        let too_large = || WeightFileError::TooLarge { name: name.clone() };
        let name_len = u16::try_from(name.len()).map_err(|_| too_large())?;
        buf.extend_from_slice(&name_len.to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(4);
        for d in t.shape().dims() {
            let d = u32::try_from(d).map_err(|_| too_large())?;
            buf.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], WeightFileError> {
        if self.bytes.len() - self.pos < n {
            return Err(WeightFileError::Truncated { what, offset: self.pos });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, WeightFileError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Parses a registry. Records are parsed first, so a cut-off file reports
/// truncation; a complete file with altered bytes reports a CRC mismatch.
/// Ranks 1 to 3 are accepted and padded with trailing unit dimensions.
pub fn decode_weights(bytes: &[u8]) -> Result<ParamStore<f32>, WeightFileError> {
    if bytes.len() < 4 {
        return Err(WeightFileError::Truncated { what: "magic", offset: 0 });
    }
    if &bytes[..3] != b"ESW" {
        return Err(WeightFileError::BadMagic {
            found: bytes[..4].to_vec(),
        });
    }
    if bytes[3] != MAGIC[3] {
        return Err(WeightFileError::UnsupportedVersion(bytes[3] as char));
    }
    // Everything but the trailing CRC is record data.
    let body_end = bytes.len().saturating_sub(4).max(4);
    let mut r = Reader {
        bytes: &bytes[..body_end],
        pos: 4,
    };
    let count = r.u32("tensor count")?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(r.take(2, "name length")?.try_into().unwrap()) as usize;
        let name_off = r.pos;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| WeightFileError::InvalidName { offset: name_off })?
            .to_string();
        let rank = r.take(1, "rank")?[0];
        if !(1..=4).contains(&rank) {
            return Err(WeightFileError::BadRank { name, rank });
        }
        let mut dims = [1usize; 4];
        for d in dims.iter_mut().take(rank as usize) {
            *d = r.u32("dims")? as usize;
        }
        let shape = Shape::from_dims(dims);
        let payload = r.take(shape.numel() * 4, "payload")?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::from_vec(shape, data).expect("payload length matches shape");
        if store.contains(&name) {
            return Err(WeightFileError::DuplicateName(name));
        }
        store.insert(name, t);
    }
    if bytes.len() < r.pos + 4 {
        return Err(WeightFileError::Truncated {
            what: "checksum",
            offset: r.pos,
        });
    }
    let stored = u32::from_le_bytes(bytes[r.pos..r.pos + 4].try_into().unwrap());
    let computed = crc32fast::hash(&bytes[..r.pos]);
    if stored != computed {
        return Err(WeightFileError::CrcMismatch { stored, computed });
    }
    let trailing = bytes.len() - (r.pos + 4);
    if trailing > 0 {
        return Err(WeightFileError::TrailingBytes(trailing));
    }
    Ok(store)
}

pub fn save_weights(params: &ParamStore<f32>, path: impl AsRef<Path>) -> Result<(), WeightFileError> {
    let path = path.as_ref();
    let bytes = encode_weights(params)?;
    std::fs::write(path, bytes).map_err(|e| WeightFileError::Io {
        path: path.display().to_string(),
        kind: e.kind(),
    })
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<ParamStore<f32>, WeightFileError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| WeightFileError::Io {
        path: path.display().to_string(),
        kind: e.kind(),
    })?;
    decode_weights(&bytes)
}

/// Size in bytes of the weight file for `params` (includes running
/// statistics and framing).
pub fn encoded_len(params: &ParamStore<f32>) -> usize {
    12 + params
        .iter()
        .map(|(name, t)| 2 + name.len() + 1 + 16 + 4 * t.numel())
        .sum::<usize>()
}
