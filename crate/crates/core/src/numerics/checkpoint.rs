//! Binary parameter container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      b"CQAK"
//! version    u32
//! rng_seed   u64
//! config     [u8; 32]   sha-256 of the creating configuration
//! meta_len   u32, meta  UTF-8 JSON
//! count      u32
//! count x { name_len u32, name, rank u32, dims u64 x rank, payload f64 x prod(dims) }
//! ```

use std::fs;
use std::path::Path;

use super::{ParameterSet, Tensor};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"CQAK";

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub rng_seed: u64,
    pub config_hash: [u8; 32],
    pub metadata: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ParameterSet,
}

impl Checkpoint {
    pub fn new(params: ParameterSet, config_hash: [u8; 32], metadata: String) -> Self {
        Checkpoint {
            header: CheckpointHeader {
                format_version: FORMAT_VERSION,
                rng_seed: params.rng_seed,
                config_hash,
                metadata,
            },
            params,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.params.total_elements() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.header.format_version.to_le_bytes());
        out.extend_from_slice(&self.header.rng_seed.to_le_bytes());
        out.extend_from_slice(&self.header.config_hash);
        out.extend_from_slice(&(self.header.metadata.len() as u32).to_le_bytes());
        out.extend_from_slice(self.header.metadata.as_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(r.err("not a checkpoint (bad magic)"));
        }
        let format_version = r.u32()?;
        if format_version != FORMAT_VERSION {
            return Err(r.err(&format!("unsupported format version {format_version}")));
        }
        let rng_seed = r.u64()?;
        let mut config_hash = [0u8; 32];
        config_hash.copy_from_slice(r.take(32)?);
        let meta_len = r.u32()? as usize;
        let metadata = String::from_utf8(r.take(meta_len)?.to_vec()).map_err(|_| r.err("metadata is not UTF-8"))?;
        let count = r.u32()?;
        let mut params = ParameterSet::new(rng_seed);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| r.err("name is not UTF-8"))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let payload = r.take(n * 8)?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| r.err(&e.to_string()))?;
            params.insert(name, t).map_err(|e| r.err(&e.to_string()))?;
        }
        if r.pos != bytes.len() {
            return Err(r.err("trailing bytes"));
        }
        Ok(Checkpoint {
            header: CheckpointHeader {
                format_version,
                rng_seed,
                config_hash,
                metadata,
            },
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Checkpoint::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, message: &str) -> Error {
        Error::Checkpoint {
            path: self.path.to_path_buf(),
            message: format!("{message} (offset {})", self.pos),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.err("truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    proptest! {
        #[test]
        fn round_trip(values in proptest::collection::vec(-1e6f64..1e6, 1..40), seed in any::<u64>()) {
            let mut ps = ParameterSet::new(seed);
            ps.insert("a/b", Tensor::row(values.clone())).unwrap();
            ps.insert("c", Tensor::scalar(values[0])).unwrap();
            let ck = Checkpoint::new(ps, [7u8; 32], "{\"k\":1}".into());
            let back = Checkpoint::from_bytes(&ck.to_bytes(), Path::new("mem")).unwrap();
            prop_assert_eq!(back, ck);
        }
    }

    #[test]
    fn truncated_is_rejected() {
        let mut ps = ParameterSet::new(1);
        ps.insert("w", Tensor::row(vec![1.0, 2.0])).unwrap();
        let bytes = Checkpoint::new(ps, [0; 32], String::new()).to_bytes();
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 3], Path::new("x")).unwrap_err();
        assert!(matches!(err, Error::Checkpoint { .. }));
    }
}
