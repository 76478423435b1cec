//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     8 bytes  "DGAECKPT"
//! version   u32
//! meta_len  u64, then meta_len bytes of UTF-8 JSON
//! count     u32
//! records   count times:
//!   name_len u32, name bytes, dtype u8 (0 = f32), rank u8, dims u64 * rank,
//!   payload  f32 * prod(dims)
//! ```
//!
//! The metadata carries the SHA-256 of everything after it, which `load`
//! verifies. Writes go to a temporary file that is renamed into place.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::hex;
use crate::error::{Error, Result};
use crate::nets::ModelParams;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DGAECKPT";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// What the checkpoint holds: `dgae`, `baseline`, `features` or `latent_gen`.
    pub kind: String,
    pub config: String,
    pub config_hash: String,
    pub step: u64,
    pub seed: u64,
    pub payload_sha256: String,
    pub extras: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: IndexMap<String, Tensor<f32>>,
}

impl Checkpoint {
    pub fn new(kind: &str, config: &str, config_hash: &str, step: u64, seed: u64) -> Self {
        Self {
            meta: CheckpointMeta {
                kind: kind.into(),
                config: config.into(),
                config_hash: config_hash.into(),
                step,
                seed,
                payload_sha256: String::new(),
                extras: BTreeMap::new(),
            },
            tensors: IndexMap::new(),
        }
    }

    /// Store every tensor of `params` under `group/`.
    pub fn put_params(&mut self, group: &str, params: &ModelParams) {
        for (k, v) in params.iter() {
            self.tensors.insert(format!("{group}/{k}"), v.clone());
        }
    }

    /// Parameters stored under `group/`, in stored order.
    pub fn params(&self, group: &str) -> Result<ModelParams> {
        let prefix = format!("{group}/");
        let mut out = ModelParams::new();
        for (k, v) in &self.tensors {
            if let Some(name) = k.strip_prefix(&prefix) {
                out.insert(name, v.clone())?;
            }
        }
        if out.is_empty() {
            return Err(Error::Corrupt(format!("no tensors in group `{group}`")));
        }
        Ok(out)
    }

    pub fn has_group(&self, group: &str) -> bool {
        let prefix = format!("{group}/");
        self.tensors.keys().any(|k| k.starts_with(&prefix))
    }

    pub fn set_extra(&mut self, key: &str, value: impl Serialize) {
        let v = serde_json::to_value(value).expect("serializable extra");
        self.meta.extras.insert(key.into(), v);
    }

    pub fn extra<T: for<'de> Deserialize<'de>>(&self, key: &str) -> Result<T> {
        let v = self
            .meta
            .extras
            .get(key)
            .ok_or_else(|| Error::Corrupt(format!("missing metadata field `{key}`")))?;
        serde_json::from_value(v.clone()).map_err(|e| Error::Corrupt(format!("metadata field `{key}`: {e}")))
    }

    fn payload(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            if t.rank() > u8::MAX as usize {
                return Err(Error::Shape(format!("tensor `{name}` has too many dimensions")));
            }
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.push(DTYPE_F32);
            buf.push(t.rank() as u8);
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(buf)
    }

    /// Serialized bytes; the payload hash in the metadata is refreshed.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let payload = self.payload()?;
        let mut meta = self.meta.clone();
        meta.payload_sha256 = hex(&Sha256::digest(&payload));
        let meta_json = serde_json::to_vec(&meta).map_err(|e| Error::Corrupt(format!("metadata: {e}")))?;
        let mut out = Vec::with_capacity(24 + meta_json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta_json.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta_json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Corrupt("bad magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Corrupt(format!("unsupported format version {version}")));
        }
        let meta_len = r.u64()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::Corrupt(format!("metadata: {e}")))?;
        let payload = &bytes[r.pos..];
        let digest = hex(&Sha256::digest(payload));
        if digest != meta.payload_sha256 {
            return Err(Error::Corrupt(format!(
                "payload hash mismatch: stored {}, computed {digest}",
                meta.payload_sha256
            )));
        }
        let count = r.u32()?;
        let mut tensors = IndexMap::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Corrupt("tensor name is not UTF-8".into()))?
                .to_string();
            let dtype = r.u8()?;
            if dtype != DTYPE_F32 {
                return Err(Error::Corrupt(format!("tensor `{name}` has unknown dtype {dtype}")));
            }
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Corrupt(format!("tensor `{name}` is too large")))?;
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::Corrupt("size overflow".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::from_vec(&shape, data).map_err(|e| Error::Corrupt(e.to_string()))?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(Error::Corrupt(format!("duplicate tensor `{name}`")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { meta, tensors })
    }

    /// SHA-256 of the serialized file.
    pub fn content_hash(&self) -> Result<String> {
        Ok(hex(&Sha256::digest(self.to_bytes()?)))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Corrupt(format!("truncated at byte {} (wanted {n} more)", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Atomically write `bytes` to `path` via a sibling temporary file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let file_name = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{file_name}.tmp{}", std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Write `ckpt` and return its content hash.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<String> {
    let bytes = ckpt.to_bytes()?;
    write_atomic(path, &bytes)?;
    Ok(hex(&Sha256::digest(&bytes)))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

/// SHA-256 of a file's bytes.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new("dgae", "model = dgae\n", "abc", 7, 1);
        let mut p = ModelParams::new();
        p.insert("enc.w", Tensor::from_fn(&[2, 3], |i| i as f32 * 0.5 - 1.0)).unwrap();
        p.insert("enc.b", Tensor::from_vec(&[2], vec![f32::MIN_POSITIVE, -0.0]).unwrap()).unwrap();
        c.put_params("ae", &p);
        c.set_extra("collapse_run", 3u64);
        c
    }

    #[test]
    fn round_trip_is_bitwise() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let p = back.params("ae").unwrap();
        assert_eq!(p.get("enc.b").unwrap().data()[1].to_bits(), (-0.0f32).to_bits());
        assert_eq!(back.extra::<u64>("collapse_run").unwrap(), 3);
    }

    #[test]
    fn truncation_and_bit_flips_are_detected() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [0, 5, 12, 30, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Corrupt(_))));
        }
        let mut flipped = bytes.clone();
        let last = flipped.len() - 1;
        flipped[last] ^= 1;
        match Checkpoint::from_bytes(&flipped) {
            Err(Error::Corrupt(m)) => assert!(m.contains("hash mismatch")),
            other => panic!("{other:?}"),
        }
        let mut bad_magic = bytes;
        bad_magic[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad_magic), Err(Error::Corrupt(_))));
    }
}
