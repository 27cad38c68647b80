//! Binary checkpoints: magic `ASTRCKPT`, format version, SHA-256 digest of
//! the model configuration, then named parameter blocks (name length, name,
//! rank, extents, little-endian f64 values). Integers are little-endian
//! u32, extents u64.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::params::Parameters;
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"ASTRCKPT";
pub const VERSION: u32 = 1;

/// One named tensor as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub digest: [u8; 32],
    pub blocks: Vec<Block>,
}

pub fn config_digest(cfg: &ModelConfig) -> [u8; 32] {
    Sha256::digest(RunConfig::model_text(cfg).as_bytes()).into()
}

fn format_err(detail: impl Into<String>) -> Error {
    Error::Format { what: "checkpoint", detail: detail.into() }
}

pub fn encode<T: Scalar>(params: &ModelParams<T>, cfg: &ModelConfig) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + 8 * params.parameter_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&config_digest(cfg));
    let tensors = params.named_tensors();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| format_err("truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(format_err("bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format_err(format!("unsupported version {version}")));
    }
    let digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let count = r.u32()? as usize;
    let mut blocks = Vec::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| format_err("block name is not utf-8"))?.to_string();
        let rank = r.u32()? as usize;
        let shape: Vec<usize> = (0..rank).map(|_| r.u64().map(|e| e as usize)).collect::<Result<_>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .filter(|n| n.checked_mul(8).is_some_and(|b| b <= bytes.len()))
            .ok_or_else(|| format_err(format!("block {name}: extents too large")))?;
        let raw = r.take(8 * n)?;
        let values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        blocks.push(Block { name, shape, values });
    }
    if r.pos != bytes.len() {
        return Err(format_err("trailing bytes"));
    }
    Ok(Checkpoint { version, digest, blocks })
}

/// Parameters for `cfg` filled from a checkpoint; names, shapes and the
/// config digest must all agree.
pub fn load_params<T: Scalar>(ckpt: &Checkpoint, cfg: &ModelConfig) -> Result<ModelParams<T>> {
    if ckpt.digest != config_digest(cfg) {
        return Err(format_err("configuration digest does not match the model configuration"));
    }
    let mut params = ModelParams::<T>::init(cfg, &mut ChaCha8Rng::seed_from_u64(0));
    let mut k = 0;
    let mut problem = None;
    params.visit_mut("", &mut |name, t| {
        if problem.is_some() {
            return;
        }
        match ckpt.blocks.get(k) {
            Some(b) if b.name == name && b.shape == t.shape() => {
                for (d, &v) in t.data_mut().iter_mut().zip(&b.values) {
                    *d = T::lit(v);
                }
            }
            Some(b) => problem = Some(format!("block {k}: expected {name} {:?}, found {} {:?}", t.shape(), b.name, b.shape)),
            None => problem = Some(format!("missing block {name}")),
        }
        k += 1;
    });
    if let Some(p) = problem {
        return Err(format_err(p));
    }
    if k != ckpt.blocks.len() {
        return Err(format_err(format!("{} unexpected extra blocks", ckpt.blocks.len() - k)));
    }
    Ok(params)
}

/// Writes through a temporary file in the same directory and renames it
/// into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().ok_or_else(|| Error::Config(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    Ok(result?)
}

pub fn save<T: Scalar>(path: &Path, params: &ModelParams<T>, cfg: &ModelConfig) -> Result<()> {
    write_atomic(path, &encode(params, cfg))
}

pub fn load<T: Scalar>(path: &Path, cfg: &ModelConfig) -> Result<ModelParams<T>> {
    load_params(&decode(&std::fs::read(path)?)?, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        let mut cfg = ModelConfig::default();
        cfg.pyramid.channels = [4, 8, 8, 8, 8];
        cfg.heads = 2;
        cfg.fine_heads = 2;
        cfg.aggregation.blocks = 1;
        cfg
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let cfg = small();
        let params = ModelParams::<f64>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(7));
        let bytes = encode(&params, &cfg);
        assert_eq!(&bytes[..8], MAGIC);
        let back: ModelParams<f64> = load_params(&decode(&bytes).unwrap(), &cfg).unwrap();
        assert_eq!(back, params);
        assert_eq!(encode(&back, &cfg), bytes);
        let p32 = params.cast::<f32>(&cfg);
        let back32: ModelParams<f32> = load_params(&decode(&encode(&p32, &cfg)).unwrap(), &cfg).unwrap();
        assert_eq!(back32, p32);
    }

    #[test]
    fn rejects_mismatch_and_corruption() {
        let cfg = small();
        let params = ModelParams::<f64>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(7));
        let bytes = encode(&params, &cfg);
        let other = ModelConfig { threshold: 0.3, ..cfg.clone() };
        assert!(load_params::<f64>(&decode(&bytes).unwrap(), &other).is_err());
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(decode(&magic).is_err());
        let mut version = bytes;
        version[8] = 9;
        assert!(decode(&version).is_err());
    }

    #[test]
    fn atomic_write_replaces_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        write_atomic(&path, b"one").unwrap();
        write_atomic(&path, b"two").unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
