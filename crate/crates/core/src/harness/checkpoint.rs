//! Binary checkpoints.
//!
//! ```text
//! "HCT1"                     magic
//! u32                        format version
//! u32, bytes                 model config (JSON)
//! u32                        parameter count
//! per parameter:
//!   u32, bytes               name (UTF-8)
//!   u32, u64 × ndim          shape
//!   f64 × product(shape)     values
//! ```
//!
//! All integers and floats are little-endian. Values are stored at 64 bits
//! whatever the model's scalar type.

use std::fs;
use std::path::Path;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::HctModel;
use crate::numerics::{ParamStore, Tensor};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"HCT1";
pub const VERSION: u32 = 1;

pub fn encode<T: Scalar>(model: &HctModel<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(&model.cfg).map_err(|e| Error::Config(e.to_string()))?;
    put_len(&mut out, cfg.len())?;
    out.extend_from_slice(&cfg);
    put_len(&mut out, model.params.len())?;
    for (name, t) in model.params.iter() {
        put_len(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_len(&mut out, t.shape().len())?;
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
        }
    }
    Ok(out)
}

fn put_len(out: &mut Vec<u8>, n: usize) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| Error::Config(format!("length {n} exceeds checkpoint limits")))?;
    out.extend_from_slice(&n.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() < n {
            return Err(Error::Truncated);
        }
        let (head, rest) = self.bytes.split_at(n);
        self.bytes = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }
}

/// Config and raw parameters, with no layout validation.
pub fn decode(bytes: &[u8]) -> Result<(ModelConfig, ParamStore<f64>)> {
    let mut r = Reader { bytes };
    if r.take(4).map_err(|_| Error::BadMagic)? != MAGIC {
        return Err(Error::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let n = r.len()?;
    let cfg: ModelConfig =
        serde_json::from_slice(r.take(n)?).map_err(|e| Error::Config(format!("checkpoint header: {e}")))?;
    let count = r.len()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let n = r.len()?;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|e| Error::Config(format!("checkpoint parameter name: {e}")))?
            .to_string();
        let ndim = r.len()?;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            let d = usize::try_from(r.u64()?).map_err(|_| Error::Truncated)?;
            shape.push(d);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or(Error::Truncated)?;
        let raw = r.take(numel.checked_mul(8).ok_or(Error::Truncated)?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        store.insert(name, Tensor::new(&shape, data)?);
    }
    if !r.bytes.is_empty() {
        return Err(Error::Config(format!(
            "checkpoint has {} trailing bytes",
            r.bytes.len()
        )));
    }
    Ok((cfg, store))
}

pub fn save_checkpoint<T: Scalar>(model: &HctModel<T>, path: &Path) -> Result<()> {
    fs::write(path, encode(model)?)?;
    Ok(())
}

/// Loads a model using the config stored in the file.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<HctModel<T>> {
    let (cfg, store) = decode(&fs::read(path)?)?;
    HctModel::with_params(cfg, store.cast())
}

/// Loads parameters into the layout of `cfg`, rejecting any parameter whose
/// stored shape differs from what `cfg` implies.
pub fn load_checkpoint_as<T: Scalar>(path: &Path, cfg: ModelConfig) -> Result<HctModel<T>> {
    let (_, store) = decode(&fs::read(path)?)?;
    HctModel::with_params(cfg, store.cast())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            image_size: 16,
            shallow_channels: 2,
            deep_channels: 4,
            dcm_channels: 2,
            ..ModelConfig::toy()
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let m = HctModel::<f64>::new(tiny()).unwrap();
        let bytes = encode(&m).unwrap();
        let (cfg, store) = decode(&bytes).unwrap();
        assert_eq!(cfg, m.cfg);
        for ((a, x), (b, y)) in m.params.iter().zip(store.iter()) {
            assert_eq!(a, b);
            let bits = |t: &Tensor<f64>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(x), bits(y));
        }
    }

    #[test]
    fn distinct_failures() {
        let m = HctModel::<f64>::new(tiny()).unwrap();
        let bytes = encode(&m).unwrap();
        for cut in [3, 4, 10, bytes.len() / 2, bytes.len() - 1] {
            let err = decode(&bytes[..cut]).unwrap_err();
            let expected_magic = cut < 4;
            assert_eq!(matches!(err, Error::BadMagic), expected_magic, "cut {cut}: {err}");
            if !expected_magic {
                assert!(matches!(err, Error::Truncated), "cut {cut}: {err}");
            }
        }
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(matches!(decode(&wrong), Err(Error::BadMagic)));
        let mut wrong = bytes;
        wrong[4] = 9;
        assert!(matches!(decode(&wrong), Err(Error::VersionMismatch { found: 9, .. })));
    }
}
