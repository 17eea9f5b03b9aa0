//! Binary checkpoint container. All integers are little endian.
//!
//! ```text
//! magic        8 bytes   "PLTXCKPT"
//! version      u32       container version (1)
//! config_hash  u64       hash of the model-config JSON below
//! config_len   u32       byte length of the JSON
//! config       bytes     UTF-8 JSON of the model configuration
//! prov_len     u32       byte length of the provenance note
//! provenance   bytes     UTF-8 free text, e.g. the run-configuration hash
//! tensors      u32       tensor count
//!   name_len   u32
//!   name       bytes     UTF-8 dotted path, e.g. "image.theta_tau"
//!   rows       u32
//!   cols       u32
//!   data       f64 * rows * cols, row-major
//! optimizer    u8        0 = absent, 1 = Adam
//!   step       u64
//!   len        u64
//!   m          f64 * len
//!   v          f64 * len
//! ```
//!
//! Nothing may follow the optimizer section.

use std::path::Path;

use super::adam::AdamState;
use crate::error::{Error, Result};
use crate::layers::Parameters;
use crate::model::{ModelConfig, ModelParams};
use crate::provenance::digest_u64;

pub const MAGIC: &[u8; 8] = b"PLTXCKPT";
pub const CONTAINER_VERSION: u32 = 1;

/// Decoded checkpoint contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub optimizer: Option<AdamState>,
    pub provenance: String,
}

/// Serializes parameters, optional optimizer state and a provenance note.
pub fn encode_checkpoint(
    params: &ModelParams,
    optimizer: Option<&AdamState>,
    provenance: &str,
) -> Result<Vec<u8>> {
    let config = serde_json::to_vec(&params.config)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    out.extend_from_slice(&digest_u64(&config).to_le_bytes());
    put_len(&mut out, config.len())?;
    out.extend_from_slice(&config);
    put_len(&mut out, provenance.len())?;
    out.extend_from_slice(provenance.as_bytes());
    let tensors = params.named_tensors();
    put_len(&mut out, tensors.len())?;
    for (name, m) in &tensors {
        put_len(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_len(&mut out, m.rows())?;
        put_len(&mut out, m.cols())?;
        for x in m.as_slice() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    match optimizer {
        None => out.push(0),
        Some(s) => {
            out.push(1);
            out.extend_from_slice(&s.step.to_le_bytes());
            out.extend_from_slice(&(s.m.len() as u64).to_le_bytes());
            for x in s.m.iter().chain(&s.v) {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    Ok(out)
}

fn put_len(out: &mut Vec<u8>, n: usize) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| Error::Checkpoint(format!("length {n} overflows u32")))?;
    out.extend_from_slice(&n.to_le_bytes());
    Ok(())
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
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
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

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

/// Inverse of [`encode_checkpoint`]. Tensor names and shapes must match a
/// model built from the stored configuration.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CONTAINER_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let hash = r.u64()?;
    let len = r.u32()? as usize;
    let config_bytes = r.take(len)?;
    if digest_u64(config_bytes) != hash {
        return Err(Error::Checkpoint("config hash mismatch".into()));
    }
    let config: ModelConfig = serde_json::from_slice(config_bytes)?;
    let n = r.u32()? as usize;
    let provenance = std::str::from_utf8(r.take(n)?)
        .map_err(|_| Error::Checkpoint("provenance is not UTF-8".into()))?
        .to_string();
    let mut params = ModelParams::init(config, 0)?;
    let expected = params.named_tensors();
    let count = r.u32()? as usize;
    if count != expected.len() {
        return Err(Error::Checkpoint(format!(
            "{count} tensors stored, model has {}",
            expected.len()
        )));
    }
    let mut flat = Vec::with_capacity(params.parameter_count());
    for (want_name, want) in &expected {
        let n = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let (rows, cols) = (r.u32()? as usize, r.u32()? as usize);
        if name != want_name || (rows, cols) != want.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {name} {rows}x{cols} where {want_name} {}x{} was expected",
                want.rows(),
                want.cols()
            )));
        }
        flat.extend(r.f64s(rows * cols)?);
    }
    params.unflatten(&flat);
    let optimizer = match r.u8()? {
        0 => None,
        1 => {
            let step = r.u64()?;
            let n = r.u64()? as usize;
            if n != flat.len() {
                return Err(Error::Checkpoint(format!(
                    "optimizer state has {n} entries for {} parameters",
                    flat.len()
                )));
            }
            let m = r.f64s(n)?;
            let v = r.f64s(n)?;
            Some(AdamState { step, m, v })
        }
        t => return Err(Error::Checkpoint(format!("unknown optimizer tag {t}"))),
    };
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(Checkpoint {
        params,
        optimizer,
        provenance,
    })
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    params: &ModelParams,
    optimizer: Option<&AdamState>,
    provenance: &str,
) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(params, optimizer, provenance)?)
        .map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text_head::TextHeadVariant;

    fn model() -> ModelParams {
        let mut cfg = ModelConfig::default();
        cfg.text.variant = TextHeadVariant::T1MT2;
        ModelParams::init(cfg, 11).unwrap()
    }

    #[test]
    fn round_trip_with_and_without_optimizer() {
        let p = model();
        let c = decode_checkpoint(&encode_checkpoint(&p, None, "").unwrap()).unwrap();
        assert_eq!(c.params, p);
        assert!(c.optimizer.is_none());
        let n = p.parameter_count();
        let s = AdamState {
            step: 3,
            m: (0..n).map(|i| i as f64).collect(),
            v: vec![0.25; n],
        };
        let c = decode_checkpoint(&encode_checkpoint(&p, Some(&s), "run 0f").unwrap()).unwrap();
        assert_eq!(c.params, p);
        assert_eq!(c.optimizer, Some(s));
        assert_eq!(c.provenance, "run 0f");
    }

    #[test]
    fn layout_starts_with_magic_version_and_hash() {
        let p = model();
        let bytes = encode_checkpoint(&p, None, "abc").unwrap();
        assert_eq!(&bytes[..8], b"PLTXCKPT");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        let len = u32::from_le_bytes(bytes[20..24].try_into().unwrap()) as usize;
        let config = &bytes[24..24 + len];
        assert_eq!(
            u64::from_le_bytes(bytes[12..20].try_into().unwrap()),
            digest_u64(config)
        );
        let prov = 24 + len;
        assert_eq!(u32::from_le_bytes(bytes[prov..prov + 4].try_into().unwrap()), 3);
        assert_eq!(&bytes[prov + 4..prov + 7], b"abc");
        // header + config + provenance + count + per-tensor framing + payload + optimizer tag
        let framing: usize = p.named_tensors().iter().map(|(n, _)| 12 + n.len()).sum();
        assert_eq!(
            bytes.len(),
            24 + len + 7 + 4 + framing + 8 * p.parameter_count() + 1
        );
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = encode_checkpoint(&model(), None, "").unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad).is_err());
        let mut bad = bytes.clone();
        bad[30] ^= 1;
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Checkpoint(_))));
        assert!(decode_checkpoint(&bytes[..bytes.len() - 9]).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(decode_checkpoint(&long).is_err());
    }
}
