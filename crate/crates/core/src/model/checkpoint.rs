//! `NFCK` checkpoint format, all integers little-endian:
//!
//! ```text
//! "NFCK" | u32 version=1
//! u32 n_layers | d_model | n_heads | d_hidden | vocab_size | max_seq_len | n_tensors
//! n_tensors × { u16 name_len | name (UTF-8) | u32 rank | rank × u32 extent | f32 data (row-major) }
//! u32 CRC32 of every preceding byte
//! ```
//!
//! Weights are stored as `f32`; loading widens them back to `f64`.

use std::path::Path;

use super::{ModelConfig, TransformerModel};
use crate::error::{CheckpointError, Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"NFCK";
pub const VERSION: u32 = 1;

pub fn encode(model: &TransformerModel) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let c = model.config();
    let params = model.named_params();
    for v in [c.n_layers, c.d_model, c.n_heads, c.d_hidden, c.vocab_size, c.max_seq_len, params.len()] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for (name, t) in params {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &e in t.shape() {
            buf.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Truncated(what));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<TransformerModel, CheckpointError> {
    if bytes.len() < 4 {
        return Err(CheckpointError::Truncated("magic"));
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let mut header = Reader { buf: bytes, pos: 4 };
    let version = header.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion { found: version, supported: VERSION });
    }
    if bytes.len() < 8 + 7 * 4 + 4 {
        return Err(CheckpointError::Truncated("config"));
    }
    let body = &bytes[..bytes.len() - 4];
    let mut r = Reader { buf: body, pos: 8 };
    let mut cfg = [0usize; 7];
    for v in cfg.iter_mut() {
        *v = r.u32("config")? as usize;
    }
    let config = ModelConfig {
        n_layers: cfg[0],
        d_model: cfg[1],
        n_heads: cfg[2],
        d_hidden: cfg[3],
        vocab_size: cfg[4],
        max_seq_len: cfg[5],
    };
    let n_tensors = cfg[6];
    let mut tensors = Vec::with_capacity(n_tensors.min(1024));
    for _ in 0..n_tensors {
        let name_len = r.u16("tensor name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("tensor rank")? as usize;
        if rank == 0 || rank > 8 {
            return Err(CheckpointError::Malformed(format!("tensor {name}: rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("tensor extent")? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or(CheckpointError::Truncated("tensor data"))?, "tensor data")?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
        let t = Tensor::new(&shape, data).map_err(|e| CheckpointError::Malformed(format!("tensor {name}: {e}")))?;
        tensors.push((name, t));
    }
    if r.pos != body.len() {
        return Err(CheckpointError::Malformed(format!("{} trailing bytes", body.len() - r.pos)));
    }
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(CheckpointError::ChecksumMismatch { stored, computed });
    }

    let mut model =
        TransformerModel::new(config, 0).map_err(|e| CheckpointError::Malformed(format!("config: {e}")))?;
    let names: Vec<(String, Vec<usize>)> =
        model.named_params().iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect();
    if names.len() != tensors.len() {
        return Err(CheckpointError::Malformed(format!(
            "expected {} tensors, found {}",
            names.len(),
            tensors.len()
        )));
    }
    for (((name, shape), slot), (tname, t)) in names.iter().zip(model.params_mut()).zip(tensors) {
        if *name != tname || shape.as_slice() != t.shape() {
            return Err(CheckpointError::Malformed(format!(
                "expected {name} {shape:?}, found {tname} {:?}",
                t.shape()
            )));
        }
        *slot = t;
    }
    Ok(model)
}

pub fn save_checkpoint(model: &TransformerModel, path: &Path) -> Result<()> {
    std::fs::write(path, encode(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<TransformerModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> TransformerModel {
        let cfg = ModelConfig { n_layers: 2, d_model: 8, n_heads: 2, d_hidden: 16, vocab_size: 12, max_seq_len: 10 };
        TransformerModel::new(cfg, 3).unwrap()
    }

    #[test]
    fn round_trip_logits_and_bits() {
        let m = model();
        let loaded = decode(&encode(&m)).unwrap();
        let (a, _) = m.forward(&[1, 5, 7, 2], false).unwrap();
        let (b, _) = loaded.forward(&[1, 5, 7, 2], false).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-6);
        }
        // second trip is bit-exact once weights are f32-representable
        assert_eq!(encode(&loaded), encode(&decode(&encode(&loaded)).unwrap()));
        assert_eq!(decode(&encode(&loaded)).unwrap(), loaded);
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&model());
        assert_eq!(&bytes[..4], b"NFCK");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 8);
    }

    #[test]
    fn distinct_errors() {
        let good = encode(&model());

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(CheckpointError::BadMagic(_))));

        let mut v2 = good.clone();
        v2[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert_eq!(decode(&v2).unwrap_err(), CheckpointError::UnsupportedVersion { found: 2, supported: 1 });

        let truncated = &good[..good.len() - 37];
        assert!(matches!(decode(truncated), Err(CheckpointError::Truncated(_))));
        assert!(matches!(decode(&good[..10]), Err(CheckpointError::Truncated(_))));

        let mut flipped = good.clone();
        let mid = good.len() / 2;
        flipped[mid] ^= 0x40;
        assert!(matches!(decode(&flipped), Err(CheckpointError::ChecksumMismatch { .. })));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.nfck");
        let m = model();
        save_checkpoint(&m, &p).unwrap();
        let l = load_checkpoint(&p).unwrap();
        assert_eq!(l.config(), m.config());
    }
}
