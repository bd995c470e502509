use std::path::Path;

use crc::{Crc, CRC_64_XZ};

use super::atomic_write;
use crate::encoder::{EncoderConfig, EncoderParams, TextEncoder, Vocab};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"HIRM";
pub const FORMAT_VERSION: u32 = 1;

const CHECKSUM: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);

pub fn checksum(bytes: &[u8]) -> u64 {
    CHECKSUM.checksum(bytes)
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Config(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Little-endian encoding of config, vocab and parameters followed by a
/// CRC-64 of everything before it.
pub fn encode_checkpoint(encoder: &TextEncoder) -> Result<Vec<u8>> {
    let cfg = encoder.config();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for v in [
        cfg.num_blocks,
        cfg.model_dim,
        cfg.num_heads,
        cfg.ff_dim,
        cfg.vocab_size,
        cfg.max_tokens,
    ] {
        put_u32(&mut out, v)?;
    }
    out.extend_from_slice(&cfg.layernorm_eps.to_le_bytes());
    out.extend_from_slice(&cfg.init_seed.to_le_bytes());

    let tokens = encoder.vocab.tokens();
    put_u32(&mut out, tokens.len())?;
    for t in tokens {
        put_u32(&mut out, t.len())?;
        out.extend_from_slice(t.as_bytes());
    }

    let tensors = encoder.params.tensors();
    put_u32(&mut out, tensors.len())?;
    for t in tensors {
        put_u32(&mut out, t.shape().len())?;
        for &d in t.shape() {
            put_u32(&mut out, d)?;
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sum = checksum(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, section: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                section: section.to_string(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, section: &str) -> Result<usize> {
        let b = self.take(4, section)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self, section: &str) -> Result<u64> {
        let b = self.take(8, section)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn f64(&mut self, section: &str) -> Result<f64> {
        Ok(f64::from_bits(self.u64(section)?))
    }
}

/// Parses a checkpoint. Checks, in order: magic, version, structure
/// (truncation), checksum, then that every tensor matches the shape the
/// embedded config implies.
pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<TextEncoder> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4, "magic").map_err(|_| Error::BadMagic { path: path.into() })? != MAGIC {
        return Err(Error::BadMagic { path: path.into() });
    }
    let version = r.u32("version")? as u32;
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            path: path.into(),
            found: version,
            expected: FORMAT_VERSION,
        });
    }

    let config = EncoderConfig {
        num_blocks: r.u32("config")?,
        model_dim: r.u32("config")?,
        num_heads: r.u32("config")?,
        ff_dim: r.u32("config")?,
        vocab_size: r.u32("config")?,
        max_tokens: r.u32("config")?,
        layernorm_eps: r.f64("config")?,
        init_seed: r.u64("config")?,
    };

    let n_tokens = r.u32("vocab")?;
    let mut tokens = Vec::with_capacity(n_tokens.min(bytes.len()));
    for _ in 0..n_tokens {
        let len = r.u32("vocab")?;
        let raw = r.take(len, "vocab")?;
        let token = std::str::from_utf8(raw).map_err(|_| Error::ConfigFile {
            path: path.into(),
            message: "vocabulary token is not UTF-8".into(),
        })?;
        tokens.push(token.to_string());
    }

    let n_tensors = r.u32("parameters")?;
    let mut raw_tensors = Vec::with_capacity(n_tensors.min(bytes.len()));
    for i in 0..n_tensors {
        let section = format!("parameter {i}");
        let ndim = r.u32(&section)?;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape.push(r.u32(&section)?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Truncated {
                path: path.into(),
                section: section.clone(),
            })?;
        let data = r
            .take(numel, &section)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect::<Vec<_>>();
        raw_tensors.push((shape, data));
    }

    let body_end = r.pos;
    let stored = r.u64("checksum")?;
    let computed = checksum(&bytes[..body_end]);
    if stored != computed || r.pos != bytes.len() {
        return Err(Error::ChecksumMismatch {
            path: path.into(),
            stored,
            computed,
        });
    }

    config.validate().map_err(|e| Error::ConfigFile {
        path: path.into(),
        message: e.to_string(),
    })?;
    let vocab = Vocab::from_text(&tokens.join("\n")).map_err(|e| Error::ConfigFile {
        path: path.into(),
        message: e.to_string(),
    })?;
    if vocab.len() != config.vocab_size {
        return Err(Error::ShapeConsistency {
            path: path.into(),
            name: "vocab".into(),
            found: vec![vocab.len()],
            expected: vec![config.vocab_size],
        });
    }
    if raw_tensors.len() != config.num_params() {
        return Err(Error::ShapeConsistency {
            path: path.into(),
            name: "parameter count".into(),
            found: vec![raw_tensors.len()],
            expected: vec![config.num_params()],
        });
    }
    let mut tensors = Vec::with_capacity(raw_tensors.len());
    for (slot, (shape, data)) in config.slots().zip(raw_tensors) {
        let expected = config.shape(slot);
        if shape != expected {
            return Err(Error::ShapeConsistency {
                path: path.into(),
                name: slot.to_string(),
                found: shape,
                expected,
            });
        }
        tensors.push(Tensor::new(shape, data)?);
    }
    Ok(TextEncoder {
        vocab,
        params: EncoderParams::from_tensors(config, tensors)?,
    })
}

pub fn save_checkpoint(encoder: &TextEncoder, path: &Path) -> Result<()> {
    atomic_write(path, &encode_checkpoint(encoder)?)
}

pub fn load_checkpoint(path: &Path) -> Result<TextEncoder> {
    let bytes = std::fs::read(path).map_err(Error::file(path))?;
    decode_checkpoint(&bytes, path)
}
