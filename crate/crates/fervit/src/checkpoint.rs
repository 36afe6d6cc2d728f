//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   4  b"FVT1"
//! version u32
//! digest  u64   FNV-1a over the canonical model-config JSON
//! count   u32   number of parameter records
//! record: path_len u32, path bytes (UTF-8),
//!         ndim u32, dims u64 * ndim,
//!         values f64 * numel (LE bit patterns)
//! ```
//!
//! Save then load restores every parameter bit-exactly; loading verifies
//! the magic, version, config digest, and each record's path and shape
//! against the receiving model.

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"FVT1";
pub const VERSION: u32 = 1;

/// FNV-1a 64-bit hash, used as a cheap config integrity digest.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

pub fn config_digest(cfg: &ModelConfig) -> u64 {
    let json = serde_json::to_string(cfg).expect("config serializes");
    fnv1a64(json.as_bytes())
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&config_digest(&model.cfg).to_le_bytes());

    let mut records: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
    model.visit_params(&mut |p, t| {
        records.push((p.to_string(), t.shape().to_vec(), t.values().to_vec()));
    });
    buf.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (p, shape, values) in records {
        buf.extend_from_slice(&(p.len() as u32).to_le_bytes());
        buf.extend_from_slice(p.as_bytes());
        buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for d in shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

struct Reader {
    data: Vec<u8>,
    pos: usize,
}

impl Reader {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::format("checkpoint", "truncated file"));
        }
        let slice = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Load a checkpoint into a model built for the same configuration. The
/// tensors keep their grad requirement; only values are replaced.
pub fn load_into(model: &mut Model, path: &Path) -> Result<()> {
    let mut data = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut data)?;
    let mut r = Reader { data, pos: 0 };

    if r.take(4)? != MAGIC {
        return Err(Error::format("checkpoint", "bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(
            "checkpoint",
            format!("unsupported version {version}"),
        ));
    }
    let digest = r.u64()?;
    if digest != config_digest(&model.cfg) {
        return Err(Error::config(
            "checkpoint was saved under a different model configuration",
        ));
    }

    let count = r.u32()? as usize;
    let mut records: std::collections::HashMap<String, (Vec<usize>, Vec<f64>)> =
        std::collections::HashMap::with_capacity(count);
    for _ in 0..count {
        let path_len = r.u32()? as usize;
        let path = String::from_utf8(r.take(path_len)?.to_vec())
            .map_err(|_| Error::format("checkpoint", "non-UTF-8 parameter path"))?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut values = Vec::with_capacity(numel);
        for _ in 0..numel {
            values.push(r.f64()?);
        }
        records.insert(path, (shape, values));
    }
    if r.pos != r.data.len() {
        return Err(Error::format("checkpoint", "trailing bytes"));
    }

    let mut failure: Option<Error> = None;
    let mut seen = 0usize;
    model.visit_params_mut(&mut |path, tensor| {
        if failure.is_some() {
            return;
        }
        match records.remove(path) {
            None => failure = Some(Error::format("checkpoint", format!("missing record {path}"))),
            Some((shape, values)) => {
                if shape != tensor.shape() {
                    failure = Some(Error::shape("checkpoint load", &shape, tensor.shape()));
                    return;
                }
                seen += 1;
                let rebuilt = if tensor.requires_grad() {
                    Tensor::param(values, &shape)
                } else {
                    Tensor::from_vec(values, &shape)
                };
                match rebuilt {
                    Ok(t) => *tensor = t,
                    Err(e) => failure = Some(e),
                }
            }
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if !records.is_empty() {
        let mut extra: Vec<&String> = records.keys().collect();
        extra.sort();
        return Err(Error::format(
            "checkpoint",
            format!("unknown records: {extra:?}"),
        ));
    }
    debug_assert!(seen == count);
    Ok(())
}
