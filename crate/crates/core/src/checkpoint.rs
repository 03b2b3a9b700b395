//! Binary parameter checkpoints.
//!
//! Layout: the magic bytes `CODE1`; a `u64` byte length followed by the
//! model config as UTF-8 JSON; a `u64` matrix count; then for each matrix in
//! [`ModelParams::named`] order a `u64` row count, a `u64` column count and
//! the row-major values as `f64`. All integers and floats are little-endian.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"CODE1";

pub fn encode(config: &ModelConfig, params: &ModelParams) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(config)?;
    let named = params.named();
    let mut out = Vec::with_capacity(64 + json.len() + 8 * params.count() + 16 * named.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(named.len() as u64).to_le_bytes());
    for p in named {
        out.extend_from_slice(&(p.tensor.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(p.tensor.cols() as u64).to_le_bytes());
        for v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|end| *end <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated while reading {what}")))?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("eight bytes")))
    }

    fn usize(&mut self, what: &str) -> Result<usize> {
        usize::try_from(self.u64(what)?)
            .map_err(|_| Error::Checkpoint(format!("{what} does not fit in memory")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<(ModelConfig, ModelParams)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let len = r.usize("config length")?;
    let config: ModelConfig = serde_json::from_slice(r.take(len, "config")?)?;
    config.validate()?;
    let count = r.usize("matrix count")?;
    let mut tensors = Vec::with_capacity(count.min(64));
    for k in 0..count {
        let rows = r.usize("rows")?;
        let cols = r.usize("cols")?;
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Checkpoint(format!("matrix {k} is too large")))?;
        let data = r
            .take(n, "matrix data")?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
            .collect();
        tensors.push(Tensor::new(rows, cols, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    let params = ModelParams::from_tensors(&config, tensors)?;
    Ok((config, params))
}

pub fn save(path: impl AsRef<Path>, config: &ModelConfig, params: &ModelParams) -> Result<()> {
    let bytes = encode(config, params)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<(ModelConfig, ModelParams)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}
