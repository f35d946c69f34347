//! Checkpoint file layout (all integers little-endian):
//!
//! ```text
//! "ITFCKPT1"
//! u32 header length, header text (`key=value` lines: config, step, adam_t)
//! u32 tensor count
//! per tensor: u16 name length, name, u8 rank, u32 dims.., f32 values..
//! 32-byte SHA-256 of everything above
//! ```
//! Weights come first in canonical order, then `adam.m.*` and `adam.v.*`
//! when optimizer state is present.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{AdamMoments, ModelConfig, ModelError, ModelState};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ITFCKPT1";
const DIGEST_LEN: usize = 32;

pub fn save_checkpoint<T: Scalar>(state: &ModelState<T>, path: &Path) -> Result<(), ModelError> {
    state.shape_audit()?;
    let mut header = state.config.to_header();
    header.push_str(&format!("step={}\n", state.step));
    if let Some(mo) = &state.moments {
        header.push_str(&format!("adam_t={}\n", mo.t));
    }

    let specs = state.config.param_specs();
    let mut tensors: Vec<(String, &Tensor<T>)> = specs
        .iter()
        .zip(&state.params)
        .map(|((n, _), t)| (n.clone(), t))
        .collect();
    if let Some(mo) = &state.moments {
        for (prefix, list) in [("adam.m.", &mo.m), ("adam.v.", &mo.v)] {
            tensors.extend(specs.iter().zip(list).map(|((n, _), t)| (format!("{prefix}{n}"), t)));
        }
    }

    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(header.as_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(t.shape().len() as u8);
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);

    let tmp = path.with_extension("itf.partial");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<ModelState<T>, ModelError> {
    let bytes = fs::read(path)?;
    decode(&bytes)
}

/// Loads and additionally requires the stored architecture to equal `expected`.
pub fn load_checkpoint_expecting<T: Scalar>(
    path: &Path,
    expected: &ModelConfig,
) -> Result<ModelState<T>, ModelError> {
    let state = load_checkpoint(path)?;
    let mut stored = state.config.clone();
    stored.dropout = expected.dropout;
    stored.seed = expected.seed;
    if &stored != expected {
        return Err(ModelError::ConfigError(format!(
            "checkpoint has {}, expected {expected}",
            state.config
        )));
    }
    Ok(state)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| ModelError::Format("unexpected end of payload".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, ModelError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, ModelError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn decode<T: Scalar>(bytes: &[u8]) -> Result<ModelState<T>, ModelError> {
    if bytes.len() < CHECKPOINT_MAGIC.len() + DIGEST_LEN {
        return Err(ModelError::ChecksumError(format!(
            "file is only {} bytes",
            bytes.len()
        )));
    }
    let (payload, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(payload).as_slice() != digest {
        return Err(ModelError::ChecksumError(
            "digest mismatch (truncated or corrupted)".into(),
        ));
    }
    if &payload[..8] != CHECKPOINT_MAGIC {
        return Err(ModelError::Format("not a checkpoint file".into()));
    }
    let mut r = Reader { bytes: payload, pos: 8 };
    let header_len = r.u32()? as usize;
    let header = std::str::from_utf8(r.take(header_len)?)
        .map_err(|_| ModelError::Format("header is not UTF-8".into()))?;
    let fields: HashMap<&str, &str> = header
        .lines()
        .filter_map(|l| l.split_once('='))
        .collect();
    let field = |k: &str| {
        fields
            .get(k)
            .copied()
            .ok_or_else(|| ModelError::Format(format!("header lacks `{k}`")))
    };
    fn parse<V: std::str::FromStr>(k: &str, v: &str) -> Result<V, ModelError> {
        v.parse()
            .map_err(|_| ModelError::Format(format!("bad header value {k}={v}")))
    }
    let config = ModelConfig {
        vocab_size: parse("vocab_size", field("vocab_size")?)?,
        context_len: parse("context_len", field("context_len")?)?,
        d_model: parse("d_model", field("d_model")?)?,
        n_heads: parse("n_heads", field("n_heads")?)?,
        n_layers: parse("n_layers", field("n_layers")?)?,
        d_ff: parse("d_ff", field("d_ff")?)?,
        dropout: parse("dropout", field("dropout")?)?,
        seed: parse("seed", field("seed")?)?,
    };
    config.validate()?;
    let step: u64 = parse("step", field("step")?)?;
    let adam_t: Option<u64> = fields.get("adam_t").map(|v| parse("adam_t", v)).transpose()?;

    let count = r.u32()? as usize;
    let mut tensors: HashMap<String, Tensor<T>> = HashMap::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| ModelError::Format("tensor name is not UTF-8".into()))?;
        let rank = r.u8()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or_else(|| ModelError::Format("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect();
        tensors.insert(name, Tensor::new(&shape, data)?);
    }
    if r.pos != payload.len() {
        return Err(ModelError::Format("trailing bytes after tensors".into()));
    }

    let specs = config.param_specs();
    let mut take = |name: &str| {
        tensors
            .remove(name)
            .ok_or_else(|| ModelError::Format(format!("missing tensor `{name}`")))
    };
    let params = specs.iter().map(|(n, _)| take(n)).collect::<Result<Vec<_>, _>>()?;
    let moments = match adam_t {
        Some(t) => Some(AdamMoments {
            t,
            m: specs.iter().map(|(n, _)| take(&format!("adam.m.{n}"))).collect::<Result<_, _>>()?,
            v: specs.iter().map(|(n, _)| take(&format!("adam.v.{n}"))).collect::<Result<_, _>>()?,
        }),
        None => None,
    };
    if let Some(extra) = tensors.keys().next() {
        return Err(ModelError::Format(format!("unexpected tensor `{extra}`")));
    }
    let state = ModelState {
        config,
        params,
        step,
        moments,
    };
    state.shape_audit()?;
    Ok(state)
}
