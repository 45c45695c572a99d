//! Binary checkpoint container shared by the policy, its frozen reference
//! and the discriminator.
//!
//! Layout (little endian):
//! `b"TSCK"`, u32 version, u8 kind, u32 header length, JSON header,
//! u32 tensor count, then per tensor: u32 name length, name bytes,
//! u32 rank, u64 dims, f32 values.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamBuilder, ParamSet};
use crate::policy::{policy_param_layout, ModelMode, PolicyHyper, PolicyModel, Vocabulary};
use crate::rng;

const MAGIC: &[u8; 4] = b"TSCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointKind {
    Policy = 0,
    Reference = 1,
    Discriminator = 2,
}

impl CheckpointKind {
    fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(CheckpointKind::Policy),
            1 => Ok(CheckpointKind::Reference),
            2 => Ok(CheckpointKind::Discriminator),
            _ => Err(Error::Checkpoint(format!("unknown checkpoint kind {b}"))),
        }
    }
}

/// Encodes a header and parameter set. Values are stored as f32.
pub fn encode<H: Serialize>(kind: CheckpointKind, header: &H, params: &ParamSet) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(64 + header.len() + 4 * params.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(kind as u8);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(params.specs.len() as u32).to_le_bytes());
    for spec in &params.specs {
        out.extend_from_slice(&(spec.name.len() as u32).to_le_bytes());
        out.extend_from_slice(spec.name.as_bytes());
        out.extend_from_slice(&(spec.shape.len() as u32).to_le_bytes());
        for &d in &spec.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in params.get(&spec.name) {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Decodes a container, checking its tensors against the layout the header
/// implies. `layout` receives the parsed header and returns the expected
/// parameter layout.
pub fn decode<H: DeserializeOwned>(
    bytes: &[u8],
    expect: CheckpointKind,
    layout: impl FnOnce(&H) -> Result<ParamBuilder>,
) -> Result<(CheckpointKind, H, ParamSet)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let kind = CheckpointKind::from_byte(r.take(1)?[0])?;
    let compatible = kind == expect
        || matches!(
            (kind, expect),
            (CheckpointKind::Policy, CheckpointKind::Reference) | (CheckpointKind::Reference, CheckpointKind::Policy)
        );
    if !compatible {
        return Err(Error::Checkpoint(format!(
            "expected a {expect:?} checkpoint, found {kind:?}"
        )));
    }
    let hlen = r.u32()? as usize;
    let header: H = serde_json::from_slice(r.take(hlen)?)?;
    // The init draws are immediately overwritten; any stream will do.
    let mut params = layout(&header)?.build(&mut rng::stream(0, "checkpoint-layout", 0));
    let count = r.u32()? as usize;
    if count != params.specs.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, found {count}",
            params.specs.len()
        )));
    }
    for i in 0..count {
        let nlen = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(nlen)?)
            .map_err(|_| Error::Checkpoint("tensor name is not utf-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let spec = params.specs[i].clone();
        if spec.name != name || spec.shape != shape {
            return Err(Error::Checkpoint(format!(
                "tensor {i}: expected {}{:?}, found {name}{shape:?}",
                spec.name, spec.shape
            )));
        }
        let raw = r.take(4 * spec.numel())?;
        let dst = &mut params.data[spec.offset..spec.offset + spec.numel()];
        for (d, c) in dst.iter_mut().zip(raw.chunks_exact(4)) {
            *d = f32::from_le_bytes(c.try_into().unwrap()) as f64;
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after tensors".into()));
    }
    Ok((kind, header, params))
}

#[derive(Serialize, Deserialize)]
struct PolicyHeader {
    vocabulary: Vocabulary,
    hyper: PolicyHyper,
    updates: u64,
}

pub fn policy_to_bytes(model: &PolicyModel) -> Result<Vec<u8>> {
    let kind = match model.mode() {
        ModelMode::Trainable => CheckpointKind::Policy,
        ModelMode::FrozenReference => CheckpointKind::Reference,
    };
    let header = PolicyHeader {
        vocabulary: model.vocab().clone(),
        hyper: *model.hyper(),
        updates: model.update_count(),
    };
    encode(kind, &header, model.params())
}

/// Restores a policy or reference. The mode recorded in the file is kept.
pub fn policy_from_bytes(bytes: &[u8]) -> Result<PolicyModel> {
    let (kind, h, params) = decode::<PolicyHeader>(bytes, CheckpointKind::Policy, |h| {
        h.hyper.validate()?;
        Ok(policy_param_layout(h.vocabulary.len(), &h.hyper))
    })?;
    let mode = match kind {
        CheckpointKind::Reference => ModelMode::FrozenReference,
        _ => ModelMode::Trainable,
    };
    let mut m = PolicyModel::from_parts(h.vocabulary, h.hyper, params, mode);
    m.set_update_count(h.updates);
    Ok(m)
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    // Write-then-rename so a killed run never leaves a torn checkpoint.
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn save_policy(model: &PolicyModel, path: &Path) -> Result<()> {
    write_bytes(path, &policy_to_bytes(model)?)
}

pub fn load_policy(path: &Path) -> Result<PolicyModel> {
    policy_from_bytes(&read_bytes(path)?)
}
