//! DCK1 checkpoints: `DCK1`, `u32` version, `u32`-prefixed canonical JSON
//! header, `u32` record count, then per record a `u32`-prefixed UTF-8 name and
//! a DTF1 tensor. All integers little-endian.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::diffusion::schedule::NoiseSchedule;
use crate::diffusion::unet::{DenoiserModel, ParamStore, UNetConfig};
use crate::error::{DiecError, Result};
use crate::numeric::Tensor;

pub const DCK1_MAGIC: &[u8; 4] = b"DCK1";
pub const DCK1_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub architecture: UNetConfig,
    pub schedule_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

fn write_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| DiecError::Format("length exceeds u32".into()))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| DiecError::Format(format!("truncated checkpoint: {e}")))?;
    Ok(u32::from_le_bytes(b) as usize)
}

/// Canonical JSON: object keys sorted, no whitespace.
pub fn canonical_json<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value)?;
    Ok(serde_json::to_string(&v)?)
}

pub fn write_checkpoint<W: Write>(w: W, model: &DenoiserModel, sched: &NoiseSchedule) -> Result<()> {
    write_checkpoint_tagged(w, model, sched, None)
}

/// As [`write_checkpoint`], recording `config_hash` in the header.
pub fn write_checkpoint_tagged<W: Write>(
    mut w: W,
    model: &DenoiserModel,
    sched: &NoiseSchedule,
    config_hash: Option<&str>,
) -> Result<()> {
    let (beta_start, beta_end) = sched.beta_range();
    let header = CheckpointHeader {
        architecture: model.config().clone(),
        schedule_steps: sched.steps(),
        beta_start,
        beta_end,
        config_hash: config_hash.map(str::to_string),
    };
    let json = canonical_json(&header)?;
    w.write_all(DCK1_MAGIC)?;
    w.write_all(&DCK1_VERSION.to_le_bytes())?;
    write_u32(&mut w, json.len())?;
    w.write_all(json.as_bytes())?;
    write_u32(&mut w, model.params().len())?;
    for (name, t) in model.params().iter() {
        write_u32(&mut w, name.len())?;
        w.write_all(name.as_bytes())?;
        t.write_dtf1(&mut w)?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<(DenoiserModel, NoiseSchedule)> {
    let (_, model, sched) = read_checkpoint_with_header(r)?;
    Ok((model, sched))
}

pub fn read_checkpoint_with_header<R: Read>(mut r: R) -> Result<(CheckpointHeader, DenoiserModel, NoiseSchedule)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| DiecError::Format(format!("truncated checkpoint: {e}")))?;
    if &magic != DCK1_MAGIC {
        return Err(DiecError::Format("bad DCK1 magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version as u32 != DCK1_VERSION {
        return Err(DiecError::Format(format!("unsupported checkpoint version {version}")));
    }
    let len = read_u32(&mut r)?;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(|e| DiecError::Format(format!("truncated checkpoint header: {e}")))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&json).map_err(|e| DiecError::Format(format!("checkpoint header: {e}")))?;
    let count = read_u32(&mut r)?;
    let mut params = ParamStore::default();
    for _ in 0..count {
        let nlen = read_u32(&mut r)?;
        let mut name = vec![0u8; nlen];
        r.read_exact(&mut name).map_err(|e| DiecError::Format(format!("truncated record name: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| DiecError::Format("record name is not UTF-8".into()))?;
        params.insert(&name, Tensor::read_dtf1(&mut r)?);
    }
    let sched = NoiseSchedule::linear(header.schedule_steps, header.beta_start, header.beta_end)?;
    let model = DenoiserModel::from_parts(header.architecture.clone(), params)?;
    Ok((header, model, sched))
}
