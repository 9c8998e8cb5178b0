//! The `HVMF` checkpoint format.
//!
//! Layout, little-endian throughout: magic `HVMF`, `u16` version, then records
//! until end of file. A record is `u32` name length, UTF-8 name, `u32` rank,
//! `rank` dims as `u64`, then the `f32` payload.

use std::path::Path;

use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::nn::ParamStore;
use crate::tensor::{Real, Tensor};

use super::{read_file, write_atomic};

pub const MAGIC: &[u8; 4] = b"HVMF";
pub const VERSION: u16 = 1;

const CLAMP_KEY: &str = "flow.clamp";

pub fn encode(store: &ParamStore<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + store.num_scalars() * 4 + store.len() * 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
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
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Checkpoint(format!(
                    "truncated {what} at byte {} (need {n}, have {})",
                    self.pos,
                    self.bytes.len() - self.pos
                ))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ParamStore<f32>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic, not an HVMF file".into()));
    }
    let version = u16::from_le_bytes(r.take(2, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut store = ParamStore::new();
    while r.pos < bytes.len() {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u64("dimension")? as usize);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|c| c.checked_mul(4))
            .ok_or_else(|| Error::Checkpoint(format!("{name}: shape {shape:?} overflows")))?;
        let payload = r.take(count, "payload")?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if store.get(&name).is_some() {
            return Err(Error::Checkpoint(format!("duplicate record {name:?}")));
        }
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        store.insert(name, t);
    }
    Ok(store)
}

pub fn save_params(path: &Path, store: &ParamStore<f32>) -> Result<()> {
    write_atomic(path, &encode(store))
}

pub fn load_params(path: &Path) -> Result<ParamStore<f32>> {
    decode(&read_file(path)?)
}

/// Network weights plus the coupling masks and scale clamp, so the file
/// alone reconstructs the flow.
pub fn flow_to_store<S: Real>(flow: &FlowModel<S>) -> ParamStore<f32> {
    let mut store = flow.params().cast::<f32>();
    for (i, layer) in flow.layers().iter().enumerate() {
        store.insert(format!("coupling.{i}.mask"), layer.mask().cast());
    }
    store.insert(CLAMP_KEY, Tensor::scalar(flow.scale_clamp().as_f64() as f32));
    store
}

pub fn flow_from_store(store: &ParamStore<f32>) -> Result<FlowModel<f32>> {
    let clamp = store.require(CLAMP_KEY)?.item()?;
    let mut masks = Vec::new();
    let mut params = ParamStore::new();
    for (name, t) in store.iter() {
        if name == CLAMP_KEY || name.ends_with(".mask") {
            continue;
        }
        params.insert(name, t.clone());
    }
    while let Some(m) = store.get(&format!("coupling.{}.mask", masks.len())) {
        masks.push(m.clone());
    }
    FlowModel::from_parts(params, masks, clamp).map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn save_flow<S: Real>(path: &Path, flow: &FlowModel<S>) -> Result<()> {
    save_params(path, &flow_to_store(flow))
}

pub fn load_flow(path: &Path) -> Result<FlowModel<f32>> {
    flow_from_store(&load_params(path)?)
}
