//! Binary checkpoint: parameters, optimizer moments, epoch and shuffle RNG state.

use std::fs;
use std::path::Path;

use crate::binio::Cursor;
use crate::error::{Error, Result};
use crate::optim::AdamState;
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"TGCKPT1\n";
const TRAILER: usize = 4 + 16;

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub value: Tensor<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Parameters, then first moments (`/m`), then second moments (`/v`).
    pub records: Vec<Record>,
    pub epoch: u32,
    pub rng_state: [u64; 2],
}

impl Checkpoint {
    pub fn capture<T: Scalar>(store: &ParamStore<T>, opt: &AdamState<T>, epoch: u32, rng_state: [u64; 2]) -> Self {
        let mut records = Vec::with_capacity(3 * store.len());
        for (name, value) in store.iter() {
            records.push(Record {
                name: name.to_string(),
                value: value.cast(),
            });
        }
        for (suffix, moments) in [("/m", &opt.m), ("/v", &opt.v)] {
            for (id, value) in store.ids().zip(moments) {
                records.push(Record {
                    name: format!("{}{suffix}", store.name(id)),
                    value: value.cast(),
                });
            }
        }
        Self {
            records,
            epoch,
            rng_state,
        }
    }

    pub fn find(&self, name: &str) -> Option<&Tensor<f32>> {
        self.records.iter().find(|r| r.name == name).map(|r| &r.value)
    }

    /// Copy parameters into `store`, checking names and shapes.
    pub fn restore_params<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        for id in store.ids().collect::<Vec<_>>() {
            let t = self.lookup(store.name(id), store.get(id).shape())?;
            store.set(id, t.cast())?;
        }
        Ok(())
    }

    /// Optimizer moments for `store`; the step count is supplied by the caller.
    pub fn restore_moments<T: Scalar>(&self, store: &ParamStore<T>, step: u64) -> Result<AdamState<T>> {
        let mut state = AdamState::new(store);
        for id in store.ids() {
            let (name, shape) = (store.name(id), store.get(id).shape());
            state.m[id.index()] = self.lookup(&format!("{name}/m"), shape)?.cast();
            state.v[id.index()] = self.lookup(&format!("{name}/v"), shape)?.cast();
        }
        state.step = step;
        Ok(state)
    }

    fn lookup(&self, name: &str, shape: &[usize]) -> Result<&Tensor<f32>> {
        let t = self
            .find(name)
            .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter {name}")))?;
        if t.shape() != shape {
            return Err(Error::Config(format!(
                "checkpoint parameter {name} has shape {:?}, model expects {shape:?}",
                t.shape()
            )));
        }
        Ok(t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        for r in &self.records {
            out.extend((r.name.len() as u32).to_le_bytes());
            out.extend(r.name.as_bytes());
            out.extend((r.value.rank() as u32).to_le_bytes());
            for &d in r.value.shape() {
                out.extend((d as u32).to_le_bytes());
            }
            for &v in r.value.data() {
                out.extend(v.to_le_bytes());
            }
        }
        out.extend(self.epoch.to_le_bytes());
        out.extend(self.rng_state[0].to_le_bytes());
        out.extend(self.rng_state[1].to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::format(path, reason);
        if bytes.len() < MAGIC.len() + TRAILER || &bytes[..MAGIC.len()] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let body_end = bytes.len() - TRAILER;
        let mut cur = Cursor::new(&bytes[..body_end]);
        cur.take(MAGIC.len());
        let mut records = Vec::new();
        while !cur.at_end() {
            let len = cur.u32().ok_or_else(|| bad("truncated record name"))? as usize;
            let name = cur.take(len).ok_or_else(|| bad("truncated record name"))?;
            let name = String::from_utf8(name.to_vec()).map_err(|_| bad("record name is not UTF-8"))?;
            let rank = cur.u32().ok_or_else(|| bad("truncated record rank"))? as usize;
            let shape = (0..rank)
                .map(|_| cur.u32().map(|d| d as usize))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| bad("truncated record shape"))?;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| bad("record too large"))?;
            let raw = cur.take(n.checked_mul(4).ok_or_else(|| bad("record too large"))?).ok_or_else(|| bad("truncated record payload"))?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            let value = Tensor::new(&shape, data).map_err(|e| bad(&e.to_string()))?;
            records.push(Record { name, value });
        }
        let tr = &bytes[body_end..];
        Ok(Self {
            records,
            epoch: u32::from_le_bytes(tr[..4].try_into().unwrap()),
            rng_state: [
                u64::from_le_bytes(tr[4..12].try_into().unwrap()),
                u64::from_le_bytes(tr[12..20].try_into().unwrap()),
            ],
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
