//! Versioned binary checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic    8 bytes  "BNNKCKPT"
//! version  u32
//! meta     u64 length + UTF-8 JSON {config, bn, extra}
//! count    u32
//! tensor*  u32 name length, name, u32 rank, u64 extents, f64 values
//! ```
//!
//! Values are stored as raw IEEE-754 bits, so a round trip is bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, Param};
use crate::error::{Error, Result};
use crate::tensor::{BnState, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"BNNKCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    /// Learned class centers, `[N, D]`, when center loss was used.
    pub centers: Option<Tensor>,
    /// Free-form metadata such as the manifest hash.
    pub extra: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: ModelConfig,
    bn: Option<BnMeta>,
    #[serde(default)]
    block_bn: Vec<BnMeta>,
    trainable: Vec<bool>,
    extra: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct BnMeta {
    momentum: f64,
    eps: f64,
}

const RUNNING_MEAN: &str = "bn.running_mean";
const RUNNING_VAR: &str = "bn.running_var";
const CENTERS: &str = "centers";

fn block_stat_names(i: usize) -> (String, String) {
    (
        format!("backbone.bn{i}.running_mean"),
        format!("backbone.bn{i}.running_var"),
    )
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_bits().to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> std::result::Result<(String, Tensor), String> {
        let name_len = self.u32()? as usize;
        let name = String::from_utf8(self.take(name_len)?.to_vec()).map_err(|e| e.to_string())?;
        let rank = self.u32()? as usize;
        let shape = (0..rank)
            .map(|_| self.u64().map(|d| d as usize))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let raw = self.take(n.checked_mul(8).ok_or("tensor too large")?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().unwrap())))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| e.to_string())?;
        Ok((name, t))
    }
}

impl Checkpoint {
    pub fn new(model: Model) -> Self {
        Checkpoint {
            model,
            centers: None,
            extra: BTreeMap::new(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let bn = self.model.bn_state();
        let meta = Meta {
            config: self.model.config().clone(),
            bn: bn.map(|s| BnMeta {
                momentum: s.momentum,
                eps: s.eps,
            }),
            block_bn: self
                .model
                .block_bn_states()
                .iter()
                .map(|s| BnMeta {
                    momentum: s.momentum,
                    eps: s.eps,
                })
                .collect(),
            trainable: self.model.params().iter().map(|p| p.trainable).collect(),
            extra: self.extra.clone(),
        };
        let json = serde_json::to_vec(&meta).expect("config serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let mut tensors: Vec<(String, Tensor)> = self
            .model
            .params()
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect();
        if let Some(s) = bn {
            tensors.push((RUNNING_MEAN.into(), Tensor::vector(s.running_mean.clone())));
            tensors.push((RUNNING_VAR.into(), Tensor::vector(s.running_var.clone())));
        }
        for (i, s) in self.model.block_bn_states().iter().enumerate() {
            let (mean, var) = block_stat_names(i);
            tensors.push((mean, Tensor::vector(s.running_mean.clone())));
            tensors.push((var, Tensor::vector(s.running_var.clone())));
        }
        if let Some(c) = &self.centers {
            tensors.push((CENTERS.into(), c.clone()));
        }
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in &tensors {
            put_tensor(&mut out, name, t);
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err("not a checkpoint (bad magic)".into());
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(format!("unsupported checkpoint version {version}"));
        }
        let meta_len = r.u64()? as usize;
        let meta: Meta = serde_json::from_slice(r.take(meta_len)?).map_err(|e| e.to_string())?;
        let count = r.u32()? as usize;
        let mut tensors = BTreeMap::new();
        let mut order = Vec::with_capacity(count);
        for _ in 0..count {
            let (name, t) = r.tensor()?;
            order.push(name.clone());
            tensors.insert(name, t);
        }
        let n_params = meta.trainable.len();
        let mut params = Vec::with_capacity(n_params);
        let decay_of = |name: &str| {
            meta.config
                .param_specs()
                .into_iter()
                .find(|s| s.name == name)
                .map(|s| s.decay)
        };
        for (name, trainable) in order.iter().take(n_params).zip(&meta.trainable) {
            let value = tensors.remove(name).ok_or("duplicate tensor name")?;
            params.push(Param {
                name: name.clone(),
                decay: decay_of(name).ok_or_else(|| format!("unexpected tensor {name}"))?,
                value,
                trainable: *trainable,
            });
        }
        let bn = match meta.bn {
            Some(b) => Some(BnState {
                running_mean: tensors
                    .remove(RUNNING_MEAN)
                    .ok_or("missing running mean")?
                    .into_data(),
                running_var: tensors
                    .remove(RUNNING_VAR)
                    .ok_or("missing running variance")?
                    .into_data(),
                momentum: b.momentum,
                eps: b.eps,
            }),
            None => None,
        };
        let mut block_bn = Vec::with_capacity(meta.block_bn.len());
        for (i, b) in meta.block_bn.iter().enumerate() {
            let (mean, var) = block_stat_names(i);
            block_bn.push(BnState {
                running_mean: tensors
                    .remove(&mean)
                    .ok_or("missing block running mean")?
                    .into_data(),
                running_var: tensors
                    .remove(&var)
                    .ok_or("missing block running variance")?
                    .into_data(),
                momentum: b.momentum,
                eps: b.eps,
            });
        }
        let centers = tensors.remove(CENTERS);
        if let Some(extra) = tensors.keys().next() {
            return Err(format!("unexpected tensor {extra}"));
        }
        if r.pos != buf.len() {
            return Err("trailing bytes after last tensor".into());
        }
        let model =
            Model::from_parts(meta.config, params, bn, block_bn).map_err(|e| e.to_string())?;
        Ok(Checkpoint {
            model,
            centers,
            extra: meta.extra,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path)?;
        Checkpoint::from_bytes(&buf).map_err(|reason| Error::Format {
            kind: "checkpoint",
            path: path.to_path_buf(),
            reason,
        })
    }
}
