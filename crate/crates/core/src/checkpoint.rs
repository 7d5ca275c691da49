//! Binary checkpoint archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes   "LISACKPT"
//! version  u32       currently 1
//! hlen     u64       length of the JSON header in bytes
//! header   hlen bytes UTF-8 JSON (see `Header`)
//! payload  f64 LE values; every array entry in the header names its
//!          element offset and length within the payload
//! ```
//!
//! Arrays live in three namespaces: `model/<layer>.<param>`,
//! `adapter/<target>/{a,b}` and `optimizer/<slot>/{m,v}`. Encoding is a
//! pure function of the checkpoint, so decode-then-encode reproduces the
//! original bytes.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::lora::{AdaptedModel, LoRAAdapter, LoRAConfig};
use crate::model::{LayerGroup, LayeredModel, ModelConfig, NamedTensor, ParamRef};
use crate::optim::{AdamWState, MomentBuffers};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"LISACKPT";
pub const VERSION: u32 = 1;

/// Everything needed to resume or inspect a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: LayeredModel,
    /// Adapters and their configuration, for LoRA runs.
    pub adapters: Option<(LoRAConfig, Vec<LoRAAdapter>)>,
    pub optimizer: AdamWState,
    /// Run configuration snapshot.
    pub config: Value,
}

impl Checkpoint {
    pub fn from_model(model: LayeredModel, optimizer: AdamWState, config: Value) -> Self {
        Self {
            model,
            adapters: None,
            optimizer,
            config,
        }
    }

    pub fn from_adapted(adapted: AdaptedModel, optimizer: AdamWState, config: Value) -> Self {
        let cfg = adapted.config().clone();
        let (model, adapters) = adapted.into_parts();
        Self {
            model,
            adapters: Some((cfg, adapters)),
            optimizer,
            config,
        }
    }

    /// Re-attaches stored adapters to the stored base.
    pub fn into_adapted(self) -> Result<AdaptedModel> {
        let (cfg, adapters) = self
            .adapters
            .ok_or_else(|| Error::Format("checkpoint holds no adapters".into()))?;
        AdaptedModel::from_parts(self.model, adapters, cfg)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdapterEntry {
    name: String,
    target: ParamRef,
    scaling: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MomentEntry {
    slot: String,
    step: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model_config: ModelConfig,
    /// Layers that were frozen when the checkpoint was taken.
    frozen_layers: Vec<usize>,
    config: Value,
    lora_config: Option<LoRAConfig>,
    adapters: Vec<AdapterEntry>,
    moments: Vec<MomentEntry>,
    arrays: Vec<ArrayEntry>,
}

struct Payload {
    arrays: Vec<ArrayEntry>,
    data: Vec<f64>,
}

impl Payload {
    fn push(&mut self, name: String, shape: &[usize], values: &[f64]) {
        self.arrays.push(ArrayEntry {
            name,
            shape: shape.to_vec(),
            offset: self.data.len(),
            len: values.len(),
        });
        self.data.extend_from_slice(values);
    }
}

/// Serializes a checkpoint to bytes.
pub fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut payload = Payload {
        arrays: Vec::new(),
        data: Vec::new(),
    };
    for g in ckpt.model.groups() {
        for p in &g.params {
            payload.push(format!("model/{}.{}", g.name, p.name), p.tensor.shape(), p.tensor.data());
        }
    }
    let mut adapters = Vec::new();
    if let Some((_, list)) = &ckpt.adapters {
        for ad in list {
            payload.push(format!("adapter/{}/a", ad.name()), ad.a().shape(), ad.a().data());
            payload.push(format!("adapter/{}/b", ad.name()), ad.b().shape(), ad.b().data());
            adapters.push(AdapterEntry {
                name: ad.name().into(),
                target: ad.target(),
                scaling: ad.scaling(),
            });
        }
    }
    let mut moments = Vec::new();
    for (slot, buf) in ckpt.optimizer.iter() {
        payload.push(format!("optimizer/{slot}/m"), &[buf.m.len()], &buf.m);
        payload.push(format!("optimizer/{slot}/v"), &[buf.v.len()], &buf.v);
        moments.push(MomentEntry {
            slot: slot.clone(),
            step: buf.t,
        });
    }
    let header = Header {
        model_config: ckpt.model.config().clone(),
        frozen_layers: (0..ckpt.model.num_layers())
            .filter(|&l| !ckpt.model.groups()[l].trainable())
            .collect(),
        config: ckpt.config.clone(),
        lora_config: ckpt.adapters.as_ref().map(|(c, _)| c.clone()),
        adapters,
        moments,
        arrays: payload.arrays,
    };
    let header = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(20 + header.len() + 8 * payload.data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for v in &payload.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn take<'a>(bytes: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Format("checkpoint is truncated".into()));
    }
    let (head, tail) = bytes.split_at(n);
    *bytes = tail;
    Ok(head)
}

/// Parses bytes produced by [`encode`].
pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut rest = bytes;
    if take(&mut rest, 8)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(take(&mut rest, 4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Format(format!("checkpoint version {version} is not supported")));
    }
    let hlen = u64::from_le_bytes(take(&mut rest, 8)?.try_into().expect("8 bytes")) as usize;
    let header: Header =
        serde_json::from_slice(take(&mut rest, hlen)?).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    if rest.len() % 8 != 0 {
        return Err(Error::Format("checkpoint payload is not a whole number of f64".into()));
    }
    let data: Vec<f64> = rest
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();

    let mut arrays: BTreeMap<&str, Tensor> = BTreeMap::new();
    for a in &header.arrays {
        let end = a
            .offset
            .checked_add(a.len)
            .filter(|&e| e <= data.len())
            .ok_or_else(|| Error::Format(format!("array {} overruns the payload", a.name)))?;
        let tensor = Tensor::new(a.shape.clone(), data[a.offset..end].to_vec())
            .map_err(|_| Error::Format(format!("array {} has inconsistent shape", a.name)))?;
        if arrays.insert(&a.name, tensor).is_some() {
            return Err(Error::Format(format!("array {} appears twice", a.name)));
        }
    }
    let mut fetch = |name: String| -> Result<Tensor> {
        arrays
            .remove(name.as_str())
            .ok_or_else(|| Error::Format(format!("checkpoint lacks array {name}")))
    };

    let cfg = header.model_config;
    cfg.validate()?;
    let mut groups: Vec<Vec<NamedTensor>> = vec![Vec::new(); cfg.num_layers()];
    for spec in cfg.param_specs() {
        let tensor = fetch(format!("model/{}.{}", cfg.layer_name(spec.layer), spec.name))?;
        groups[spec.layer].push(NamedTensor {
            name: spec.name,
            tensor,
        });
    }
    let groups: Vec<LayerGroup> = groups
        .into_iter()
        .enumerate()
        .map(|(l, params)| LayeredModel::group_from_parts(cfg.layer_name(l), params))
        .collect();
    let mut model = LayeredModel::from_parts(cfg, groups)?;
    for &l in &header.frozen_layers {
        model.set_layer_trainable(l, false)?;
    }

    let adapters = match header.lora_config {
        Some(lcfg) => {
            let list = header
                .adapters
                .into_iter()
                .map(|e| {
                    let a = fetch(format!("adapter/{}/a", e.name))?;
                    let b = fetch(format!("adapter/{}/b", e.name))?;
                    LoRAAdapter::from_parts(e.name, e.target, a, b, e.scaling)
                })
                .collect::<Result<Vec<_>>>()?;
            Some((lcfg, list))
        }
        None if header.adapters.is_empty() => None,
        None => return Err(Error::Format("adapters stored without a LoRA config".into())),
    };

    let mut optimizer = AdamWState::new();
    for e in header.moments {
        let m = fetch(format!("optimizer/{}/m", e.slot))?.into_data();
        let v = fetch(format!("optimizer/{}/v", e.slot))?.into_data();
        if m.len() != v.len() {
            return Err(Error::Format(format!("moments of {} differ in length", e.slot)));
        }
        optimizer.insert(e.slot, MomentBuffers { m, v, t: e.step });
    }
    if let Some(name) = arrays.keys().next() {
        return Err(Error::Format(format!("unreferenced array {name}")));
    }
    Ok(Checkpoint {
        model,
        adapters,
        optimizer,
        config: header.config,
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = encode(ckpt)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
