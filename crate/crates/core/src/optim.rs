//! AdamW with decoupled weight decay and layer-group trainability masks.
//!
//! Per element, for a trainable parameter with gradient `g`:
//!
//! ```text
//! t ← t + 1
//! m ← β₁·m + (1 − β₁)·g
//! v ← β₂·v + (1 − β₂)·g²
//! θ ← θ − η·m̂/(√v̂ + ε) − η·λ·θ      m̂ = m/(1 − β₁ᵗ), v̂ = v/(1 − β₂ᵗ)
//! ```
//!
//! Frozen parameters are simply not handed to [`adamw_step`], so their
//! values, moments and step counters stay untouched.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::LayeredModel;
use crate::tensor::Tensor;

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub weight_decay: f64,
    /// Restrict decay to rank ≥ 2 tensors (matrices); norms and biases are
    /// left alone. When false every parameter decays.
    #[serde(default = "default_true")]
    pub decay_matrices_only: bool,
}

impl AdamWConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: 0.0,
            decay_matrices_only: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr.is_finite()
            && self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps.is_finite()
            && self.eps > 0.0
            && self.weight_decay.is_finite()
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid AdamW hyperparameters: {self:?}")))
        }
    }
}

/// What happens to a layer's moment buffers while it is frozen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MomentPolicy {
    /// Drop the buffers on freeze; they restart from zero on reactivation.
    #[default]
    Discard,
    /// Keep the buffers across frozen periods.
    Retain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentBuffers {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl MomentBuffers {
    fn zeros(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// Per-parameter moment buffers keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamWState {
    buffers: BTreeMap<String, MomentBuffers>,
}

/// A parameter handed to the optimizer for one step.
#[derive(Debug)]
pub struct ParamSlot<'a> {
    pub name: String,
    pub tensor: &'a mut Tensor,
}

impl AdamWState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Option<&MomentBuffers> {
        self.buffers.get(name)
    }

    pub fn insert(&mut self, name: String, buffers: MomentBuffers) {
        self.buffers.insert(name, buffers);
    }

    pub fn remove(&mut self, name: &str) -> Option<MomentBuffers> {
        self.buffers.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &MomentBuffers)> {
        self.buffers.iter()
    }

    pub fn len(&self) -> usize {
        self.buffers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffers.is_empty()
    }

    /// Number of scalar parameters currently holding moment buffers.
    pub fn moment_elements(&self) -> usize {
        self.buffers.values().map(|b| b.m.len()).sum()
    }

    /// `2 × moment_elements × 8`.
    pub fn moment_bytes(&self) -> usize {
        2 * self.moment_elements() * std::mem::size_of::<f64>()
    }

    /// Moment bytes plus one 8-byte step counter per buffered parameter.
    pub fn state_bytes(&self) -> usize {
        self.moment_bytes() + self.buffers.len() * std::mem::size_of::<u64>()
    }
}

/// One AdamW update of every slot. All slots must carry a gradient.
pub fn adamw_step(slots: &mut [ParamSlot<'_>], state: &mut AdamWState, cfg: &AdamWConfig) -> Result<()> {
    if let Some(s) = slots.iter().find(|s| s.tensor.grad().is_none()) {
        return Err(Error::Contract(format!(
            "trainable parameter {} has no gradient",
            s.name
        )));
    }
    for slot in slots.iter_mut() {
        let numel = slot.tensor.numel();
        let decay = if cfg.decay_matrices_only {
            slot.tensor.rank() >= 2
        } else {
            true
        };
        let buf = state
            .buffers
            .entry(slot.name.clone())
            .or_insert_with(|| MomentBuffers::zeros(numel));
        if buf.m.len() != numel {
            return Err(Error::Contract(format!(
                "moment buffers of {} hold {} values, parameter has {numel}",
                slot.name,
                buf.m.len()
            )));
        }
        buf.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(buf.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(buf.t as i32);
        let decay_rate = if decay { cfg.lr * cfg.weight_decay } else { 0.0 };
        let (theta, grad) = slot.tensor.data_and_grad_mut();
        let grad = grad.expect("checked above");
        for i in 0..numel {
            let g = grad[i];
            buf.m[i] = cfg.beta1 * buf.m[i] + (1.0 - cfg.beta1) * g;
            buf.v[i] = cfg.beta2 * buf.v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = buf.m[i] / bc1;
            let v_hat = buf.v[i] / bc2;
            let old = theta[i];
            theta[i] = old - cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps) - decay_rate * old;
        }
    }
    Ok(())
}

impl LayeredModel {
    /// Trainable parameters as optimizer slots, in layer order.
    pub fn trainable_slots(&mut self) -> Vec<ParamSlot<'_>> {
        let mut slots = Vec::new();
        for g in self.groups_mut() {
            if !g.trainable() {
                continue;
            }
            let group = g.name.clone();
            for p in &mut g.params {
                slots.push(ParamSlot {
                    name: format!("{group}.{}", p.name),
                    tensor: &mut p.tensor,
                });
            }
        }
        slots
    }
}

/// Makes exactly the layers in `active` trainable.
///
/// Under [`MomentPolicy::Discard`] the moment buffers of every inactive
/// layer are dropped.
pub fn set_trainable_mask(
    model: &mut LayeredModel,
    state: &mut AdamWState,
    active: &BTreeSet<usize>,
    policy: MomentPolicy,
) -> Result<()> {
    if let Some(&bad) = active.iter().find(|&&l| l >= model.num_layers()) {
        return Err(Error::Index(format!(
            "active layer {bad} outside 0..{}",
            model.num_layers()
        )));
    }
    for layer in 0..model.num_layers() {
        let on = active.contains(&layer);
        model.set_layer_trainable(layer, on)?;
        if !on && policy == MomentPolicy::Discard {
            let group = model.group(layer)?;
            for p in &group.params {
                state.remove(&format!("{}.{}", group.name, p.name));
            }
        }
    }
    Ok(())
}
