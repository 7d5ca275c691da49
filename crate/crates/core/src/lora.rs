//! Low-rank adapters on the linear projections of a frozen base model.
//!
//! An adapter on `W[d_out × d_in]` adds `(α/r)·B·A` with `A[r × d_in]`
//! drawn from `N(0, 0.02²)` and `B[d_out × r]` starting at zero, so a fresh
//! adapter leaves the model output unchanged.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::TokenBatch;
use crate::error::{Error, Result};
use crate::model::{LayeredModel, LinearTarget, ParamRef, INIT_STD};
use crate::optim::ParamSlot;
use crate::tape::Tape;
use crate::tensor::{gemm, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoRAConfig {
    pub rank: usize,
    /// Scaling numerator; the update is multiplied by `alpha / rank`.
    /// Defaults to `rank` (unit scaling).
    #[serde(default)]
    pub alpha: Option<f64>,
    /// Also adapt the output projection.
    #[serde(default)]
    pub include_head: bool,
}

impl LoRAConfig {
    pub fn new(rank: usize) -> Self {
        Self {
            rank,
            alpha: None,
            include_head: false,
        }
    }

    pub fn scaling(&self) -> f64 {
        self.alpha.unwrap_or(self.rank as f64) / self.rank as f64
    }
}

/// A low-rank update attached to one linear projection.
#[derive(Debug, Clone, PartialEq)]
pub struct LoRAAdapter {
    name: String,
    target: ParamRef,
    a: Tensor,
    b: Tensor,
    scaling: f64,
}

impl LoRAAdapter {
    /// Builds an adapter from explicit factors `A[r × d_in]`, `B[d_out × r]`.
    pub fn from_parts(name: String, target: ParamRef, a: Tensor, b: Tensor, scaling: f64) -> Result<Self> {
        if a.rank() != 2 || b.rank() != 2 || a.shape()[0] != b.shape()[1] {
            return Err(Error::Shape(format!(
                "adapter {name}: A{:?} and B{:?} do not share a rank",
                a.shape(),
                b.shape()
            )));
        }
        if !scaling.is_finite() {
            return Err(Error::Config(format!("adapter {name}: scaling {scaling}")));
        }
        Ok(Self {
            name,
            target,
            a: a.with_requires_grad(true),
            b: b.with_requires_grad(true),
            scaling,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn target(&self) -> ParamRef {
        self.target
    }

    pub fn a(&self) -> &Tensor {
        &self.a
    }

    pub fn b(&self) -> &Tensor {
        &self.b
    }

    pub fn a_mut(&mut self) -> &mut Tensor {
        &mut self.a
    }

    pub fn b_mut(&mut self) -> &mut Tensor {
        &mut self.b
    }

    /// Both factors at once, `(A, B)`.
    pub fn factors_mut(&mut self) -> (&mut Tensor, &mut Tensor) {
        (&mut self.a, &mut self.b)
    }

    pub fn scaling(&self) -> f64 {
        self.scaling
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn d_in(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.b.shape()[0]
    }

    pub fn numel(&self) -> usize {
        self.a.numel() + self.b.numel()
    }

    /// `scaling · B · A`, shaped like the target weight.
    pub fn delta(&self) -> Vec<f64> {
        let (r, d_in, d_out) = (self.rank(), self.d_in(), self.d_out());
        let mut out = vec![0.0; d_out * d_in];
        gemm(d_out, r, d_in, self.b.data(), false, self.a.data(), false, &mut out, false);
        for v in &mut out {
            *v *= self.scaling;
        }
        out
    }
}

/// A frozen base model plus its adapters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedModel {
    base: LayeredModel,
    adapters: Vec<LoRAAdapter>,
    config: LoRAConfig,
}

/// Freezes `model` and attaches one adapter per eligible linear projection.
pub fn attach_adapters(model: LayeredModel, cfg: &LoRAConfig, seed: u64) -> Result<AdaptedModel> {
    if cfg.rank == 0 {
        return Err(Error::Config("LoRA rank must be >= 1".into()));
    }
    let targets: Vec<LinearTarget> = model.config().linear_targets(cfg.include_head);
    for t in &targets {
        if cfg.rank > t.d_in.min(t.d_out) {
            return Err(Error::Config(format!(
                "LoRA rank {} exceeds min(d_in, d_out) = {} of {}",
                cfg.rank,
                t.d_in.min(t.d_out),
                t.name
            )));
        }
    }
    let scaling = cfg.scaling();
    if !scaling.is_finite() {
        return Err(Error::Config(format!("LoRA scaling {scaling} is not finite")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let adapters = targets
        .into_iter()
        .map(|t| {
            let a_data = (0..cfg.rank * t.d_in).map(|_| normal.sample(&mut rng)).collect();
            let a = Tensor::new(vec![cfg.rank, t.d_in], a_data)?;
            let b = Tensor::zeros(&[t.d_out, cfg.rank]);
            LoRAAdapter::from_parts(t.name, t.weight, a, b, scaling)
        })
        .collect::<Result<Vec<_>>>()?;
    AdaptedModel::from_parts(model, adapters, cfg.clone())
}

impl AdaptedModel {
    /// Reassembles an adapted model; the base is frozen.
    pub fn from_parts(mut base: LayeredModel, adapters: Vec<LoRAAdapter>, config: LoRAConfig) -> Result<Self> {
        for ad in &adapters {
            let w = base
                .group(ad.target.layer)?
                .params
                .get(ad.target.index)
                .ok_or_else(|| Error::Index(format!("adapter {} targets a missing parameter", ad.name)))?;
            if w.tensor.shape() != [ad.d_out(), ad.d_in()] {
                return Err(Error::Shape(format!(
                    "adapter {} is {}×{}, target weight is {:?}",
                    ad.name,
                    ad.d_out(),
                    ad.d_in(),
                    w.tensor.shape()
                )));
            }
        }
        base.set_all_trainable(false);
        Ok(Self {
            base,
            adapters,
            config,
        })
    }

    pub fn base(&self) -> &LayeredModel {
        &self.base
    }

    pub fn adapters(&self) -> &[LoRAAdapter] {
        &self.adapters
    }

    pub fn adapters_mut(&mut self) -> &mut [LoRAAdapter] {
        &mut self.adapters
    }

    pub fn config(&self) -> &LoRAConfig {
        &self.config
    }

    pub fn into_parts(self) -> (LayeredModel, Vec<LoRAAdapter>) {
        (self.base, self.adapters)
    }

    /// `Σ r·(d_in + d_out)` over all adapters.
    pub fn trainable_param_count(&self) -> usize {
        self.adapters.iter().map(LoRAAdapter::numel).sum()
    }

    pub fn loss(&self, batch: &TokenBatch) -> Result<f64> {
        let mut tape = Tape::new();
        let pass = self.base.forward_on_tape(&mut tape, batch, Some(&self.adapters))?;
        let loss = tape.cross_entropy(pass.logits, &batch.targets)?;
        Ok(tape.value(loss)[0])
    }

    /// Logits shaped `batch × seq × vocab`.
    pub fn forward(&self, batch: &TokenBatch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let pass = self.base.forward_on_tape(&mut tape, batch, Some(&self.adapters))?;
        let data = tape.value(pass.logits).to_vec();
        Tensor::new(vec![batch.batch, batch.seq, self.base.config().vocab_size], data)
    }

    /// Forward, loss and backward; gradients accumulate into the adapters.
    pub fn loss_and_grad(&mut self, batch: &TokenBatch) -> Result<f64> {
        let mut tape = Tape::new();
        let pass = self.base.forward_on_tape(&mut tape, batch, Some(&self.adapters))?;
        let loss = tape.cross_entropy(pass.logits, &batch.targets)?;
        tape.backward(loss)?;
        for (ad, &(a, b)) in self.adapters.iter_mut().zip(pass.adapter_leaves()) {
            tape.accumulate_into(a, &mut ad.a)?;
            tape.accumulate_into(b, &mut ad.b)?;
        }
        Ok(tape.value(loss)[0])
    }

    pub fn zero_grad(&mut self) {
        for ad in &mut self.adapters {
            ad.a.zero_grad();
            ad.b.zero_grad();
        }
    }

    /// Adapter factors as optimizer slots, named `lora.<target>.a|b`.
    pub fn trainable_slots(&mut self) -> Vec<ParamSlot<'_>> {
        let mut slots = Vec::with_capacity(2 * self.adapters.len());
        for ad in &mut self.adapters {
            slots.push(ParamSlot {
                name: format!("lora.{}.a", ad.name),
                tensor: &mut ad.a,
            });
            slots.push(ParamSlot {
                name: format!("lora.{}.b", ad.name),
                tensor: &mut ad.b,
            });
        }
        slots
    }

    /// The plain model with `W ← W + (α/r)·B·A` folded into every target.
    pub fn merge(&self) -> LayeredModel {
        let mut merged = self.base.clone();
        for ad in &self.adapters {
            let delta = ad.delta();
            let w = merged.param_mut(ad.target);
            for (x, d) in w.data_mut().iter_mut().zip(&delta) {
                *x += d;
            }
        }
        merged.set_all_trainable(true);
        merged
    }
}
