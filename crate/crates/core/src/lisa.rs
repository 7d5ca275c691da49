//! Layerwise importance sampling of trainable layers.
//!
//! Every `K` steps a fresh set of active layers is drawn. The embedding and
//! head groups stay active; middle blocks are either drawn independently
//! with probability `γ/N` each ([`SamplingMode::Bernoulli`]) or as a uniform
//! `γ`-subset ([`SamplingMode::FixedGamma`], the default).
//!
//! Mask randomness comes from a ChaCha stream selected by the period index,
//! so `sample_mask(i)` depends only on `(seed, i)` and can be replayed in
//! any order.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    #[default]
    FixedGamma,
    Bernoulli,
}

/// Sampling configuration over the layer index space `0..=N+1`.
#[derive(Debug, Clone, PartialEq)]
pub struct FreezeSchedule {
    mode: SamplingMode,
    num_blocks: usize,
    gamma: usize,
    period: usize,
    total_steps: usize,
    seed: u64,
    always_active: BTreeSet<usize>,
    probabilities: Vec<f64>,
}

/// The layers trainable during one sampling period.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActiveMask {
    pub period: usize,
    pub active: BTreeSet<usize>,
}

impl ActiveMask {
    pub fn middle_count(&self, num_blocks: usize) -> usize {
        self.active.range(1..=num_blocks).count()
    }
}

/// `{1, γ/N, …, γ/N, 1}` over `N + 2` layers.
pub fn standard_probabilities(num_blocks: usize, gamma: usize) -> Vec<f64> {
    let mut p = vec![gamma as f64 / num_blocks as f64; num_blocks + 2];
    p[0] = 1.0;
    p[num_blocks + 1] = 1.0;
    p
}

impl FreezeSchedule {
    /// Exactly `gamma` middle blocks per period.
    pub fn fixed_gamma(
        num_blocks: usize,
        gamma: usize,
        period: usize,
        total_steps: usize,
        seed: u64,
    ) -> Result<Self> {
        Self::build(
            SamplingMode::FixedGamma,
            num_blocks,
            gamma,
            standard_probabilities(num_blocks.max(1), gamma),
            period,
            total_steps,
            seed,
        )
    }

    /// Independent per-layer draws with the `{1, γ/N, …, γ/N, 1}` scheme.
    pub fn bernoulli(
        num_blocks: usize,
        gamma: usize,
        period: usize,
        total_steps: usize,
        seed: u64,
    ) -> Result<Self> {
        Self::build(
            SamplingMode::Bernoulli,
            num_blocks,
            gamma,
            standard_probabilities(num_blocks.max(1), gamma),
            period,
            total_steps,
            seed,
        )
    }

    /// Independent per-layer draws with caller-supplied probabilities, e.g.
    /// from [`probabilities_from_norms`]. `probabilities` has `N + 2` entries.
    pub fn with_probabilities(
        probabilities: Vec<f64>,
        period: usize,
        total_steps: usize,
        seed: u64,
    ) -> Result<Self> {
        if probabilities.len() < 3 {
            return Err(Error::Config("need probabilities for at least one block".into()));
        }
        let num_blocks = probabilities.len() - 2;
        let gamma = probabilities[1..=num_blocks].iter().sum::<f64>().round() as usize;
        Self::build(
            SamplingMode::Bernoulli,
            num_blocks,
            gamma,
            probabilities,
            period,
            total_steps,
            seed,
        )
    }

    fn build(
        mode: SamplingMode,
        num_blocks: usize,
        gamma: usize,
        probabilities: Vec<f64>,
        period: usize,
        total_steps: usize,
        seed: u64,
    ) -> Result<Self> {
        if num_blocks == 0 {
            return Err(Error::Config("schedule needs at least one block".into()));
        }
        if period == 0 || total_steps == 0 {
            return Err(Error::Config("sampling period K and steps T must be >= 1".into()));
        }
        if gamma > num_blocks {
            return Err(Error::Config(format!(
                "gamma {gamma} exceeds the {num_blocks} middle layers"
            )));
        }
        if let Some(p) = probabilities.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Config(format!("sampling probability {p} outside [0, 1]")));
        }
        let sched = Self {
            mode,
            num_blocks,
            gamma,
            period,
            total_steps,
            seed,
            always_active: BTreeSet::from([0, num_blocks + 1]),
            probabilities,
        };
        sched.check_candidates()?;
        Ok(sched)
    }

    fn check_candidates(&self) -> Result<()> {
        if self.mode == SamplingMode::FixedGamma && self.gamma > self.candidates().len() {
            return Err(Error::Config(format!(
                "gamma {} exceeds the {} sampleable middle layers",
                self.gamma,
                self.candidates().len()
            )));
        }
        Ok(())
    }

    /// Replaces the set of never-frozen layers (default `{0, N+1}`).
    pub fn with_always_active(mut self, always_active: BTreeSet<usize>) -> Result<Self> {
        if let Some(&bad) = always_active.iter().find(|&&l| l > self.num_blocks + 1) {
            return Err(Error::Config(format!("always-active layer {bad} out of range")));
        }
        self.always_active = always_active;
        self.check_candidates()?;
        Ok(self)
    }

    pub fn mode(&self) -> SamplingMode {
        self.mode
    }

    pub fn num_blocks(&self) -> usize {
        self.num_blocks
    }

    pub fn gamma(&self) -> usize {
        self.gamma
    }

    /// Sampling period `K`.
    pub fn period(&self) -> usize {
        self.period
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn always_active(&self) -> &BTreeSet<usize> {
        &self.always_active
    }

    /// Per-layer activation probabilities (used in Bernoulli mode).
    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    /// `ceil(T / K)`.
    pub fn num_periods(&self) -> usize {
        self.total_steps.div_ceil(self.period)
    }

    /// Steps in period `i`; the last one is truncated to `T mod K` when
    /// `K` does not divide `T`.
    pub fn period_len(&self, i: usize) -> usize {
        let start = i * self.period;
        self.period.min(self.total_steps.saturating_sub(start))
    }

    fn candidates(&self) -> Vec<usize> {
        (1..=self.num_blocks)
            .filter(|l| !self.always_active.contains(l))
            .collect()
    }

    /// The active layers of period `i`; a pure function of `(seed, i)`.
    pub fn sample_mask(&self, i: usize) -> Result<ActiveMask> {
        if i >= self.num_periods() {
            return Err(Error::Index(format!(
                "period {i} outside 0..{}",
                self.num_periods()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(i as u64);
        let mut active = self.always_active.clone();
        match self.mode {
            SamplingMode::Bernoulli => {
                for (layer, &p) in self.probabilities.iter().enumerate() {
                    // u ∈ (0, 1], so p = 1 never freezes and p = 0 always does.
                    let u = 1.0 - rng.random::<f64>();
                    if u <= p {
                        active.insert(layer);
                    }
                }
            }
            SamplingMode::FixedGamma => {
                let candidates = self.candidates();
                for pick in rand::seq::index::sample(&mut rng, candidates.len(), self.gamma) {
                    active.insert(candidates[pick]);
                }
            }
        }
        Ok(ActiveMask { period: i, active })
    }
}

/// Ratio of LoRA-run to full-run mean weight norms, clipped into `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormRatioProbabilities(pub Vec<f64>);

/// `p(ℓ) = w̃(ℓ) / w(ℓ)` clipped to `[0, 1]`.
pub fn probabilities_from_norms(lora_norms: &[f64], full_norms: &[f64]) -> Result<NormRatioProbabilities> {
    if lora_norms.len() != full_norms.len() {
        return Err(Error::Shape(format!(
            "{} LoRA norms vs {} full norms",
            lora_norms.len(),
            full_norms.len()
        )));
    }
    lora_norms
        .iter()
        .zip(full_norms)
        .enumerate()
        .map(|(l, (&lora, &full))| {
            if !(full > 0.0) || !full.is_finite() {
                return Err(Error::Domain(format!("full-training norm of layer {l} is {full}")));
            }
            Ok((lora / full).clamp(0.0, 1.0))
        })
        .collect::<Result<Vec<_>>>()
        .map(NormRatioProbabilities)
}
