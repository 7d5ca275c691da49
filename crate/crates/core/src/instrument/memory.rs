//! Closed-form training-memory accounting.
//!
//! Byte counts are derived from an architecture description, never
//! measured. Terms:
//!
//! * weights — every base parameter at `precision.weight` bytes;
//! * gradients — trainable base parameters at `precision.grad` bytes;
//! * moments — two buffers per moment-holding base parameter at
//!   `precision.moment` bytes each;
//! * adapters — adapter weights, gradients and both moments;
//! * activations — see [`ACTIVATION_MODEL`].

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// The activation model, stated as the formula the estimator evaluates.
pub const ACTIVATION_MODEL: &str = "activations = act_bytes * batch * seq * (sum over live blocks of \
[n_norms*d + (d + 2*kv) + heads*seq + mlp_act] + [block trainable or adapted: 3*d + h] + [adapted: r * adapted linears] \
+ head: [d + vocab] + [head trainable or adapted: d] + [head adapted: r]); mlp_act = h (2*h for gated MLPs); \
a block is live when it lies at or above the lowest trainable or adapted layer; no activation checkpointing";

/// Bytes per stored scalar for each kind of state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Precision {
    pub weight: usize,
    pub grad: usize,
    /// Bytes per element of *each* of the two moment buffers.
    pub moment: usize,
    pub activation: usize,
}

impl Precision {
    /// Everything in `f64`, as this crate trains.
    pub const F64: Precision = Precision {
        weight: 8,
        grad: 8,
        moment: 8,
        activation: 8,
    };

    /// 16-bit weights, gradients and activations with 32-bit moments.
    pub const MIXED16: Precision = Precision {
        weight: 2,
        grad: 2,
        moment: 4,
        activation: 2,
    };

    /// Uniform `bytes` for every kind of state.
    pub fn uniform(bytes: usize) -> Self {
        Self {
            weight: bytes,
            grad: bytes,
            moment: bytes,
            activation: bytes,
        }
    }
}

impl Default for Precision {
    fn default() -> Self {
        Self::F64
    }
}

/// Architecture numbers the estimator needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub name: String,
    pub vocab_size: usize,
    pub model_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    /// Width of the key and value projections (< `model_dim` under
    /// grouped-query attention).
    pub kv_dim: usize,
    pub mlp_hidden: usize,
    /// Three-matrix gated MLP (SwiGLU) instead of two matrices.
    pub gated_mlp: bool,
    /// Biases on every block linear.
    pub linear_bias: bool,
    pub norms_per_block: usize,
    /// LayerNorm (gain + bias) rather than RMSNorm (gain only).
    pub norm_bias: bool,
    /// Rows of a learned positional table (0 for rotary positions).
    pub learned_positions: usize,
    pub tie_embeddings: bool,
    pub head_bias: bool,
    /// Context length used when no sequence length is given.
    pub default_seq: usize,
}

/// Canonical preset names accepted by [`ArchSpec::preset`].
pub const PRESET_NAMES: [&str; 6] = [
    "gpt2-small",
    "tinyllama",
    "phi-2",
    "mistral-7b",
    "llama-2-7b",
    "llama-2-70b",
];

fn normalize(name: &str) -> String {
    name.to_ascii_lowercase()
        .chars()
        .filter(|c| c.is_ascii_alphanumeric())
        .collect()
}

impl ArchSpec {
    pub fn preset_names() -> &'static [&'static str] {
        &PRESET_NAMES
    }

    /// Public architecture numbers of common open models. Matching ignores
    /// case and punctuation, so `LLaMA-2-7B` and `llama2_7b` both work.
    pub fn preset(name: &str) -> Result<Self> {
        let llama = |name: &str, d, blocks, heads, kv, h, default_seq| ArchSpec {
            name: name.into(),
            vocab_size: 32000,
            model_dim: d,
            num_blocks: blocks,
            num_heads: heads,
            kv_dim: kv,
            mlp_hidden: h,
            gated_mlp: true,
            linear_bias: false,
            norms_per_block: 2,
            norm_bias: false,
            learned_positions: 0,
            tie_embeddings: false,
            head_bias: false,
            default_seq,
        };
        let spec = match normalize(name).as_str() {
            "gpt2small" | "gpt2" => ArchSpec::from_model_config("gpt2-small", &ModelConfig::gpt2_small()),
            "tinyllama" => llama("tinyllama", 2048, 22, 32, 256, 5632, 2048),
            "phi2" => ArchSpec {
                name: "phi-2".into(),
                vocab_size: 51200,
                model_dim: 2560,
                num_blocks: 32,
                num_heads: 32,
                kv_dim: 2560,
                mlp_hidden: 10240,
                gated_mlp: false,
                linear_bias: true,
                norms_per_block: 1,
                norm_bias: true,
                learned_positions: 0,
                tie_embeddings: false,
                head_bias: true,
                default_seq: 2048,
            },
            "mistral7b" => llama("mistral-7b", 4096, 32, 32, 1024, 14336, 4096),
            "llama27b" => llama("llama-2-7b", 4096, 32, 32, 4096, 11008, 4096),
            "llama270b" => llama("llama-2-70b", 8192, 80, 64, 1024, 28672, 4096),
            _ => {
                return Err(Error::Config(format!(
                    "unknown preset '{name}'; known: {}",
                    PRESET_NAMES.join(", ")
                )))
            }
        };
        Ok(spec)
    }

    /// The architecture of a model this crate can build.
    pub fn from_model_config(name: &str, cfg: &ModelConfig) -> Self {
        ArchSpec {
            name: name.into(),
            vocab_size: cfg.vocab_size,
            model_dim: cfg.model_dim,
            num_blocks: cfg.num_blocks,
            num_heads: cfg.num_heads,
            kv_dim: cfg.model_dim,
            mlp_hidden: cfg.mlp_hidden(),
            gated_mlp: false,
            linear_bias: true,
            norms_per_block: 2,
            norm_bias: true,
            learned_positions: cfg.max_seq_len,
            tie_embeddings: cfg.tie_embeddings,
            head_bias: false,
            default_seq: cfg.max_seq_len,
        }
    }

    fn norm_params(&self) -> usize {
        if self.norm_bias {
            2 * self.model_dim
        } else {
            self.model_dim
        }
    }

    /// `(d_out, d_in)` of every linear in one block.
    pub fn block_linears(&self) -> Vec<(usize, usize)> {
        let (d, kv, h) = (self.model_dim, self.kv_dim, self.mlp_hidden);
        let mut out = vec![(d, d), (kv, d), (kv, d), (d, d)];
        if self.gated_mlp {
            out.extend([(h, d), (h, d), (d, h)]);
        } else {
            out.extend([(h, d), (d, h)]);
        }
        out
    }

    pub fn head_linear(&self) -> (usize, usize) {
        (self.vocab_size, self.model_dim)
    }

    pub fn block_param_count(&self) -> usize {
        let linears = self.block_linears();
        let weights: usize = linears.iter().map(|(o, i)| o * i).sum();
        let biases: usize = if self.linear_bias {
            linears.iter().map(|(o, _)| o).sum()
        } else {
            0
        };
        weights + biases + self.norms_per_block * self.norm_params()
    }

    /// Parameters per layer group, `N + 2` entries.
    pub fn layer_param_counts(&self) -> Vec<usize> {
        let d = self.model_dim;
        let embedding = self.vocab_size * d + self.learned_positions * d;
        let mut head = self.norm_params();
        if !self.tie_embeddings {
            head += self.vocab_size * d;
            if self.head_bias {
                head += self.vocab_size;
            }
        }
        let mut counts = vec![embedding];
        counts.extend(std::iter::repeat_n(self.block_param_count(), self.num_blocks));
        counts.push(head);
        counts
    }

    pub fn param_count(&self) -> usize {
        self.layer_param_counts().iter().sum()
    }

    pub fn num_layers(&self) -> usize {
        self.num_blocks + 2
    }
}

/// What is trained, for accounting purposes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MemoryMethod {
    Full,
    Lora {
        rank: usize,
        include_head: bool,
    },
    /// Peak over all masks: `always_active` plus the `gamma` largest
    /// sampleable middle layers (ties broken towards lower indices).
    Lisa {
        gamma: usize,
        always_active: BTreeSet<usize>,
    },
    /// One concrete mask; `moment_layers` are the layers holding moments.
    Masked {
        active: BTreeSet<usize>,
        moment_layers: BTreeSet<usize>,
    },
}

impl MemoryMethod {
    /// LISA with the default always-active set `{0, N+1}`.
    pub fn lisa(gamma: usize, num_blocks: usize) -> Self {
        MemoryMethod::Lisa {
            gamma,
            always_active: BTreeSet::from([0, num_blocks + 1]),
        }
    }
}

/// Estimated training-memory footprint in bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MemoryEstimate {
    pub weights: usize,
    pub gradients: usize,
    pub moments: usize,
    pub adapters: usize,
    pub activations: usize,
    pub total: usize,
    /// Trainable scalars: trainable base parameters plus adapter parameters.
    pub trainable_params: usize,
    /// Base parameters with moment buffers.
    pub moment_params: usize,
}

/// Closed-form training memory of `method` on `arch`.
pub fn estimate_memory(
    arch: &ArchSpec,
    method: &MemoryMethod,
    precision: Precision,
    batch: usize,
    seq: usize,
) -> Result<MemoryEstimate> {
    let layers = arch.num_layers();
    let counts = arch.layer_param_counts();
    let head = layers - 1;

    let all: BTreeSet<usize> = (0..layers).collect();
    let none = BTreeSet::new();
    let (trainable, moment_layers, lora): (BTreeSet<usize>, BTreeSet<usize>, Option<(usize, bool)>) = match method {
        MemoryMethod::Full => (all.clone(), all, None),
        MemoryMethod::Lora { rank, include_head } => {
            if *rank == 0 {
                return Err(Error::Config("LoRA rank must be >= 1".into()));
            }
            (none.clone(), none, Some((*rank, *include_head)))
        }
        MemoryMethod::Lisa { gamma, always_active } => {
            if let Some(&bad) = always_active.iter().find(|&&l| l >= layers) {
                return Err(Error::Config(format!("always-active layer {bad} out of range")));
            }
            let mut candidates: Vec<usize> = (1..=arch.num_blocks)
                .filter(|l| !always_active.contains(l))
                .collect();
            if *gamma > candidates.len() {
                return Err(Error::Config(format!(
                    "gamma {gamma} exceeds the {} sampleable middle layers",
                    candidates.len()
                )));
            }
            candidates.sort_by(|a, b| counts[*b].cmp(&counts[*a]).then(a.cmp(b)));
            let mut active = always_active.clone();
            active.extend(candidates.into_iter().take(*gamma));
            (active.clone(), active, None)
        }
        MemoryMethod::Masked { active, moment_layers } => {
            if let Some(&bad) = active.union(moment_layers).find(|&&l| l >= layers) {
                return Err(Error::Config(format!("mask layer {bad} out of range")));
            }
            (active.clone(), moment_layers.clone(), None)
        }
    };

    let sum_over = |set: &BTreeSet<usize>| -> usize { set.iter().map(|&l| counts[l]).sum() };
    let trainable_base = sum_over(&trainable);
    let moment_params = sum_over(&moment_layers);

    // Adapter parameters per block and for the head.
    let (rank, adapt_head) = lora.unwrap_or((0, false));
    let block_lin = arch.block_linears();
    let block_adapter: usize = block_lin.iter().map(|(o, i)| rank * (o + i)).sum();
    let head_adapter = if adapt_head {
        let (o, i) = arch.head_linear();
        rank * (o + i)
    } else {
        0
    };
    if lora.is_some() {
        let too_big = block_lin
            .iter()
            .chain(adapt_head.then(|| arch.head_linear()).iter())
            .any(|&(o, i)| rank > o.min(i));
        if too_big {
            return Err(Error::Config(format!("LoRA rank {rank} exceeds a target dimension")));
        }
    }
    let adapter_params = block_adapter * arch.num_blocks + head_adapter;

    // Activations.
    let (d, kv, h) = (arch.model_dim, arch.kv_dim, arch.mlp_hidden);
    let mlp_act = if arch.gated_mlp { 2 * h } else { h };
    let weight_inputs = 3 * d + h;
    let block_adapted = lora.is_some();
    let lowest = if block_adapted {
        Some(1)
    } else {
        trainable.iter().next().copied()
    };
    let mut per_token = 0usize;
    if let Some(lowest) = lowest {
        for l in 1..=arch.num_blocks {
            if l < lowest {
                continue;
            }
            per_token += arch.norms_per_block * d + d + 2 * kv + arch.num_heads * seq + mlp_act;
            if trainable.contains(&l) || block_adapted {
                per_token += weight_inputs;
            }
            if block_adapted {
                per_token += rank * block_lin.len();
            }
        }
        per_token += d + arch.vocab_size;
        let head_weight_trainable = trainable.contains(&head) || (arch.tie_embeddings && trainable.contains(&0));
        if head_weight_trainable || adapt_head {
            per_token += d;
        }
        if adapt_head {
            per_token += rank;
        }
    }

    let weights = arch.param_count() * precision.weight;
    let gradients = trainable_base * precision.grad;
    let moments = 2 * moment_params * precision.moment;
    let adapters = adapter_params * (precision.weight + precision.grad + 2 * precision.moment);
    let activations = precision.activation * batch * seq * per_token;
    Ok(MemoryEstimate {
        weights,
        gradients,
        moments,
        adapters,
        activations,
        total: weights + gradients + moments + adapters + activations,
        trainable_params: trainable_base + adapter_params,
        moment_params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn est(arch: &ArchSpec, m: MemoryMethod) -> MemoryEstimate {
        estimate_memory(arch, &m, Precision::F64, 1, 64).unwrap()
    }

    #[test]
    fn preset_sizes() {
        let expect = [
            ("gpt2-small", 124_439_808, 12),
            ("tinyllama", 1_100_048_384, 22),
            ("phi-2", 2_779_683_840, 32),
            ("mistral-7b", 7_241_732_096, 32),
            ("llama-2-7b", 6_738_415_616, 32),
            ("llama-2-70b", 68_976_648_192, 80),
        ];
        for (name, params, blocks) in expect {
            let a = ArchSpec::preset(name).unwrap();
            assert_eq!(a.param_count(), params, "{name}");
            assert_eq!(a.num_blocks, blocks);
        }
        assert_eq!(ArchSpec::preset("LLaMA-2-7B").unwrap().name, "llama-2-7b");
        assert!(matches!(ArchSpec::preset("gpt-5"), Err(Error::Config(_))));
    }

    #[test]
    fn matches_buildable_model() {
        let cfg = ModelConfig::gpt2_small();
        let a = ArchSpec::from_model_config("x", &cfg);
        assert_eq!(a.param_count(), cfg.param_count());
        assert_eq!(a.layer_param_counts(), cfg.layer_param_counts());
        let desk = ModelConfig::desk(40, 16);
        let a = ArchSpec::from_model_config("desk", &desk);
        assert_eq!(a.layer_param_counts(), desk.layer_param_counts());
    }

    #[test]
    fn accounting_identities() {
        let a = ArchSpec::preset("gpt2-small").unwrap();
        let full = est(&a, MemoryMethod::Full);
        assert_eq!(full.trainable_params, a.param_count());
        assert_eq!(full.gradients, full.trainable_params * 8);
        assert_eq!(full.moments, 2 * full.moment_params * 8);
        assert_eq!(
            full.total,
            full.weights + full.gradients + full.moments + full.adapters + full.activations
        );

        let counts = a.layer_param_counts();
        let lisa = est(&a, MemoryMethod::lisa(2, 12));
        assert_eq!(lisa.trainable_params, counts[0] + counts[13] + 2 * counts[1]);
        assert!(lisa.gradients + lisa.moments < full.gradients + full.moments);

        let lora = est(
            &a,
            MemoryMethod::Lora {
                rank: 8,
                include_head: false,
            },
        );
        let per_block: usize = a.block_linears().iter().map(|(o, i)| 8 * (o + i)).sum();
        assert_eq!(lora.trainable_params, 12 * per_block);
        assert_eq!(lora.gradients, 0);
    }

    #[test]
    fn lora_linear_in_rank() {
        let a = ArchSpec::preset("llama-2-7b").unwrap();
        let r = |rank| {
            est(
                &a,
                MemoryMethod::Lora {
                    rank,
                    include_head: false,
                },
            )
        };
        assert_eq!(r(256).adapters, 2 * r(128).adapters);
    }

    #[test]
    fn monotone_term_by_term() {
        let a = ArchSpec::preset("tinyllama").unwrap();
        let terms = |e: MemoryEstimate| [e.weights, e.gradients, e.moments, e.adapters, e.activations, e.total];
        for g in 0..a.num_blocks {
            let lo = terms(est(&a, MemoryMethod::lisa(g, a.num_blocks)));
            let hi = terms(est(&a, MemoryMethod::lisa(g + 1, a.num_blocks)));
            assert!(lo.iter().zip(&hi).all(|(x, y)| x <= y));
        }
        for r in [1, 2, 4, 64] {
            let m = |rank| MemoryMethod::Lora {
                rank,
                include_head: true,
            };
            let lo = terms(est(&a, m(r)));
            let hi = terms(est(&a, m(r + 1)));
            assert!(lo.iter().zip(&hi).all(|(x, y)| x <= y));
        }
        let small = ArchSpec::preset("llama-2-7b").unwrap();
        let big = ArchSpec::preset("llama-2-70b").unwrap();
        for m in [MemoryMethod::Full, MemoryMethod::lisa(2, 32)] {
            let big_m = match &m {
                MemoryMethod::Lisa { gamma, .. } => MemoryMethod::lisa(*gamma, 80),
                other => other.clone(),
            };
            let lo = terms(est(&small, m));
            let hi = terms(est(&big, big_m));
            assert!(lo.iter().zip(&hi).all(|(x, y)| x <= y));
        }
    }

    #[test]
    fn invalid_methods() {
        let a = ArchSpec::preset("gpt2-small").unwrap();
        let bad = [
            MemoryMethod::lisa(13, 12),
            MemoryMethod::Lora {
                rank: 0,
                include_head: false,
            },
            MemoryMethod::Lora {
                rank: 5000,
                include_head: false,
            },
        ];
        for m in bad {
            assert!(estimate_memory(&a, &m, Precision::F64, 1, 8).is_err());
        }
    }
}
