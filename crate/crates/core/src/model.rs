//! A small GPT-2 style decoder with an explicit layer index space.
//!
//! Layer `0` is the embedding group (token + learned positional tables),
//! layers `1..=N` are transformer blocks and layer `N+1` is the head group
//! (final norm plus output projection). Freezing, norm accounting and the
//! memory estimator all speak in these indices.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::TokenBatch;
use crate::error::{Error, Result};
use crate::lora::LoRAAdapter;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;

fn default_mlp_ratio() -> f64 {
    4.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub num_blocks: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: f64,
    #[serde(default)]
    pub tie_embeddings: bool,
}

/// Where a parameter lives: `(layer index, position within the layer)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamRef {
    pub layer: usize,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub layer: usize,
    pub name: String,
    pub shape: Vec<usize>,
}

/// A linear projection `y = x·Wᵀ (+ b)` with `W[d_out × d_in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearTarget {
    pub weight: ParamRef,
    pub name: String,
    pub d_out: usize,
    pub d_in: usize,
}

const BLOCK_PARAMS: [&str; 16] = [
    "ln1.gain",
    "ln1.bias",
    "attn.w_q",
    "attn.b_q",
    "attn.w_k",
    "attn.b_k",
    "attn.w_v",
    "attn.b_v",
    "attn.w_o",
    "attn.b_o",
    "ln2.gain",
    "ln2.bias",
    "mlp.w_fc",
    "mlp.b_fc",
    "mlp.w_proj",
    "mlp.b_proj",
];

// Positions inside a block group.
const LN1_G: usize = 0;
const LN1_B: usize = 1;
const W_Q: usize = 2;
const W_K: usize = 4;
const W_V: usize = 6;
const W_O: usize = 8;
const LN2_G: usize = 10;
const LN2_B: usize = 11;
const W_FC: usize = 12;
const W_PROJ: usize = 14;
const BLOCK_LINEARS: [usize; 6] = [W_Q, W_K, W_V, W_O, W_FC, W_PROJ];

// Positions inside the embedding and head groups.
const WTE: usize = 0;
const WPE: usize = 1;
const LNF_G: usize = 0;
const LNF_B: usize = 1;
const W_OUT: usize = 2;

impl ModelConfig {
    /// Default desk-scale shape: 4 blocks of width 64 with 4 heads.
    pub fn desk(vocab_size: usize, max_seq_len: usize) -> Self {
        Self {
            vocab_size,
            max_seq_len,
            model_dim: 64,
            num_heads: 4,
            num_blocks: 4,
            mlp_ratio: 4.0,
            tie_embeddings: false,
        }
    }

    /// GPT-2 small (124M parameters, tied head).
    pub fn gpt2_small() -> Self {
        Self {
            vocab_size: 50257,
            max_seq_len: 1024,
            model_dim: 768,
            num_heads: 12,
            num_blocks: 12,
            mlp_ratio: 4.0,
            tie_embeddings: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.vocab_size == 0 || self.max_seq_len == 0 || self.model_dim == 0 {
            return bad("vocab_size, max_seq_len and model_dim must be positive".into());
        }
        if self.num_heads == 0 || self.model_dim % self.num_heads != 0 {
            return bad(format!(
                "model_dim {} is not divisible by num_heads {}",
                self.model_dim, self.num_heads
            ));
        }
        if self.num_blocks == 0 {
            return bad("num_blocks must be at least 1".into());
        }
        if !(self.mlp_ratio.is_finite() && self.mlp_ratio > 0.0) || self.mlp_hidden() == 0 {
            return bad(format!("mlp_ratio {} gives an empty MLP", self.mlp_ratio));
        }
        Ok(())
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.model_dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    /// Number of layer groups, `num_blocks + 2`.
    pub fn num_layers(&self) -> usize {
        self.num_blocks + 2
    }

    pub fn layer_name(&self, layer: usize) -> String {
        if layer == 0 {
            "embedding".into()
        } else if layer == self.num_blocks + 1 {
            "head".into()
        } else {
            format!("block{layer}")
        }
    }

    /// Every parameter in layer order, without allocating storage.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let (d, v, h) = (self.model_dim, self.vocab_size, self.mlp_hidden());
        let mut specs = vec![
            ParamSpec {
                layer: 0,
                name: "wte".into(),
                shape: vec![v, d],
            },
            ParamSpec {
                layer: 0,
                name: "wpe".into(),
                shape: vec![self.max_seq_len, d],
            },
        ];
        for layer in 1..=self.num_blocks {
            for name in BLOCK_PARAMS {
                let shape = match name {
                    "attn.w_q" | "attn.w_k" | "attn.w_v" | "attn.w_o" => vec![d, d],
                    "mlp.w_fc" => vec![h, d],
                    "mlp.w_proj" => vec![d, h],
                    "mlp.b_fc" => vec![h],
                    _ => vec![d],
                };
                specs.push(ParamSpec {
                    layer,
                    name: name.into(),
                    shape,
                });
            }
        }
        let head = self.num_blocks + 1;
        specs.push(ParamSpec {
            layer: head,
            name: "ln_f.gain".into(),
            shape: vec![d],
        });
        specs.push(ParamSpec {
            layer: head,
            name: "ln_f.bias".into(),
            shape: vec![d],
        });
        if !self.tie_embeddings {
            specs.push(ParamSpec {
                layer: head,
                name: "w_out".into(),
                shape: vec![v, d],
            });
        }
        specs
    }

    pub fn param_count(&self) -> usize {
        self.param_specs()
            .iter()
            .map(|s| s.shape.iter().product::<usize>())
            .sum()
    }

    /// Parameter count of each layer group.
    pub fn layer_param_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_layers()];
        for s in self.param_specs() {
            counts[s.layer] += s.shape.iter().product::<usize>();
        }
        counts
    }

    /// Linear projections eligible for low-rank adapters.
    pub fn linear_targets(&self, include_head: bool) -> Vec<LinearTarget> {
        let (d, h) = (self.model_dim, self.mlp_hidden());
        let mut out = Vec::new();
        for layer in 1..=self.num_blocks {
            for idx in BLOCK_LINEARS {
                let (d_out, d_in) = match idx {
                    W_FC => (h, d),
                    W_PROJ => (d, h),
                    _ => (d, d),
                };
                out.push(LinearTarget {
                    weight: ParamRef { layer, index: idx },
                    name: format!("{}.{}", self.layer_name(layer), BLOCK_PARAMS[idx]),
                    d_out,
                    d_in,
                });
            }
        }
        if include_head {
            let weight = if self.tie_embeddings {
                ParamRef { layer: 0, index: WTE }
            } else {
                ParamRef {
                    layer: self.num_blocks + 1,
                    index: W_OUT,
                }
            };
            let name = if self.tie_embeddings { "embedding.wte" } else { "head.w_out" };
            out.push(LinearTarget {
                weight,
                name: name.into(),
                d_out: self.vocab_size,
                d_in: d,
            });
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGroup {
    pub name: String,
    pub params: Vec<NamedTensor>,
    trainable: bool,
}

impl LayerGroup {
    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    fn set_trainable(&mut self, trainable: bool) {
        self.trainable = trainable;
        for p in &mut self.params {
            p.tensor.set_requires_grad(trainable);
        }
    }
}

/// Handles produced by one forward pass on a tape.
#[derive(Debug)]
pub struct ForwardPass {
    /// `(batch·seq) × vocab` logits.
    pub logits: Var,
    /// Causal attention probabilities, one `seq×seq` matrix per
    /// (block, sequence, head).
    pub attention: Vec<Var>,
    leaves: Vec<Vec<Var>>,
    adapter_leaves: Vec<(Var, Var)>,
}

impl ForwardPass {
    pub fn param_leaf(&self, p: ParamRef) -> Var {
        self.leaves[p.layer][p.index]
    }

    /// `(A, B)` leaves of each adapter, in adapter order.
    pub fn adapter_leaves(&self) -> &[(Var, Var)] {
        &self.adapter_leaves
    }
}

/// A decoder-only transformer partitioned into layer groups.
#[derive(Debug, Clone, PartialEq)]
pub struct LayeredModel {
    cfg: ModelConfig,
    groups: Vec<LayerGroup>,
}

impl LayeredModel {
    /// Builds and initializes a model: `N(0, 0.02)` for embeddings and
    /// projections, zeros for biases, ones for norm gains.
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut groups: Vec<LayerGroup> = (0..cfg.num_layers())
            .map(|l| LayerGroup {
                name: cfg.layer_name(l),
                params: Vec::new(),
                trainable: true,
            })
            .collect();
        for spec in cfg.param_specs() {
            let numel = spec.shape.iter().product();
            let data: Vec<f64> = if spec.name.ends_with("gain") {
                vec![1.0; numel]
            } else if spec.shape.len() == 1 {
                vec![0.0; numel]
            } else {
                (0..numel).map(|_| normal.sample(&mut rng)).collect()
            };
            let tensor = Tensor::new(spec.shape, data)?.with_requires_grad(true);
            groups[spec.layer].params.push(NamedTensor {
                name: spec.name,
                tensor,
            });
        }
        Ok(Self {
            cfg: cfg.clone(),
            groups,
        })
    }

    /// Reassembles a model from stored groups, checking them against `cfg`.
    pub fn from_parts(cfg: ModelConfig, groups: Vec<LayerGroup>) -> Result<Self> {
        cfg.validate()?;
        let specs = cfg.param_specs();
        let flat: Vec<(usize, &NamedTensor)> = groups
            .iter()
            .enumerate()
            .flat_map(|(l, g)| g.params.iter().map(move |p| (l, p)))
            .collect();
        if groups.len() != cfg.num_layers() || flat.len() != specs.len() {
            return Err(Error::Format("parameter set does not match the config".into()));
        }
        for (spec, (layer, p)) in specs.iter().zip(&flat) {
            if spec.layer != *layer || spec.name != p.name || spec.shape != p.tensor.shape() {
                return Err(Error::Format(format!(
                    "parameter {} does not match the config",
                    p.name
                )));
            }
        }
        Ok(Self { cfg, groups })
    }

    pub(crate) fn group_from_parts(name: String, params: Vec<NamedTensor>) -> LayerGroup {
        let mut g = LayerGroup {
            name,
            params,
            trainable: true,
        };
        g.set_trainable(true);
        g
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn num_blocks(&self) -> usize {
        self.cfg.num_blocks
    }

    /// `num_blocks + 2`.
    pub fn num_layers(&self) -> usize {
        self.groups.len()
    }

    pub fn head_layer(&self) -> usize {
        self.cfg.num_blocks + 1
    }

    pub fn groups(&self) -> &[LayerGroup] {
        &self.groups
    }

    pub fn group(&self, layer: usize) -> Result<&LayerGroup> {
        self.groups.get(layer).ok_or_else(|| {
            Error::Index(format!(
                "layer {layer} outside 0..={}",
                self.groups.len() - 1
            ))
        })
    }

    /// Parameters attributed to layer `layer`.
    pub fn layer_params(&self, layer: usize) -> Result<&[NamedTensor]> {
        Ok(&self.group(layer)?.params)
    }

    pub fn param(&self, p: ParamRef) -> &Tensor {
        &self.groups[p.layer].params[p.index].tensor
    }

    pub fn param_mut(&mut self, p: ParamRef) -> &mut Tensor {
        &mut self.groups[p.layer].params[p.index].tensor
    }

    /// Fully-qualified parameter name, e.g. `block2.attn.w_q`.
    pub fn param_name(&self, p: ParamRef) -> String {
        format!(
            "{}.{}",
            self.groups[p.layer].name, self.groups[p.layer].params[p.index].name
        )
    }

    /// Every parameter reference in layer order.
    pub fn param_refs(&self) -> Vec<ParamRef> {
        self.groups
            .iter()
            .enumerate()
            .flat_map(|(layer, g)| (0..g.params.len()).map(move |index| ParamRef { layer, index }))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.groups.iter().map(LayerGroup::numel).sum()
    }

    pub fn trainable_param_count(&self) -> usize {
        self.groups
            .iter()
            .filter(|g| g.trainable)
            .map(LayerGroup::numel)
            .sum()
    }

    pub fn set_layer_trainable(&mut self, layer: usize, trainable: bool) -> Result<()> {
        self.group(layer)?;
        self.groups[layer].set_trainable(trainable);
        Ok(())
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for g in &mut self.groups {
            g.set_trainable(trainable);
        }
    }

    pub fn active_layers(&self) -> Vec<usize> {
        (0..self.groups.len())
            .filter(|&l| self.groups[l].trainable)
            .collect()
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.groups {
            for p in &mut g.params {
                p.tensor.zero_grad();
            }
        }
    }

    /// Records the forward pass on `tape`, optionally routing linear
    /// projections through low-rank adapters.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        batch: &TokenBatch,
        adapters: Option<&[LoRAAdapter]>,
    ) -> Result<ForwardPass> {
        let cfg = &self.cfg;
        let (bsz, seq) = (batch.batch, batch.seq);
        if seq > cfg.max_seq_len {
            return Err(Error::Shape(format!(
                "sequence length {seq} exceeds max_seq_len {}",
                cfg.max_seq_len
            )));
        }
        if batch.inputs.len() != bsz * seq {
            return Err(Error::Shape(format!(
                "batch of {bsz}×{seq} carries {} tokens",
                batch.inputs.len()
            )));
        }
        if let Some(&bad) = batch.inputs.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(Error::Index(format!(
                "token {bad} outside vocabulary of {}",
                cfg.vocab_size
            )));
        }

        let mut leaves = Vec::with_capacity(self.groups.len());
        for g in &self.groups {
            let mut row = Vec::with_capacity(g.params.len());
            for p in &g.params {
                row.push(tape.leaf(&p.tensor)?);
            }
            leaves.push(row);
        }
        let mut adapter_leaves = Vec::new();
        let mut adapter_at: HashMap<ParamRef, (Var, Var, f64)> = HashMap::new();
        for ad in adapters.unwrap_or(&[]) {
            let a = tape.leaf(ad.a())?;
            let b = tape.leaf(ad.b())?;
            adapter_leaves.push((a, b));
            adapter_at.insert(ad.target(), (a, b, ad.scaling()));
        }
        let linear = |tape: &mut Tape, x: Var, layer: usize, idx: usize, bias: bool| -> Result<Var> {
            let w = leaves[layer][idx];
            let mut y = tape.matmul_nt(x, w)?;
            if bias {
                y = tape.add_bias(y, leaves[layer][idx + 1])?;
            }
            if let Some(&(a, b, s)) = adapter_at.get(&ParamRef { layer, index: idx }) {
                let u = tape.matmul_nt(x, a)?;
                let delta = tape.matmul_nt(u, b)?;
                let delta = tape.scale(delta, s)?;
                y = tape.add(y, delta)?;
            }
            Ok(y)
        };

        let positions: Vec<usize> = (0..bsz).flat_map(|_| 0..seq).collect();
        let tok = tape.embedding(leaves[0][WTE], &batch.inputs)?;
        let pos = tape.embedding(leaves[0][WPE], &positions)?;
        let mut x = tape.add(tok, pos)?;

        let (heads, dh) = (cfg.num_heads, cfg.head_dim());
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let mut attention = Vec::with_capacity(cfg.num_blocks * bsz * heads);
        for layer in 1..=cfg.num_blocks {
            let l = &leaves[layer];
            let h = tape.layer_norm(x, l[LN1_G], l[LN1_B])?;
            let q = linear(tape, h, layer, W_Q, true)?;
            let k = linear(tape, h, layer, W_K, true)?;
            let v = linear(tape, h, layer, W_V, true)?;
            let mut per_seq = Vec::with_capacity(bsz);
            for b in 0..bsz {
                let rows = (b * seq, (b + 1) * seq);
                let mut per_head = Vec::with_capacity(heads);
                for hd in 0..heads {
                    let cols = (hd * dh, (hd + 1) * dh);
                    let qh = tape.slice(q, rows, cols)?;
                    let kh = tape.slice(k, rows, cols)?;
                    let vh = tape.slice(v, rows, cols)?;
                    let scores = tape.matmul_nt(qh, kh)?;
                    let scores = tape.scale(scores, inv_sqrt)?;
                    let probs = tape.causal_softmax(scores)?;
                    attention.push(probs);
                    per_head.push(tape.matmul(probs, vh)?);
                }
                per_seq.push(tape.concat_cols(&per_head)?);
            }
            let mixed = tape.concat_rows(&per_seq)?;
            let attn_out = linear(tape, mixed, layer, W_O, true)?;
            x = tape.add(x, attn_out)?;

            let h2 = tape.layer_norm(x, l[LN2_G], l[LN2_B])?;
            let f = linear(tape, h2, layer, W_FC, true)?;
            let f = tape.gelu(f)?;
            let m = linear(tape, f, layer, W_PROJ, true)?;
            x = tape.add(x, m)?;
        }

        let head = cfg.num_blocks + 1;
        let xf = tape.layer_norm(x, leaves[head][LNF_G], leaves[head][LNF_B])?;
        let logits = if cfg.tie_embeddings {
            linear(tape, xf, 0, WTE, false)?
        } else {
            linear(tape, xf, head, W_OUT, false)?
        };
        Ok(ForwardPass {
            logits,
            attention,
            leaves,
            adapter_leaves,
        })
    }

    /// Evaluates logits, shaped `batch × seq × vocab`.
    pub fn forward(&self, batch: &TokenBatch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let pass = self.forward_on_tape(&mut tape, batch, None)?;
        let data = tape.value(pass.logits).to_vec();
        Tensor::new(vec![batch.batch, batch.seq, self.cfg.vocab_size], data)
    }

    /// Mean cross-entropy over the scored targets of `batch`.
    pub fn loss(&self, batch: &TokenBatch) -> Result<f64> {
        let mut tape = Tape::new();
        let pass = self.forward_on_tape(&mut tape, batch, None)?;
        let loss = tape.cross_entropy(pass.logits, &batch.targets)?;
        Ok(tape.value(loss)[0])
    }

    /// Adds the tape's gradients into every trainable parameter.
    pub fn accumulate_grads(&mut self, tape: &Tape, pass: &ForwardPass) -> Result<()> {
        for (g, leaves) in self.groups.iter_mut().zip(&pass.leaves) {
            for (p, &leaf) in g.params.iter_mut().zip(leaves) {
                if p.tensor.requires_grad() {
                    tape.accumulate_into(leaf, &mut p.tensor)?;
                }
            }
        }
        Ok(())
    }

    /// Forward, loss and backward for one batch; gradients accumulate into
    /// the trainable parameters. Returns the loss.
    pub fn loss_and_grad(&mut self, batch: &TokenBatch) -> Result<f64> {
        let mut tape = Tape::new();
        let pass = self.forward_on_tape(&mut tape, batch, None)?;
        let loss = tape.cross_entropy(pass.logits, &batch.targets)?;
        tape.backward(loss)?;
        self.accumulate_grads(&tape, &pass)?;
        Ok(tape.value(loss)[0])
    }

    pub(crate) fn groups_mut(&mut self) -> &mut [LayerGroup] {
        &mut self.groups
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 11,
            max_seq_len: 8,
            model_dim: 16,
            num_heads: 2,
            num_blocks: 3,
            mlp_ratio: 4.0,
            tie_embeddings: false,
        }
    }

    fn batch(cfg: &ModelConfig, bsz: usize, seq: usize, salt: usize) -> TokenBatch {
        let inputs = (0..bsz * seq)
            .map(|i| (i * 7 + salt * 3 + 1) % cfg.vocab_size)
            .collect::<Vec<_>>();
        let targets = inputs.iter().map(|&t| Some((t + 1) % cfg.vocab_size)).collect();
        TokenBatch {
            batch: bsz,
            seq,
            inputs,
            targets,
        }
    }

    #[test]
    fn layer_count_is_blocks_plus_two() {
        let mut cfg = tiny();
        cfg.num_blocks = 12;
        let m = LayeredModel::build(&cfg, 0).unwrap();
        assert_eq!(m.num_layers(), 14);
        assert_eq!(m.groups()[0].name, "embedding");
        assert_eq!(m.groups()[13].name, "head");
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = tiny();
        cfg.num_heads = 3;
        assert!(matches!(LayeredModel::build(&cfg, 0), Err(Error::Config(_))));
        let mut cfg = tiny();
        cfg.num_blocks = 0;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = tiny();
        cfg.mlp_ratio = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn build_is_deterministic() {
        let a = LayeredModel::build(&tiny(), 42).unwrap();
        let b = LayeredModel::build(&tiny(), 42).unwrap();
        let c = LayeredModel::build(&tiny(), 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn init_convention() {
        let m = LayeredModel::build(&tiny(), 1).unwrap();
        let block = m.layer_params(1).unwrap();
        assert!(block[LN1_G].tensor.data().iter().all(|&x| x == 1.0));
        assert!(block[LN1_B].tensor.data().iter().all(|&x| x == 0.0));
        assert!(block[W_Q + 1].tensor.data().iter().all(|&x| x == 0.0));
        let wq = block[W_Q].tensor.data();
        let std = (wq.iter().map(|x| x * x).sum::<f64>() / wq.len() as f64).sqrt();
        assert!((std - INIT_STD).abs() < 0.005, "std {std}");
    }

    #[test]
    fn built_count_matches_specs() {
        for tie in [false, true] {
            let mut cfg = tiny();
            cfg.tie_embeddings = tie;
            let m = LayeredModel::build(&cfg, 0).unwrap();
            assert_eq!(m.param_count(), cfg.param_count());
            assert_eq!(
                m.groups().iter().map(LayerGroup::numel).collect::<Vec<_>>(),
                cfg.layer_param_counts()
            );
        }
    }

    #[test]
    fn layer_params_lookup() {
        let m = LayeredModel::build(&tiny(), 0).unwrap();
        let emb: Vec<_> = m.layer_params(0).unwrap().iter().map(|p| p.name.as_str()).collect();
        assert_eq!(emb, ["wte", "wpe"]);
        assert!(matches!(m.layer_params(5), Err(Error::Index(_))));

        let mut cfg = tiny();
        cfg.tie_embeddings = true;
        let m = LayeredModel::build(&cfg, 0).unwrap();
        let head: Vec<_> = m.layer_params(4).unwrap().iter().map(|p| p.name.as_str()).collect();
        assert_eq!(head, ["ln_f.gain", "ln_f.bias"]);
    }

    #[test]
    fn groups_partition_parameters() {
        let m = LayeredModel::build(&tiny(), 0).unwrap();
        let mut seen = std::collections::HashSet::new();
        for l in 0..m.num_layers() {
            for p in m.layer_params(l).unwrap() {
                assert!(seen.insert(&p.tensor as *const Tensor));
            }
        }
        assert_eq!(seen.len(), m.param_refs().len());
        let total: usize = (0..m.num_layers())
            .map(|l| m.layer_params(l).unwrap().iter().map(|p| p.tensor.numel()).sum::<usize>())
            .sum();
        assert_eq!(total, m.param_count());
    }

    #[test]
    fn forward_rejects_long_sequences_and_bad_tokens() {
        let cfg = tiny();
        let m = LayeredModel::build(&cfg, 0).unwrap();
        let b = batch(&cfg, 1, 9, 0);
        assert!(matches!(m.forward(&b), Err(Error::Shape(_))));
        let mut b = batch(&cfg, 1, 4, 0);
        b.inputs[2] = cfg.vocab_size;
        assert!(matches!(m.forward(&b), Err(Error::Index(_))));
    }

    #[test]
    fn logits_shape_and_purity() {
        let cfg = tiny();
        let m = LayeredModel::build(&cfg, 3).unwrap();
        let b = batch(&cfg, 2, 5, 1);
        let a = m.forward(&b).unwrap();
        assert_eq!(a.shape(), &[2, 5, cfg.vocab_size]);
        assert_eq!(a, m.forward(&b).unwrap());
    }

    #[test]
    fn causal_logits_ignore_future_tokens() {
        let cfg = tiny();
        let m = LayeredModel::build(&cfg, 5).unwrap();
        let seq = 6;
        let b = batch(&cfg, 1, seq, 0);
        let base = m.forward(&b).unwrap();
        for t in 0..seq - 1 {
            let mut alt = b.clone();
            alt.inputs[t + 1] = (alt.inputs[t + 1] + 5) % cfg.vocab_size;
            let out = m.forward(&alt).unwrap();
            let v = cfg.vocab_size;
            assert_eq!(&base.data()[..(t + 1) * v], &out.data()[..(t + 1) * v]);
            assert_ne!(&base.data()[(t + 1) * v..], &out.data()[(t + 1) * v..]);
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let cfg = tiny();
        let m = LayeredModel::build(&cfg, 2).unwrap();
        let b = batch(&cfg, 2, 7, 0);
        let mut tape = Tape::new();
        let pass = m.forward_on_tape(&mut tape, &b, None).unwrap();
        assert_eq!(pass.attention.len(), cfg.num_blocks * 2 * cfg.num_heads);
        for &p in &pass.attention {
            for (i, row) in tape.value(p).chunks(7).enumerate() {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(row[i + 1..].iter().all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn zero_head_gives_uniform_loss() {
        let cfg = tiny();
        let mut m = LayeredModel::build(&cfg, 9).unwrap();
        let head = m.head_layer();
        m.param_mut(ParamRef { layer: head, index: W_OUT })
            .data_mut()
            .fill(0.0);
        let b = batch(&cfg, 3, 8, 2);
        let loss = m.loss(&b).unwrap();
        assert!((loss - (cfg.vocab_size as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn requires_grad_does_not_change_values() {
        let cfg = tiny();
        let mut m = LayeredModel::build(&cfg, 4).unwrap();
        let b = batch(&cfg, 2, 6, 3);
        let with = m.forward(&b).unwrap();
        m.set_all_trainable(false);
        let without = m.forward(&b).unwrap();
        assert_eq!(with.data(), without.data());
    }

    #[test]
    fn frozen_groups_receive_no_gradient() {
        let cfg = tiny();
        let mut m = LayeredModel::build(&cfg, 4).unwrap();
        m.set_layer_trainable(2, false).unwrap();
        let b = batch(&cfg, 2, 6, 3);
        m.loss_and_grad(&b).unwrap();
        for l in 0..m.num_layers() {
            for p in m.layer_params(l).unwrap() {
                assert_eq!(p.tensor.grad().is_some(), l != 2, "{}", p.name);
            }
        }
    }

    #[test]
    fn tied_head_gradient_flows_into_embedding() {
        let mut cfg = tiny();
        cfg.tie_embeddings = true;
        let mut m = LayeredModel::build(&cfg, 4).unwrap();
        let b = batch(&cfg, 1, 4, 0);
        m.loss_and_grad(&b).unwrap();
        // Every row of wte is touched through the output projection, even
        // tokens absent from the input.
        let g = m.layer_params(0).unwrap()[WTE].tensor.grad().unwrap();
        let d = cfg.model_dim;
        for row in g.chunks(d) {
            assert!(row.iter().any(|&x| x != 0.0));
        }
    }
}
