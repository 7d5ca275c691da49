//! Shared helpers for the integration tests.

#![allow(dead_code)]

use lisa_core::data::{Dataset, DatasetDescriptor, TokenBatch};
use lisa_core::model::{LayeredModel, ModelConfig, ParamRef};

/// Fourth-order central difference of `f` at `x0`.
pub fn central_difference(mut f: impl FnMut(f64) -> f64, x0: f64, h: f64) -> f64 {
    (-f(x0 + 2.0 * h) + 8.0 * f(x0 + h) - 8.0 * f(x0 - h) + f(x0 - 2.0 * h)) / (12.0 * h)
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Numerical derivative of the model loss with respect to one scalar.
pub fn fd_param(model: &mut LayeredModel, batch: &TokenBatch, p: ParamRef, index: usize, h: f64) -> f64 {
    let x0 = model.param(p).data()[index];
    let d = central_difference(
        |x| {
            model.param_mut(p).data_mut()[index] = x;
            model.loss(batch).expect("loss")
        },
        x0,
        h,
    );
    model.param_mut(p).data_mut()[index] = x0;
    d
}

pub fn copy_data(vocab: usize, seq: usize, samples: usize, seed: u64) -> Dataset {
    Dataset::from_descriptor(&DatasetDescriptor::SyntheticCopy {
        vocab_size: vocab,
        seq_len: seq,
        samples,
        seed,
    })
    .expect("dataset")
}

/// A small model for quick property checks.
pub fn tiny_config(vocab: usize, seq: usize) -> ModelConfig {
    ModelConfig {
        model_dim: 16,
        num_heads: 2,
        num_blocks: 3,
        ..ModelConfig::desk(vocab, seq)
    }
}
