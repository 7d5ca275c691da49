//! Property-based invariants across modules.

mod common;

use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;

use common::{copy_data, tiny_config};
use lisa_core::checkpoint::{decode, encode, Checkpoint};
use lisa_core::instrument::record_layer_norms;
use lisa_core::lisa::FreezeSchedule;
use lisa_core::lora::{attach_adapters, LoRAConfig};
use lisa_core::model::LayeredModel;
use lisa_core::optim::{adamw_step, AdamWConfig, AdamWState, ParamSlot};
use lisa_core::train::{train_lisa, TrainOptions};
use lisa_core::Tensor;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn layer_norm_scales_linearly(seed in 0u64..1000, layer in 0usize..5, c in -3.0f64..3.0) {
        let mut model = LayeredModel::build(&tiny_config(6, 6), seed).unwrap();
        let before = record_layer_norms(&model, 0..model.num_layers()).unwrap();
        for p in model.param_refs().into_iter().filter(|p| p.layer == layer) {
            for v in model.param_mut(p).data_mut() {
                *v *= c;
            }
        }
        let after = record_layer_norms(&model, 0..model.num_layers()).unwrap();
        for l in 0..before.len() {
            let expected = if l == layer { c.abs() * before[l] } else { before[l] };
            prop_assert!((after[l] - expected).abs() <= 1e-12 * (1.0 + expected));
        }
    }

    #[test]
    fn merge_is_exact(seed in 0u64..1000, rank in 1usize..4, include_head: bool, alpha in 0.5f64..4.0) {
        let data = copy_data(6, 6, 4, seed);
        let model = LayeredModel::build(&tiny_config(6, 6), seed).unwrap();
        let cfg = LoRAConfig { rank, alpha: Some(alpha), include_head };
        let mut adapted = attach_adapters(model, &cfg, seed + 1).unwrap();
        for (k, ad) in adapted.adapters_mut().iter_mut().enumerate() {
            for (i, v) in ad.b_mut().data_mut().iter_mut().enumerate() {
                *v = 0.05 * (((i * 13 + k * 7 + seed as usize) % 17) as f64 - 8.0);
            }
        }
        let merged = adapted.merge();
        let batch = data.batch(0, 2);
        let a = adapted.forward(&batch).unwrap();
        let b = merged.forward(&batch).unwrap();
        let err = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        prop_assert!(err < 1e-10, "max error {err}");
    }

    #[test]
    fn masks_are_stateless(seed: u64, blocks in 1usize..12, period in 1usize..6, bernoulli: bool) {
        let gamma = 1 + (seed as usize) % blocks;
        let steps = 40;
        let sched = if bernoulli {
            FreezeSchedule::bernoulli(blocks, gamma, period, steps, seed).unwrap()
        } else {
            FreezeSchedule::fixed_gamma(blocks, gamma, period, steps, seed).unwrap()
        };
        let n = sched.num_periods();
        let forward: Vec<_> = (0..n).map(|i| sched.sample_mask(i).unwrap()).collect();
        let backward: Vec<_> = (0..n).rev().map(|i| sched.sample_mask(i).unwrap()).collect();
        let replay = sched.clone();
        for i in 0..n {
            prop_assert_eq!(&forward[i], &backward[n - 1 - i]);
            prop_assert_eq!(&forward[i], &replay.sample_mask(i).unwrap());
            prop_assert!(forward[i].active.contains(&0) && forward[i].active.contains(&(blocks + 1)));
            if !bernoulli {
                prop_assert_eq!(forward[i].middle_count(blocks), gamma);
            }
        }
    }

    #[test]
    fn adamw_single_step_closed_form(g in -5.0f64..5.0, x in -2.0f64..2.0, lr in 1e-4f64..1e-1, wd in 0.0f64..0.1) {
        prop_assume!(g.abs() > 1e-6);
        let mut t = Tensor::new(vec![1, 1], vec![x]).unwrap().with_requires_grad(true);
        t.accumulate_grad(&[g]).unwrap();
        let cfg = AdamWConfig { weight_decay: wd, ..AdamWConfig::with_lr(lr) };
        let mut state = AdamWState::new();
        adamw_step(&mut [ParamSlot { name: "w".into(), tensor: &mut t }], &mut state, &cfg).unwrap();
        // After one step m̂ = g and v̂ = g², so the move is lr·g/(|g| + ε).
        let expected = x - lr * g / (g.abs() + cfg.eps) - lr * wd * x;
        prop_assert!((t.data()[0] - expected).abs() < 1e-15);
    }
}

#[test]
fn fixed_gamma_visits_every_subset_uniformly() {
    let draws = 100_000;
    let sched = FreezeSchedule::fixed_gamma(4, 2, 1, draws, 17).unwrap();
    let mut counts: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
    for i in 0..draws {
        let mask = sched.sample_mask(i).unwrap();
        let middle: Vec<usize> = mask.active.range(1..=4).copied().collect();
        assert_eq!(middle.len(), 2);
        *counts.entry(middle).or_default() += 1;
    }
    assert_eq!(counts.len(), 6, "{counts:?}");
    let p = 1.0 / 6.0;
    let se = (p * (1.0 - p) / draws as f64).sqrt();
    for (subset, c) in &counts {
        let f = *c as f64 / draws as f64;
        assert!((f - p).abs() < 4.0 * se, "{subset:?}: {f}");
    }
}

#[test]
fn bernoulli_mean_active_count() {
    let (blocks, gamma, draws) = (10, 3, 20_000);
    let sched = FreezeSchedule::bernoulli(blocks, gamma, 1, draws, 5).unwrap();
    let counts: Vec<f64> = (0..draws)
        .map(|i| sched.sample_mask(i).unwrap().middle_count(blocks) as f64)
        .collect();
    let mean = counts.iter().sum::<f64>() / draws as f64;
    let p = gamma as f64 / blocks as f64;
    let se = (blocks as f64 * p * (1.0 - p) / draws as f64).sqrt();
    assert!((mean - gamma as f64).abs() < 3.0 * se, "mean {mean}");
}

#[test]
fn checkpoint_round_trips_a_lisa_run() {
    let data = copy_data(6, 6, 16, 2);
    let mut model = LayeredModel::build(&tiny_config(6, 6), 4).unwrap();
    let sched = FreezeSchedule::fixed_gamma(3, 1, 2, 6, 9).unwrap();
    let out = train_lisa(&mut model, &data, &AdamWConfig::with_lr(1e-2), &sched, &TrainOptions::new(6, 2, 4), None)
        .unwrap();
    let ckpt = Checkpoint::from_model(model, out.optimizer, serde_json::json!({ "note": "round trip" }));
    let bytes = encode(&ckpt).unwrap();
    let back = decode(&bytes).unwrap();
    assert_eq!(encode(&back).unwrap(), bytes);
    assert_eq!(back.model.groups(), ckpt.model.groups());
    let names = |s: &AdamWState| s.iter().map(|(k, _)| k.clone()).collect::<BTreeSet<_>>();
    assert_eq!(names(&back.optimizer), names(&ckpt.optimizer));
    for (k, buf) in ckpt.optimizer.iter() {
        assert_eq!(back.optimizer.get(k).unwrap(), buf);
    }
}

#[test]
fn identical_runs_are_bitwise_identical() {
    let data = copy_data(6, 6, 16, 2);
    let run = || {
        let mut model = LayeredModel::build(&tiny_config(6, 6), 4).unwrap();
        let sched = FreezeSchedule::bernoulli(3, 1, 2, 8, 9).unwrap();
        train_lisa(&mut model, &data, &AdamWConfig::with_lr(1e-2), &sched, &TrainOptions::new(8, 2, 4), None)
            .unwrap()
            .log
    };
    let (a, b) = (run(), run());
    assert_eq!(a.steps, b.steps);
    assert_eq!(a.periods, b.periods);
    assert_eq!(a.norms, b.norms);
}
