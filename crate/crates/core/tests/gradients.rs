//! Backpropagated gradients against finite differences.

mod common;

use common::{central_difference, copy_data, fd_param, relative_error, tiny_config};
use lisa_core::lora::{attach_adapters, LoRAConfig};
use lisa_core::model::LayeredModel;

const H: f64 = 1e-3;
const TOL: f64 = 1e-5;
const FLOOR: f64 = 1e-8;

#[test]
fn every_parameter_of_a_tiny_model() {
    let data = copy_data(6, 6, 8, 3);
    let cfg = tiny_config(6, 6);
    let mut model = LayeredModel::build(&cfg, 11).unwrap();
    let batch = data.batch(0, 2);
    model.zero_grad();
    model.loss_and_grad(&batch).unwrap();
    let refs = model.param_refs();
    let mut worst: f64 = 0.0;
    for p in refs {
        let n = model.param(p).numel();
        // Every third scalar keeps the test quick while touching every tensor.
        for i in (0..n).step_by(3) {
            let analytic = model.param(p).grad().unwrap()[i];
            let numeric = fd_param(&mut model, &batch, p, i, H);
            let err = relative_error(analytic, numeric, FLOOR);
            assert!(err < TOL, "{} [{i}]: analytic {analytic}, numeric {numeric}", model.param_name(p));
            worst = worst.max(err);
        }
    }
    assert!(worst < TOL);
}

#[test]
fn tied_embeddings() {
    let data = copy_data(6, 6, 8, 4);
    let cfg = lisa_core::model::ModelConfig {
        tie_embeddings: true,
        ..tiny_config(6, 6)
    };
    let mut model = LayeredModel::build(&cfg, 2).unwrap();
    let batch = data.batch(0, 2);
    model.zero_grad();
    model.loss_and_grad(&batch).unwrap();
    for p in model.param_refs().into_iter().filter(|p| p.layer == 0) {
        for i in (0..model.param(p).numel()).step_by(5) {
            let analytic = model.param(p).grad().unwrap()[i];
            let numeric = fd_param(&mut model, &batch, p, i, H);
            assert!(relative_error(analytic, numeric, FLOOR) < TOL, "{analytic} vs {numeric}");
        }
    }
}

#[test]
fn adapter_parameters() {
    let data = copy_data(6, 6, 8, 5);
    let model = LayeredModel::build(&tiny_config(6, 6), 9).unwrap();
    let mut cfg = LoRAConfig::new(2);
    cfg.include_head = true;
    let mut adapted = attach_adapters(model, &cfg, 1).unwrap();
    // Move B away from zero so gradients reach A too.
    for (k, ad) in adapted.adapters_mut().iter_mut().enumerate() {
        for (i, v) in ad.b_mut().data_mut().iter_mut().enumerate() {
            *v = 0.01 * (((i + 7 * k) % 11) as f64 - 5.0);
        }
    }
    let batch = data.batch(0, 2);
    adapted.zero_grad();
    adapted.loss_and_grad(&batch).unwrap();
    let count = adapted.adapters().len();
    for k in 0..count {
        for which in 0..2 {
            let n = if which == 0 {
                adapted.adapters()[k].a().numel()
            } else {
                adapted.adapters()[k].b().numel()
            };
            for i in (0..n).step_by(4) {
                let analytic = {
                    let ad = &adapted.adapters()[k];
                    let t = if which == 0 { ad.a() } else { ad.b() };
                    t.grad().unwrap()[i]
                };
                let x0 = {
                    let ad = &adapted.adapters()[k];
                    (if which == 0 { ad.a() } else { ad.b() }).data()[i]
                };
                let numeric = central_difference(
                    |x| {
                        let ad = &mut adapted.adapters_mut()[k];
                        let t = if which == 0 { ad.a_mut() } else { ad.b_mut() };
                        t.data_mut()[i] = x;
                        adapted.loss(&batch).unwrap()
                    },
                    x0,
                    H,
                );
                {
                    let ad = &mut adapted.adapters_mut()[k];
                    (if which == 0 { ad.a_mut() } else { ad.b_mut() }).data_mut()[i] = x0;
                }
                assert!(
                    relative_error(analytic, numeric, FLOOR) < TOL,
                    "adapter {k} {} [{i}]: {analytic} vs {numeric}",
                    if which == 0 { "A" } else { "B" }
                );
            }
        }
    }
    // The frozen base receives no gradient.
    assert!(adapted
        .base()
        .groups()
        .iter()
        .all(|g| g.params.iter().all(|p| p.tensor.grad().map_or(true, |g| g.iter().all(|v| *v == 0.0)))));
}
