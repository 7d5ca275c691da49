//! Training loops for full-parameter AdamW, LISA and LoRA.
//!
//! All three share one driver, so their logs have the same schema: one
//! [`StepRecord`] per step, one [`PeriodRecord`] per mask (full and LoRA
//! runs have a single period), per-layer norms after each update and a
//! final [`NormReport`](crate::instrument::NormReport).
//!
//! A non-finite loss (or a non-finite value anywhere in the forward pass)
//! stops the run; the partial log is returned with
//! [`RunStatus::Diverged`].

use std::collections::BTreeSet;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{Dataset, TokenBatch};
use crate::error::{Error, Result};
use crate::instrument::{
    estimate_memory, finalize_norm_report, record_layer_norms, ArchSpec, MemoryEstimate, MemoryMethod,
    PeriodRecord, Precision, RunLog, RunStatus, StepRecord,
};
use crate::lisa::FreezeSchedule;
use crate::lora::{AdaptedModel, LoRAAdapter};
use crate::model::LayeredModel;
use crate::optim::{adamw_step, set_trainable_mask, AdamWConfig, AdamWState, MomentPolicy};

/// When per-layer norms are recorded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormCadence {
    /// After every optimizer step.
    #[default]
    Step,
    /// After the last step of every sampling period.
    Period,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    /// Total optimizer steps `T`.
    pub steps: usize,
    pub batch_size: usize,
    /// Seed recorded in the log.
    pub seed: u64,
    pub norm_cadence: NormCadence,
    pub moment_policy: MomentPolicy,
    /// Byte widths for the per-period memory estimate.
    pub precision: Precision,
    /// Configuration snapshot stored in the log.
    pub config: Value,
}

impl TrainOptions {
    pub fn new(steps: usize, batch_size: usize, seed: u64) -> Self {
        Self {
            steps,
            batch_size,
            seed,
            norm_cadence: NormCadence::Step,
            moment_policy: MomentPolicy::Discard,
            precision: Precision::F64,
            config: Value::Null,
        }
    }
}

/// State visible to an observer after each optimizer step.
pub struct StepView<'a> {
    /// 1-based step.
    pub step: usize,
    pub period: usize,
    pub loss: f64,
    pub model: &'a LayeredModel,
    pub adapters: Option<&'a [LoRAAdapter]>,
    pub optimizer: &'a AdamWState,
}

pub type Observer<'o> = &'o mut dyn FnMut(&StepView<'_>);

/// A finished (or aborted) run with its final optimizer state.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub log: RunLog,
    pub optimizer: AdamWState,
}

trait Trainee {
    fn loss_and_grad(&mut self, batch: &TokenBatch) -> Result<f64>;
    fn zero_grad(&mut self);
    fn update(&mut self, state: &mut AdamWState, opt: &AdamWConfig) -> Result<()>;
    fn norms(&self) -> Result<Vec<f64>>;
    fn parts(&self) -> (&LayeredModel, Option<&[LoRAAdapter]>);
}

impl Trainee for LayeredModel {
    fn loss_and_grad(&mut self, batch: &TokenBatch) -> Result<f64> {
        LayeredModel::loss_and_grad(self, batch)
    }

    fn zero_grad(&mut self) {
        LayeredModel::zero_grad(self)
    }

    fn update(&mut self, state: &mut AdamWState, opt: &AdamWConfig) -> Result<()> {
        adamw_step(&mut self.trainable_slots(), state, opt)
    }

    fn norms(&self) -> Result<Vec<f64>> {
        record_layer_norms(self, 0..self.num_layers())
    }

    fn parts(&self) -> (&LayeredModel, Option<&[LoRAAdapter]>) {
        (self, None)
    }
}

impl Trainee for AdaptedModel {
    fn loss_and_grad(&mut self, batch: &TokenBatch) -> Result<f64> {
        AdaptedModel::loss_and_grad(self, batch)
    }

    fn zero_grad(&mut self) {
        AdaptedModel::zero_grad(self)
    }

    fn update(&mut self, state: &mut AdamWState, opt: &AdamWConfig) -> Result<()> {
        adamw_step(&mut self.trainable_slots(), state, opt)
    }

    /// Norms of the effective weights `W + (α/r)·B·A`.
    fn norms(&self) -> Result<Vec<f64>> {
        let merged = self.merge();
        record_layer_norms(&merged, 0..merged.num_layers())
    }

    fn parts(&self) -> (&LayeredModel, Option<&[LoRAAdapter]>) {
        (self.base(), Some(self.adapters()))
    }
}

struct Period {
    active: BTreeSet<usize>,
    len: usize,
}

fn check_inputs(model: &LayeredModel, data: &Dataset, opt: &AdamWConfig, opts: &TrainOptions) -> Result<()> {
    opt.validate()?;
    if opts.steps == 0 || opts.batch_size == 0 {
        return Err(Error::Config("steps and batch_size must be >= 1".into()));
    }
    let cfg = model.config();
    if data.seq_len > cfg.max_seq_len {
        return Err(Error::Config(format!(
            "data sequence length {} exceeds the model's max_seq_len {}",
            data.seq_len, cfg.max_seq_len
        )));
    }
    if data.vocab_size > cfg.vocab_size {
        return Err(Error::Config(format!(
            "data vocabulary {} exceeds the model's vocab_size {}",
            data.vocab_size, cfg.vocab_size
        )));
    }
    Ok(())
}

fn is_divergence(e: &Error) -> bool {
    matches!(e, Error::NonFinite(_))
}

#[allow(clippy::too_many_arguments)]
fn drive<T: Trainee>(
    trainee: &mut T,
    data: &Dataset,
    opt: &AdamWConfig,
    opts: &TrainOptions,
    method: &str,
    periods: Vec<Period>,
    mut on_period: impl FnMut(&mut T, &mut AdamWState, &BTreeSet<usize>) -> Result<()>,
    memory: impl Fn(&BTreeSet<usize>, &BTreeSet<usize>) -> Result<MemoryEstimate>,
    mut observer: Option<Observer<'_>>,
) -> Result<TrainOutput> {
    let names: Vec<String> = {
        let (m, _) = trainee.parts();
        (0..m.num_layers()).map(|l| m.config().layer_name(l)).collect()
    };
    let mut log = RunLog::new(method, opts.seed, opts.config.clone(), names);
    let mut state = AdamWState::new();
    let mut holding: BTreeSet<usize> = BTreeSet::new();
    let mut step = 0usize;

    'periods: for (i, period) in periods.iter().enumerate() {
        on_period(trainee, &mut state, &period.active)?;
        match opts.moment_policy {
            MomentPolicy::Discard => holding = period.active.clone(),
            MomentPolicy::Retain => holding.extend(&period.active),
        }
        log.periods.push(PeriodRecord {
            period: i,
            start_step: step + 1,
            steps: period.len,
            active: period.active.iter().copied().collect(),
            memory: memory(&period.active, &holding)?,
        });
        for k in 0..period.len {
            step += 1;
            let started = Instant::now();
            let batch = data.batch(step - 1, opts.batch_size);
            trainee.zero_grad();
            let loss = match trainee.loss_and_grad(&batch) {
                Ok(l) if l.is_finite() => l,
                Ok(l) => {
                    log.status = RunStatus::Diverged {
                        step,
                        detail: format!("loss is {l}"),
                    };
                    break 'periods;
                }
                Err(e) if is_divergence(&e) => {
                    log.status = RunStatus::Diverged {
                        step,
                        detail: e.to_string(),
                    };
                    break 'periods;
                }
                Err(e) => return Err(e),
            };
            trainee.update(&mut state, opt)?;
            trainee.zero_grad();
            let record = match opts.norm_cadence {
                NormCadence::Step => true,
                NormCadence::Period => k + 1 == period.len,
            };
            if record {
                log.norms.push(step, trainee.norms()?)?;
            }
            log.steps.push(StepRecord { step, loss, lr: opt.lr });
            log.wall_clock.push(started.elapsed().as_secs_f64());
            if let Some(obs) = observer.as_mut() {
                let (model, adapters) = trainee.parts();
                obs(&StepView {
                    step,
                    period: i,
                    loss,
                    model,
                    adapters,
                    optimizer: &state,
                });
            }
        }
    }
    if !log.norms.is_empty() {
        log.norm_report = Some(finalize_norm_report(&log.norms)?);
    }
    Ok(TrainOutput { log, optimizer: state })
}

fn arch_of(model: &LayeredModel) -> ArchSpec {
    ArchSpec::from_model_config("model", model.config())
}

/// Full-parameter AdamW with an optional per-step observer.
pub fn train_full(
    model: &mut LayeredModel,
    data: &Dataset,
    opt: &AdamWConfig,
    opts: &TrainOptions,
    observer: Option<Observer<'_>>,
) -> Result<TrainOutput> {
    check_inputs(model, data, opt, opts)?;
    let arch = arch_of(model);
    let all: BTreeSet<usize> = (0..model.num_layers()).collect();
    let periods = vec![Period {
        active: all,
        len: opts.steps,
    }];
    let (batch, seq) = (opts.batch_size, data.seq_len);
    drive(
        model,
        data,
        opt,
        opts,
        "full",
        periods,
        |m, _, _| {
            m.set_all_trainable(true);
            Ok(())
        },
        |_, _| estimate_memory(&arch, &MemoryMethod::Full, opts.precision, batch, seq),
        observer,
    )
}

/// LISA: per period, activate `sched.sample_mask(i)` and run AdamW on it.
pub fn train_lisa(
    model: &mut LayeredModel,
    data: &Dataset,
    opt: &AdamWConfig,
    sched: &FreezeSchedule,
    opts: &TrainOptions,
    observer: Option<Observer<'_>>,
) -> Result<TrainOutput> {
    check_inputs(model, data, opt, opts)?;
    if sched.num_blocks() != model.num_blocks() {
        return Err(Error::Config(format!(
            "schedule covers {} blocks, model has {}",
            sched.num_blocks(),
            model.num_blocks()
        )));
    }
    if sched.total_steps() != opts.steps {
        return Err(Error::Config(format!(
            "schedule spans {} steps, run has {}",
            sched.total_steps(),
            opts.steps
        )));
    }
    let periods = (0..sched.num_periods())
        .map(|i| {
            Ok(Period {
                active: sched.sample_mask(i)?.active,
                len: sched.period_len(i),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let arch = arch_of(model);
    let (batch, seq, policy) = (opts.batch_size, data.seq_len, opts.moment_policy);
    drive(
        model,
        data,
        opt,
        opts,
        "lisa",
        periods,
        |m, state, active| set_trainable_mask(m, state, active, policy),
        |active, holding| {
            let method = MemoryMethod::Masked {
                active: active.clone(),
                moment_layers: holding.clone(),
            };
            estimate_memory(&arch, &method, opts.precision, batch, seq)
        },
        observer,
    )
}

/// AdamW over adapter parameters only; the base stays frozen.
pub fn train_lora(
    model: &mut AdaptedModel,
    data: &Dataset,
    opt: &AdamWConfig,
    opts: &TrainOptions,
    observer: Option<Observer<'_>>,
) -> Result<TrainOutput> {
    check_inputs(model.base(), data, opt, opts)?;
    let arch = arch_of(model.base());
    let cfg = model.config().clone();
    let adapted: BTreeSet<usize> = model.adapters().iter().map(|a| a.target().layer).collect();
    let periods = vec![Period {
        active: adapted,
        len: opts.steps,
    }];
    let (batch, seq) = (opts.batch_size, data.seq_len);
    drive(
        model,
        data,
        opt,
        opts,
        "lora",
        periods,
        |_, _, _| Ok(()),
        |_, _| {
            let method = MemoryMethod::Lora {
                rank: cfg.rank,
                include_head: cfg.include_head,
            };
            estimate_memory(&arch, &method, opts.precision, batch, seq)
        },
        observer,
    )
}

pub fn run_full(model: &mut LayeredModel, data: &Dataset, opt: &AdamWConfig, opts: &TrainOptions) -> Result<RunLog> {
    Ok(train_full(model, data, opt, opts, None)?.log)
}

pub fn run_lisa(
    model: &mut LayeredModel,
    data: &Dataset,
    opt: &AdamWConfig,
    sched: &FreezeSchedule,
    opts: &TrainOptions,
) -> Result<RunLog> {
    Ok(train_lisa(model, data, opt, sched, opts, None)?.log)
}

pub fn run_lora(model: &mut AdaptedModel, data: &Dataset, opt: &AdamWConfig, opts: &TrainOptions) -> Result<RunLog> {
    Ok(train_lora(model, data, opt, opts, None)?.log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetDescriptor;
    use crate::lora::{attach_adapters, LoRAConfig};
    use crate::model::ModelConfig;

    fn setup() -> (LayeredModel, Dataset) {
        let data = Dataset::from_descriptor(&DatasetDescriptor::SyntheticCopy {
            vocab_size: 8,
            seq_len: 6,
            samples: 32,
            seed: 1,
        })
        .unwrap();
        let cfg = ModelConfig {
            vocab_size: 8,
            max_seq_len: 6,
            model_dim: 8,
            num_heads: 2,
            num_blocks: 3,
            mlp_ratio: 2.0,
            tie_embeddings: false,
        };
        (LayeredModel::build(&cfg, 0).unwrap(), data)
    }

    #[test]
    fn full_run_schema() {
        let (mut m, data) = setup();
        let log = run_full(&mut m, &data, &AdamWConfig::with_lr(1e-2), &TrainOptions::new(5, 2, 0)).unwrap();
        assert_eq!(log.steps.len(), 5);
        assert_eq!(log.periods.len(), 1);
        assert_eq!(log.norms.len(), 5);
        assert_eq!(log.status, RunStatus::Completed);
        assert!(log.steps.windows(2).all(|w| w[0].step < w[1].step));
        assert_eq!(log.norm_report.as_ref().unwrap().mean_norms.len(), 5);
    }

    #[test]
    fn lisa_periods_and_cadence() {
        let (mut m, data) = setup();
        let sched = FreezeSchedule::fixed_gamma(3, 1, 3, 10, 4).unwrap();
        let mut opts = TrainOptions::new(10, 2, 0);
        opts.norm_cadence = NormCadence::Period;
        let log = run_lisa(&mut m, &data, &AdamWConfig::with_lr(1e-2), &sched, &opts).unwrap();
        assert_eq!(log.periods.len(), 4);
        assert_eq!(log.periods[3].steps, 1);
        assert_eq!(log.norms.len(), 4);
        for p in &log.periods {
            assert_eq!(p.active.len(), 3);
        }
    }

    #[test]
    fn lisa_rejects_mismatched_schedule() {
        let (mut m, data) = setup();
        let sched = FreezeSchedule::fixed_gamma(4, 1, 3, 10, 4).unwrap();
        let r = run_lisa(&mut m, &data, &AdamWConfig::with_lr(1e-2), &sched, &TrainOptions::new(10, 2, 0));
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn lora_keeps_base_fixed() {
        let (m, data) = setup();
        let before = m.clone();
        let mut a = attach_adapters(m, &LoRAConfig::new(2), 0).unwrap();
        let log = run_lora(&mut a, &data, &AdamWConfig::with_lr(1e-2), &TrainOptions::new(4, 2, 0)).unwrap();
        assert_eq!(log.steps.len(), 4);
        let base: Vec<_> = a.base().groups().iter().flat_map(|g| &g.params).map(|p| p.tensor.data()).collect();
        let orig: Vec<_> = before.groups().iter().flat_map(|g| &g.params).map(|p| p.tensor.data()).collect();
        assert_eq!(base, orig);
        assert_ne!(a.merge().forward(&data.batch(0, 1)).unwrap(), before.forward(&data.batch(0, 1)).unwrap());
    }

    #[test]
    fn divergence_is_recorded() {
        let (mut m, data) = setup();
        let opt = AdamWConfig::with_lr(1e200);
        let log = run_full(&mut m, &data, &opt, &TrainOptions::new(20, 2, 0)).unwrap();
        assert!(log.diverged(), "status {:?}", log.status);
        assert!(log.steps.len() < 20);
    }
}
