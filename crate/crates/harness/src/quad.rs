//! Empirical convergence check of layerwise-sampled AdamW on a convex
//! quadratic.
//!
//! The problem is a diagonal least-squares fit with a scaled regularizer:
//!
//! ```text
//! f(w)     = ½ Σᵢ (Dᵢ wᵢ − yᵢ)²
//! f_reg(w) = f(w) + ½ wᵀ S w,   S = diag(s) ⪰ 0
//! w*       = D y / (D² + s),    f_reg(w) − f_reg* = ½ Σᵢ (Dᵢ² + sᵢ)(wᵢ − w*ᵢ)²
//! ```
//!
//! The `d` coordinates are split into contiguous equal blocks that play the
//! role of middle layers: block `b` is layer `b + 1` of a freeze schedule
//! over `blocks` layers. Only active blocks take AdamW steps. For each `T`
//! in the steps list the check reports the average suboptimality
//! `Ř(T) = (1/T) Σ_{t=1..T} f_reg(w_t) − f_reg*` and `Ř(T)·√T`.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use lisa_core::optim::{adamw_step, AdamWConfig, AdamWState, MomentPolicy, ParamSlot};
use lisa_core::Tensor;

use crate::config::{check_schema_version, output_root, read_text, ScheduleSection};
use crate::error::{HarnessError, Result};
use crate::sweep::csv_io;

pub const TABLE_FILE: &str = "quad_table.csv";

/// A diagonal regularized least-squares problem split into blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticProblem {
    /// Diagonal of the data matrix.
    pub data_diag: Vec<f64>,
    pub targets: Vec<f64>,
    /// Diagonal of the regularizer `S`.
    pub reg_diag: Vec<f64>,
    pub blocks: usize,
}

impl QuadraticProblem {
    /// Validates shapes, block structure and `S ⪰ 0`.
    pub fn new(data_diag: Vec<f64>, targets: Vec<f64>, reg_diag: Vec<f64>, blocks: usize) -> Result<Self> {
        let d = data_diag.len();
        if d == 0 || targets.len() != d || reg_diag.len() != d {
            return Err(HarnessError::Config(format!(
                "problem vectors must share a nonzero length (data {d}, targets {}, regularizer {})",
                targets.len(),
                reg_diag.len()
            )));
        }
        if blocks == 0 || d % blocks != 0 {
            return Err(HarnessError::Config(format!(
                "dimension {d} is not divisible into {blocks} equal blocks"
            )));
        }
        if let Some((i, s)) = reg_diag.iter().enumerate().find(|(_, s)| !(**s >= 0.0) || !s.is_finite()) {
            return Err(HarnessError::Config(format!(
                "regularizer S is not positive semidefinite: S[{i}] = {s}"
            )));
        }
        if data_diag.iter().chain(&targets).any(|x| !x.is_finite()) {
            return Err(HarnessError::Config("problem data must be finite".into()));
        }
        if let Some(i) = (0..d).find(|&i| data_diag[i] * data_diag[i] + reg_diag[i] == 0.0) {
            return Err(HarnessError::Config(format!(
                "coordinate {i} has zero curvature; the optimum is not unique"
            )));
        }
        Ok(Self {
            data_diag,
            targets,
            reg_diag,
            blocks,
        })
    }

    pub fn dimension(&self) -> usize {
        self.data_diag.len()
    }

    pub fn block_size(&self) -> usize {
        self.dimension() / self.blocks
    }

    /// Closed-form minimizer of `f_reg`.
    pub fn optimum(&self) -> Vec<f64> {
        (0..self.dimension())
            .map(|i| {
                let dd = self.data_diag[i];
                dd * self.targets[i] / (dd * dd + self.reg_diag[i])
            })
            .collect()
    }

    /// `f_reg(w)`.
    pub fn objective(&self, w: &[f64]) -> f64 {
        (0..self.dimension())
            .map(|i| {
                let r = self.data_diag[i] * w[i] - self.targets[i];
                0.5 * r * r + 0.5 * self.reg_diag[i] * w[i] * w[i]
            })
            .sum()
    }

    /// `f_reg(w) − f_reg*`, evaluated in the exact quadratic form.
    pub fn suboptimality(&self, w: &[f64], optimum: &[f64]) -> f64 {
        (0..self.dimension())
            .map(|i| {
                let c = self.data_diag[i] * self.data_diag[i] + self.reg_diag[i];
                let e = w[i] - optimum[i];
                0.5 * c * e * e
            })
            .sum()
    }

    /// `∇f_reg(w) = D(Dw − y) + S w`.
    pub fn gradient(&self, w: &[f64]) -> Vec<f64> {
        (0..self.dimension())
            .map(|i| self.data_diag[i] * (self.data_diag[i] * w[i] - self.targets[i]) + self.reg_diag[i] * w[i])
            .collect()
    }
}

/// Regularizer diagonal: one value for every coordinate, or one per coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Regularizer {
    Uniform(f64),
    Diagonal(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitPoint {
    #[default]
    Zero,
    Optimum,
}

fn default_curvature() -> [f64; 2] {
    [0.5, 2.0]
}

fn default_target_std() -> f64 {
    1.0
}

/// Problem description. Without explicit `data_diag`/`targets` the data
/// diagonal is drawn uniformly from `curvature` and targets from
/// `N(0, target_std²)` under `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSection {
    pub dimension: usize,
    pub blocks: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_curvature")]
    pub curvature: [f64; 2],
    #[serde(default = "default_target_std")]
    pub target_std: f64,
    pub regularizer: Regularizer,
    #[serde(default)]
    pub init: InitPoint,
    pub data_diag: Option<Vec<f64>>,
    pub targets: Option<Vec<f64>>,
}

impl ProblemSection {
    pub fn build(&self) -> Result<QuadraticProblem> {
        let d = self.dimension;
        let [lo, hi] = self.curvature;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(HarnessError::Config(format!("invalid curvature range [{lo}, {hi}]")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let data_diag = match &self.data_diag {
            Some(v) => v.clone(),
            None => (0..d).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect(),
        };
        let targets = match &self.targets {
            Some(v) => v.clone(),
            None => (0..d)
                .map(|_| self.target_std * rng.sample::<f64, _>(StandardNormal))
                .collect(),
        };
        let reg_diag = match &self.regularizer {
            Regularizer::Uniform(s) => vec![*s; d],
            Regularizer::Diagonal(v) => v.clone(),
        };
        if data_diag.len() != d {
            return Err(HarnessError::Config(format!(
                "data_diag has {} entries, dimension is {d}",
                data_diag.len()
            )));
        }
        QuadraticProblem::new(data_diag, targets, reg_diag, self.blocks)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadConfig {
    pub schema_version: u32,
    /// Horizons `T` to report, e.g. `[100, 1000, 10000]`.
    pub steps: Vec<usize>,
    pub output_dir: PathBuf,
    pub problem: ProblemSection,
    pub optimizer: AdamWConfig,
    /// Block sampling; the schedule seed defaults to `problem.seed`.
    pub schedule: ScheduleSection,
}

impl QuadConfig {
    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self> {
        check_schema_version(text, origin)?;
        let cfg: QuadConfig = toml::from_str(text).map_err(|e| HarnessError::Config(format!("{origin}: {e}")))?;
        if cfg.steps.is_empty() || cfg.steps.contains(&0) {
            return Err(HarnessError::Config("steps must be a non-empty list of positive horizons".into()));
        }
        cfg.optimizer.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&read_text(path)?, &path.display().to_string())
    }
}

/// One row of the convergence table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadRow {
    pub steps: usize,
    /// `Ř(T)`.
    pub avg_suboptimality: f64,
    /// `Ř(T)·√T`.
    pub scaled: f64,
}

/// Runs the sampled AdamW trajectory to `max(steps)` once and reports the
/// prefix averages at each requested horizon.
pub fn quad_check(
    problem: &QuadraticProblem,
    init: &[f64],
    schedule: &ScheduleSection,
    schedule_seed: u64,
    opt: &AdamWConfig,
    steps: &[usize],
) -> Result<Vec<QuadRow>> {
    opt.validate()?;
    let d = problem.dimension();
    if init.len() != d {
        return Err(HarnessError::Config(format!("initial point has {} entries, dimension is {d}", init.len())));
    }
    let horizon = steps.iter().copied().max().unwrap_or(0);
    if horizon == 0 {
        return Err(HarnessError::Config("steps must contain a positive horizon".into()));
    }
    let nb = problem.blocks;
    let bs = problem.block_size();
    let sched = schedule.build(nb, horizon, schedule_seed)?;
    let optimum = problem.optimum();
    let names: Vec<String> = (0..nb).map(|b| format!("block{b}")).collect();
    let mut params: Vec<Tensor> = (0..nb)
        .map(|b| {
            Tensor::new(vec![bs], init[b * bs..(b + 1) * bs].to_vec())
                .map(|t| t.with_requires_grad(true))
        })
        .collect::<lisa_core::Result<_>>()?;
    let mut state = AdamWState::new();
    let mut w = init.to_vec();
    let mut running = 0.0;
    let mut prefix = vec![0.0; horizon + 1];
    let mut t = 0usize;
    for period in 0..sched.num_periods() {
        let mask = sched.sample_mask(period)?;
        let active: BTreeSet<usize> = (0..nb).filter(|b| mask.active.contains(&(b + 1))).collect();
        if schedule.moment_policy == MomentPolicy::Discard {
            for b in (0..nb).filter(|b| !active.contains(b)) {
                state.remove(&names[b]);
            }
        }
        for _ in 0..sched.period_len(period) {
            let grad = problem.gradient(&w);
            let mut slots = Vec::with_capacity(active.len());
            for (b, p) in params.iter_mut().enumerate() {
                if !active.contains(&b) {
                    continue;
                }
                p.zero_grad();
                p.accumulate_grad(&grad[b * bs..(b + 1) * bs])?;
                slots.push(ParamSlot {
                    name: names[b].clone(),
                    tensor: p,
                });
            }
            adamw_step(&mut slots, &mut state, opt)?;
            for (b, p) in params.iter().enumerate() {
                w[b * bs..(b + 1) * bs].copy_from_slice(p.data());
            }
            t += 1;
            let gap = problem.suboptimality(&w, &optimum);
            if !gap.is_finite() {
                return Err(HarnessError::Diverged {
                    step: t,
                    detail: format!("suboptimality is {gap}"),
                    dir: PathBuf::new(),
                });
            }
            running += gap;
            prefix[t] = running;
        }
    }
    Ok(steps
        .iter()
        .map(|&n| {
            let avg = prefix[n] / n as f64;
            QuadRow {
                steps: n,
                avg_suboptimality: avg,
                scaled: avg * (n as f64).sqrt(),
            }
        })
        .collect())
}

/// Builds the problem from `cfg` and runs the check.
pub fn run_quad_config(cfg: &QuadConfig) -> Result<Vec<QuadRow>> {
    let problem = cfg.problem.build()?;
    let init = match cfg.problem.init {
        InitPoint::Zero => vec![0.0; problem.dimension()],
        InitPoint::Optimum => problem.optimum(),
    };
    let seed = cfg.schedule.seed.unwrap_or(cfg.problem.seed);
    quad_check(&problem, &init, &cfg.schedule, seed, &cfg.optimizer, &cfg.steps)
}

pub fn write_table(rows: &[QuadRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    w.write_record(["T", "avg_suboptimality", "scaled"])
        .map_err(|e| csv_io(path, e))?;
    for r in rows {
        w.write_record([r.steps.to_string(), r.avg_suboptimality.to_string(), r.scaled.to_string()])
            .map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

/// Loads a config, runs it and writes the table under the output root.
pub fn quad_check_file(path: &Path) -> Result<(Vec<QuadRow>, PathBuf)> {
    let cfg = QuadConfig::load(path)?;
    let rows = run_quad_config(&cfg)?;
    let dir = output_root().join(&cfg.output_dir);
    std::fs::create_dir_all(&dir).map_err(|e| HarnessError::io(&dir, e))?;
    let table = dir.join(TABLE_FILE);
    write_table(&rows, &table)?;
    Ok((rows, table))
}

#[cfg(test)]
mod tests {
    use super::*;
    use lisa_core::lisa::SamplingMode;

    fn schedule(gamma: usize, period: usize) -> ScheduleSection {
        ScheduleSection {
            mode: SamplingMode::FixedGamma,
            gamma,
            period,
            seed: None,
            always_active: None,
            moment_policy: MomentPolicy::Discard,
            probabilities: None,
        }
    }

    #[test]
    fn optimum_is_stationary() {
        let p = QuadraticProblem::new(vec![0.5, 2.0], vec![1.0, -3.0], vec![0.1, 0.0], 2).unwrap();
        let w = p.optimum();
        assert!(p.gradient(&w).iter().all(|g| g.abs() < 1e-14));
        let star = p.objective(&w);
        let x = [0.3, 0.7];
        assert!((p.objective(&x) - star - p.suboptimality(&x, &w)).abs() < 1e-12);
    }

    #[test]
    fn non_psd_regularizer_rejected() {
        let e = QuadraticProblem::new(vec![1.0; 4], vec![0.0; 4], vec![0.1, -0.1, 0.0, 0.0], 2).unwrap_err();
        assert!(e.to_string().contains("positive semidefinite"));
        assert_eq!(e.exit_code(), 2);
        assert!(QuadraticProblem::new(vec![1.0; 4], vec![0.0; 4], vec![0.0; 4], 3).is_err());
    }

    #[test]
    fn identity_problem_all_active_decreases() {
        // S = 0, D = 1: f = ½‖w − y‖², plain AdamW on every block.
        let y: Vec<f64> = (0..8).map(|i| (i as f64 - 3.5) / 2.0).collect();
        let p = QuadraticProblem::new(vec![1.0; 8], y, vec![0.0; 8], 4).unwrap();
        let rows = quad_check(&p, &[0.0; 8], &schedule(4, 1), 0, &AdamWConfig::with_lr(0.05), &[10, 100, 1000])
            .unwrap();
        assert!(rows.windows(2).all(|w| w[1].avg_suboptimality < w[0].avg_suboptimality), "{rows:?}");
    }

    #[test]
    fn optimum_start_stays_put() {
        let y: Vec<f64> = (0..8).map(|i| i as f64).collect();
        let p = QuadraticProblem::new(vec![1.0; 8], y.clone(), vec![0.0; 8], 4).unwrap();
        let rows = quad_check(&p, &y, &schedule(1, 5), 3, &AdamWConfig::with_lr(0.01), &[1, 50, 500]).unwrap();
        assert!(rows.iter().all(|r| r.avg_suboptimality.abs() < 1e-12), "{rows:?}");
    }

    #[test]
    fn config_parses() {
        let text = r#"
schema_version = 1
steps = [10, 100]
output_dir = "q"
[problem]
dimension = 8
blocks = 4
regularizer = [0.1, 0.1, 0.1, 0.1, 0.0, 0.0, 0.0, 0.0]
[optimizer]
lr = 0.01
[schedule]
gamma = 1
period = 5
"#;
        let cfg = QuadConfig::from_toml_str(text, "q.toml").unwrap();
        let rows = run_quad_config(&cfg).unwrap();
        assert_eq!(rows.len(), 2);
        let bad = text.replace("[0.1, 0.1", "[-0.1, 0.1");
        let cfg = QuadConfig::from_toml_str(&bad, "q.toml").unwrap();
        assert!(run_quad_config(&cfg).is_err());
        assert!(QuadConfig::from_toml_str(&text.replace("blocks = 4", "blocks = 4\nwat = 1"), "q").is_err());
    }
}
