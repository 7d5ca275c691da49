//! The `sweep` verb: one run per axis value plus a summary table.
//!
//! Runs execute one after another (each is single-threaded and they share
//! nothing), each in `<output_dir>/<axis>-<value>`; the summary is written
//! to `<output_dir>/sweep_summary.csv` after all of them finish. A failing
//! run becomes a row with its status and the sweep carries on.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::config::{Method, RunConfig};
use crate::error::{HarnessError, Result};
use crate::runner::run_config;

pub const SUMMARY_FILE: &str = "sweep_summary.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Gamma,
    Period,
    Seed,
    Rank,
}

impl FromStr for Axis {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gamma" => Ok(Axis::Gamma),
            "K" | "k" | "period" => Ok(Axis::Period),
            "seed" => Ok(Axis::Seed),
            "rank" => Ok(Axis::Rank),
            other => Err(HarnessError::Config(format!(
                "unknown sweep axis '{other}'; expected gamma, K, seed or rank"
            ))),
        }
    }
}

impl Axis {
    pub fn as_str(self) -> &'static str {
        match self {
            Axis::Gamma => "gamma",
            Axis::Period => "K",
            Axis::Seed => "seed",
            Axis::Rank => "rank",
        }
    }

    /// Checks the axis makes sense for `method`.
    pub fn check_method(self, method: Method) -> Result<()> {
        let ok = match self {
            Axis::Gamma | Axis::Period => method == Method::Lisa,
            Axis::Rank => method == Method::Lora,
            Axis::Seed => true,
        };
        if ok {
            Ok(())
        } else {
            Err(HarnessError::Config(format!(
                "axis '{}' does not apply to method '{}'",
                self.as_str(),
                method.as_str()
            )))
        }
    }

    /// `base` with this axis set to `value`.
    pub fn apply(self, base: &RunConfig, value: u64) -> Result<RunConfig> {
        self.check_method(base.method)?;
        let mut cfg = base.clone();
        let as_usize = || {
            usize::try_from(value).map_err(|_| HarnessError::Config(format!("value {value} is too large")))
        };
        match self {
            Axis::Gamma => cfg.schedule.as_mut().expect("lisa").gamma = as_usize()?,
            Axis::Period => cfg.schedule.as_mut().expect("lisa").period = as_usize()?,
            Axis::Rank => cfg.lora.as_mut().expect("lora").rank = as_usize()?,
            Axis::Seed => {
                cfg.seed = value;
                // The seed axis always varies layer selection, even when the
                // base pins a schedule seed.
                if let Some(s) = cfg.schedule.as_mut() {
                    if s.seed.is_some() {
                        s.seed = Some(value);
                    }
                }
            }
        }
        cfg.output_dir = base.output_dir.join(format!("{}-{value}", self.as_str()));
        Ok(cfg)
    }
}

/// Parses `"2,4,8"`.
pub fn parse_values(text: &str) -> Result<Vec<u64>> {
    let values: Vec<u64> = text
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<u64>()
                .map_err(|_| HarnessError::Config(format!("sweep value '{}' is not a non-negative integer", v.trim())))
        })
        .collect::<Result<_>>()?;
    if values.is_empty() {
        return Err(HarnessError::Config("no sweep values given".into()));
    }
    Ok(values)
}

/// One summary row.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub axis_value: u64,
    pub dir: PathBuf,
    pub final_loss: Option<f64>,
    pub mean_trainable_params: Option<f64>,
    pub peak_estimated_bytes: Option<usize>,
    /// `completed`, `diverged` or `failed`.
    pub status: String,
    pub detail: String,
    pub exit_code: i32,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    pub summary: PathBuf,
}

impl SweepOutcome {
    /// Exit code of the first failed row, or 0.
    pub fn exit_code(&self) -> i32 {
        self.rows.iter().map(|r| r.exit_code).find(|&c| c != 0).unwrap_or(0)
    }
}

fn opt_string<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Runs `base` once per value along `axis`.
pub fn sweep(base: &RunConfig, axis: Axis, values: &[u64], root: &Path) -> Result<SweepOutcome> {
    axis.check_method(base.method)?;
    if values.is_empty() {
        return Err(HarnessError::Config("no sweep values given".into()));
    }
    let mut rows = Vec::with_capacity(values.len());
    for &value in values {
        let row = match axis.apply(base, value).and_then(|cfg| run_config(&cfg, root)) {
            Ok(out) => SweepRow {
                axis_value: value,
                dir: out.dir,
                final_loss: out.log.final_loss(),
                mean_trainable_params: out.log.mean_trainable_params(),
                peak_estimated_bytes: out.log.peak_estimated_bytes(),
                status: "completed".into(),
                detail: String::new(),
                exit_code: 0,
            },
            Err(e) => {
                let status = match e {
                    HarnessError::Diverged { .. } => "diverged",
                    _ => "failed",
                };
                SweepRow {
                    axis_value: value,
                    dir: base.output_path(root).join(format!("{}-{value}", axis.as_str())),
                    final_loss: None,
                    mean_trainable_params: None,
                    peak_estimated_bytes: None,
                    status: status.into(),
                    detail: e.to_string(),
                    exit_code: e.exit_code(),
                }
            }
        };
        rows.push(row);
    }
    let dir = base.output_path(root);
    std::fs::create_dir_all(&dir).map_err(|e| HarnessError::io(&dir, e))?;
    let summary = dir.join(SUMMARY_FILE);
    write_summary(&rows, &summary)?;
    Ok(SweepOutcome { rows, summary })
}

fn write_summary(rows: &[SweepRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    w.write_record([
        "axis_value",
        "final_loss",
        "mean_trainable_params",
        "peak_estimated_bytes",
        "status",
        "detail",
    ])
    .map_err(|e| csv_io(path, e))?;
    for r in rows {
        w.write_record([
            r.axis_value.to_string(),
            opt_string(r.final_loss),
            opt_string(r.mean_trainable_params),
            opt_string(r.peak_estimated_bytes),
            r.status.clone(),
            r.detail.clone(),
        ])
        .map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

pub(crate) fn csv_io(path: &Path, e: csv::Error) -> HarnessError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => HarnessError::io(path, io),
        other => HarnessError::Config(format!("{}: {other:?}", path.display())),
    }
}
