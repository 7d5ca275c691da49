//! Run logs and their on-disk form.
//!
//! A run directory holds
//!
//! * `loss.csv` — `step,loss,lr`;
//! * `norms.csv` — `layer_index,layer_name,mean_weight_norm`;
//! * `norm_series.csv` — `step,layer_index,layer_name,norm`;
//! * `masks.jsonl` — one `{"period":i,"active":[...],"memory_bytes":{...}}`
//!   record per sampling period;
//! * `timing.csv` — `step,seconds` (wall clock, excluded from hashing);
//! * `manifest.json` — config snapshot, seed, version, status and the
//!   SHA-256 of every other file.
//!
//! Files without rows are omitted, so a run that never stepped leaves only
//! its manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::memory::{MemoryEstimate, ACTIVATION_MODEL};
use super::{NormReport, NormSeries};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
const LOSS_FILE: &str = "loss.csv";
const NORMS_FILE: &str = "norms.csv";
const SERIES_FILE: &str = "norm_series.csv";
const MASKS_FILE: &str = "masks.jsonl";
const TIMING_FILE: &str = "timing.csv";
const FORMAT_VERSION: u32 = 1;

/// Version string written into manifests.
pub fn version_string() -> String {
    format!("v{}", env!("CARGO_PKG_VERSION"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based optimizer step.
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodRecord {
    pub period: usize,
    /// First step of the period (1-based).
    pub start_step: usize,
    /// Steps in the period.
    pub steps: usize,
    pub active: Vec<usize>,
    pub memory: MemoryEstimate,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    /// A non-finite loss or activation stopped the run at `step`.
    Diverged { step: usize, detail: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub method: String,
    pub seed: u64,
    /// Snapshot of the configuration that produced the run.
    pub config: Value,
    pub layer_names: Vec<String>,
    pub steps: Vec<StepRecord>,
    pub periods: Vec<PeriodRecord>,
    pub norms: NormSeries,
    pub norm_report: Option<NormReport>,
    /// Seconds spent in each step.
    pub wall_clock: Vec<f64>,
    pub status: RunStatus,
    /// Free-form run facts (e.g. data split), kept in the manifest.
    pub extra: BTreeMap<String, Value>,
}

impl RunLog {
    pub fn new(method: &str, seed: u64, config: Value, layer_names: Vec<String>) -> Self {
        Self {
            method: method.into(),
            seed,
            config,
            norms: NormSeries::new(layer_names.clone()),
            layer_names,
            steps: Vec::new(),
            periods: Vec::new(),
            norm_report: None,
            wall_clock: Vec::new(),
            status: RunStatus::Completed,
            extra: BTreeMap::new(),
        }
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.steps.last().map(|s| s.loss)
    }

    pub fn initial_loss(&self) -> Option<f64> {
        self.steps.first().map(|s| s.loss)
    }

    pub fn diverged(&self) -> bool {
        matches!(self.status, RunStatus::Diverged { .. })
    }

    /// Largest per-period total memory estimate.
    pub fn peak_estimated_bytes(&self) -> Option<usize> {
        self.periods.iter().map(|p| p.memory.total).max()
    }

    pub fn mean_trainable_params(&self) -> Option<f64> {
        if self.periods.is_empty() {
            return None;
        }
        let weighted: f64 = self
            .periods
            .iter()
            .map(|p| p.memory.trainable_params as f64 * p.steps as f64)
            .sum();
        let steps: usize = self.periods.iter().map(|p| p.steps).sum();
        Some(if steps == 0 {
            0.0
        } else {
            weighted / steps as f64
        })
    }
}

#[derive(Serialize, Deserialize)]
struct MemoryBytes {
    weights: usize,
    gradients: usize,
    moments: usize,
    adapters: usize,
    activations: usize,
    total: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MaskLine {
    period: usize,
    active: Vec<usize>,
    memory_bytes: MemoryBytes,
    start_step: usize,
    steps: usize,
    trainable_params: usize,
    moment_params: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    version: String,
    method: String,
    seed: u64,
    status: RunStatus,
    num_steps: usize,
    num_periods: usize,
    layer_names: Vec<String>,
    config: Value,
    config_sha256: String,
    activation_model: String,
    extra: BTreeMap<String, Value>,
    files: BTreeMap<String, String>,
    unhashed: Vec<String>,
}

/// Lowercase hex SHA-256 of `bytes`, as used in run manifests.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> Result<PathBuf> {
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn csv_bytes(header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    let fmt = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(header).map_err(fmt)?;
    for row in rows {
        w.write_record(&row).map_err(fmt)?;
    }
    w.into_inner().map_err(|e| Error::Format(e.to_string()))
}

fn json_line<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string(v).map_err(|e| Error::Format(e.to_string()))
}

/// Writes `log` into `dir` (created if missing). Returns the written paths.
pub fn export_run(log: &RunLog, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut hashed: Vec<(&str, Vec<u8>)> = Vec::new();

    if !log.steps.is_empty() {
        let rows = log
            .steps
            .iter()
            .map(|s| vec![s.step.to_string(), s.loss.to_string(), s.lr.to_string()]);
        hashed.push((LOSS_FILE, csv_bytes(&["step", "loss", "lr"], rows)?));
    }
    if let Some(report) = &log.norm_report {
        let rows = report
            .layer_names
            .iter()
            .zip(&report.mean_norms)
            .enumerate()
            .map(|(i, (name, n))| vec![i.to_string(), name.clone(), n.to_string()]);
        hashed.push((
            NORMS_FILE,
            csv_bytes(&["layer_index", "layer_name", "mean_weight_norm"], rows)?,
        ));
    }
    if !log.norms.is_empty() {
        let names = &log.norms.layer_names;
        let rows = log.norms.records.iter().flat_map(|(step, norms)| {
            norms
                .iter()
                .enumerate()
                .map(move |(i, n)| vec![step.to_string(), i.to_string(), names[i].clone(), n.to_string()])
        });
        hashed.push((
            SERIES_FILE,
            csv_bytes(&["step", "layer_index", "layer_name", "norm"], rows)?,
        ));
    }
    if !log.periods.is_empty() {
        let mut text = String::new();
        for p in &log.periods {
            let m = &p.memory;
            text.push_str(&json_line(&MaskLine {
                period: p.period,
                active: p.active.clone(),
                memory_bytes: MemoryBytes {
                    weights: m.weights,
                    gradients: m.gradients,
                    moments: m.moments,
                    adapters: m.adapters,
                    activations: m.activations,
                    total: m.total,
                },
                start_step: p.start_step,
                steps: p.steps,
                trainable_params: m.trainable_params,
                moment_params: m.moment_params,
            })?);
            text.push('\n');
        }
        hashed.push((MASKS_FILE, text.into_bytes()));
    }

    let mut written = Vec::new();
    let mut files = BTreeMap::new();
    for (name, bytes) in &hashed {
        files.insert(name.to_string(), sha256_hex(bytes));
        written.push(write_file(dir, name, bytes)?);
    }
    let mut unhashed = Vec::new();
    if !log.wall_clock.is_empty() {
        let rows = log
            .wall_clock
            .iter()
            .enumerate()
            .map(|(i, s)| vec![(i + 1).to_string(), s.to_string()]);
        written.push(write_file(dir, TIMING_FILE, &csv_bytes(&["step", "seconds"], rows)?)?);
        unhashed.push(TIMING_FILE.to_string());
    }

    let config_text = json_line(&log.config)?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        version: version_string(),
        method: log.method.clone(),
        seed: log.seed,
        status: log.status.clone(),
        num_steps: log.steps.len(),
        num_periods: log.periods.len(),
        layer_names: log.layer_names.clone(),
        config: log.config.clone(),
        config_sha256: sha256_hex(config_text.as_bytes()),
        activation_model: ACTIVATION_MODEL.into(),
        extra: log.extra.clone(),
        files,
        unhashed,
    };
    let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    text.push('\n');
    written.push(write_file(dir, MANIFEST_FILE, text.as_bytes())?);
    Ok(written)
}

fn read_optional(dir: &Path, name: &str, expected: Option<&String>) -> Result<Option<Vec<u8>>> {
    let Some(hash) = expected else {
        return Ok(None);
    };
    let path = dir.join(name);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if &sha256_hex(&bytes) != hash {
        return Err(Error::Format(format!("{} does not match its manifest hash", path.display())));
    }
    Ok(Some(bytes))
}

fn csv_rows(bytes: &[u8], name: &str) -> Result<Vec<csv::StringRecord>> {
    csv::Reader::from_reader(bytes)
        .records()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Format(format!("{name}: {e}")))
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, name: &str) -> Result<T> {
    rec.get(i)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Format(format!("{name}: bad field {i} in row {:?}", rec)))
}

/// Reads a run directory written by [`export_run`], verifying file hashes.
pub fn import_run(dir: &Path) -> Result<RunLog> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "run format version {} is not supported",
            manifest.format_version
        )));
    }
    let mut log = RunLog::new(&manifest.method, manifest.seed, manifest.config, manifest.layer_names);
    log.status = manifest.status;
    log.extra = manifest.extra;

    if let Some(bytes) = read_optional(dir, LOSS_FILE, manifest.files.get(LOSS_FILE))? {
        for rec in csv_rows(&bytes, LOSS_FILE)? {
            log.steps.push(StepRecord {
                step: field(&rec, 0, LOSS_FILE)?,
                loss: field(&rec, 1, LOSS_FILE)?,
                lr: field(&rec, 2, LOSS_FILE)?,
            });
        }
    }
    if let Some(bytes) = read_optional(dir, NORMS_FILE, manifest.files.get(NORMS_FILE))? {
        let mut report = NormReport {
            layer_names: Vec::new(),
            mean_norms: Vec::new(),
        };
        for rec in csv_rows(&bytes, NORMS_FILE)? {
            report.layer_names.push(field(&rec, 1, NORMS_FILE)?);
            report.mean_norms.push(field(&rec, 2, NORMS_FILE)?);
        }
        log.norm_report = Some(report);
    }
    if let Some(bytes) = read_optional(dir, SERIES_FILE, manifest.files.get(SERIES_FILE))? {
        let layers = log.layer_names.len();
        let rows = csv_rows(&bytes, SERIES_FILE)?;
        if layers == 0 || rows.len() % layers != 0 {
            return Err(Error::Format(format!("{SERIES_FILE}: ragged norm series")));
        }
        for chunk in rows.chunks(layers) {
            let step = field(&chunk[0], 0, SERIES_FILE)?;
            let norms = chunk
                .iter()
                .map(|r| field(r, 3, SERIES_FILE))
                .collect::<Result<Vec<f64>>>()?;
            log.norms.push(step, norms)?;
        }
    }
    if let Some(bytes) = read_optional(dir, MASKS_FILE, manifest.files.get(MASKS_FILE))? {
        let text = String::from_utf8(bytes).map_err(|e| Error::Format(format!("{MASKS_FILE}: {e}")))?;
        for line in text.lines() {
            let m: MaskLine =
                serde_json::from_str(line).map_err(|e| Error::Format(format!("{MASKS_FILE}: {e}")))?;
            log.periods.push(PeriodRecord {
                period: m.period,
                start_step: m.start_step,
                steps: m.steps,
                active: m.active,
                memory: MemoryEstimate {
                    weights: m.memory_bytes.weights,
                    gradients: m.memory_bytes.gradients,
                    moments: m.memory_bytes.moments,
                    adapters: m.memory_bytes.adapters,
                    activations: m.memory_bytes.activations,
                    total: m.memory_bytes.total,
                    trainable_params: m.trainable_params,
                    moment_params: m.moment_params,
                },
            });
        }
    }
    if manifest.unhashed.iter().any(|f| f == TIMING_FILE) {
        let path = dir.join(TIMING_FILE);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        for rec in csv_rows(&bytes, TIMING_FILE)? {
            log.wall_clock.push(field(&rec, 1, TIMING_FILE)?);
        }
    }
    if log.steps.len() != manifest.num_steps || log.periods.len() != manifest.num_periods {
        return Err(Error::Format(format!(
            "{} disagrees with its data files",
            path.display()
        )));
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instrument::finalize_norm_report;

    fn sample_log() -> RunLog {
        let names: Vec<String> = ["embedding", "block1", "head"].iter().map(|s| s.to_string()).collect();
        let mut log = RunLog::new("lisa", 7, serde_json::json!({"lr": 1e-3, "steps": 3}), names);
        for step in 1..=3 {
            log.steps.push(StepRecord {
                step,
                loss: 1.0 / (step as f64 * 3.0),
                lr: 1e-3,
            });
            log.norms.push(step, vec![0.1 * step as f64, 2.0f64.sqrt(), 1e-17]).unwrap();
            log.wall_clock.push(0.001 * step as f64);
        }
        log.periods.push(PeriodRecord {
            period: 0,
            start_step: 1,
            steps: 3,
            active: vec![0, 2],
            memory: MemoryEstimate {
                weights: 10,
                total: 10,
                ..Default::default()
            },
        });
        log.norm_report = Some(finalize_norm_report(&log.norms).unwrap());
        log
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let log = sample_log();
        export_run(&log, dir.path()).unwrap();
        assert_eq!(import_run(dir.path()).unwrap(), log);
        let loss = fs::read_to_string(dir.path().join(LOSS_FILE)).unwrap();
        assert!(loss.starts_with("step,loss,lr\n1,"));
        let norms = fs::read_to_string(dir.path().join(NORMS_FILE)).unwrap();
        assert!(norms.starts_with("layer_index,layer_name,mean_weight_norm\n0,embedding,"));
        let masks = fs::read_to_string(dir.path().join(MASKS_FILE)).unwrap();
        assert!(masks.starts_with("{\"period\":0,\"active\":[0,2],\"memory_bytes\":{"));
    }

    #[test]
    fn empty_run_is_manifest_only() {
        let dir = tempfile::tempdir().unwrap();
        let log = RunLog::new("full", 0, Value::Null, vec!["embedding".into()]);
        let written = export_run(&log, dir.path()).unwrap();
        assert_eq!(written, vec![dir.path().join(MANIFEST_FILE)]);
        assert_eq!(import_run(dir.path()).unwrap(), log);
    }

    #[test]
    fn export_is_deterministic_and_tamper_evident() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        export_run(&sample_log(), a.path()).unwrap();
        export_run(&sample_log(), b.path()).unwrap();
        for f in [LOSS_FILE, NORMS_FILE, SERIES_FILE, MASKS_FILE, MANIFEST_FILE] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
        }
        fs::write(a.path().join(LOSS_FILE), "step,loss,lr\n1,0,0\n").unwrap();
        assert!(matches!(import_run(a.path()), Err(Error::Format(_))));
    }

    #[test]
    fn missing_directory_is_io_error() {
        let err = import_run(Path::new("/nonexistent/run")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }
}
