//! The `run` verb: config → training → run directory.

use std::path::{Path, PathBuf};

use serde_json::Value;

use lisa_core::checkpoint::{encode, Checkpoint};
use lisa_core::data::Dataset;
use lisa_core::instrument::{export_run, sha256_hex, RunLog, RunStatus};
use lisa_core::lora::attach_adapters;
use lisa_core::model::LayeredModel;
use lisa_core::train::{train_full, train_lisa, train_lora, TrainOptions};

use crate::config::{output_root, Method, RunConfig};
use crate::error::{HarnessError, Result};

/// Checkpoint archive written next to the logs.
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

/// A finished run and where it was written.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub log: RunLog,
    pub files: Vec<PathBuf>,
}

/// Trains per `cfg` without touching the filesystem (beyond reading text
/// data). Returns the log and, when requested, the encoded checkpoint.
pub fn execute(cfg: &RunConfig) -> Result<(RunLog, Option<Vec<u8>>)> {
    cfg.validate()?;
    let data = Dataset::from_descriptor(&cfg.data)?;
    let model_cfg = cfg.model.resolve(&data)?;
    let snapshot = serde_json::to_value(cfg).map_err(|e| HarnessError::Config(e.to_string()))?;
    let mut opts = TrainOptions::new(cfg.steps, cfg.batch_size, cfg.seed);
    opts.norm_cadence = cfg.norm_cadence;
    opts.config = snapshot.clone();

    let mut model = LayeredModel::build(&model_cfg, cfg.seed)?;
    let (mut log, ckpt) = match cfg.method {
        Method::Full => {
            let out = train_full(&mut model, &data, &cfg.optimizer, &opts, None)?;
            let ckpt = Checkpoint::from_model(model, out.optimizer, snapshot);
            (out.log, ckpt)
        }
        Method::Lisa => {
            let section = cfg.schedule.as_ref().expect("validated");
            let sched = section.build(model_cfg.num_blocks, cfg.steps, cfg.seed)?;
            opts.moment_policy = section.moment_policy;
            let out = train_lisa(&mut model, &data, &cfg.optimizer, &sched, &opts, None)?;
            let ckpt = Checkpoint::from_model(model, out.optimizer, snapshot);
            (out.log, ckpt)
        }
        Method::Lora => {
            let lora = cfg.lora.as_ref().expect("validated");
            let mut adapted = attach_adapters(model, lora, cfg.seed.wrapping_add(1))?;
            let out = train_lora(&mut adapted, &data, &cfg.optimizer, &opts, None)?;
            let ckpt = Checkpoint::from_adapted(adapted, out.optimizer, snapshot);
            (out.log, ckpt)
        }
    };
    if let Some(split) = &data.split {
        log.extra.insert(
            "data_split".into(),
            serde_json::to_value(split).map_err(|e| HarnessError::Config(e.to_string()))?,
        );
    }
    log.extra.insert("model".into(), serde_json::to_value(&model_cfg).unwrap_or(Value::Null));
    let bytes = if cfg.save_checkpoint {
        let bytes = encode(&ckpt)?;
        log.extra.insert(
            "checkpoint".into(),
            serde_json::json!({ "file": CHECKPOINT_FILE, "sha256": sha256_hex(&bytes) }),
        );
        Some(bytes)
    } else {
        None
    };
    Ok((log, bytes))
}

/// Runs `cfg` and writes its directory under `root`. A diverged run keeps
/// its partial logs on disk and is reported as [`HarnessError::Diverged`].
pub fn run_config(cfg: &RunConfig, root: &Path) -> Result<RunOutcome> {
    let dir = cfg.output_path(root);
    let (log, ckpt) = execute(cfg)?;
    std::fs::create_dir_all(&dir).map_err(|e| HarnessError::io(&dir, e))?;
    if let Some(bytes) = ckpt {
        let path = dir.join(CHECKPOINT_FILE);
        std::fs::write(&path, bytes).map_err(|e| HarnessError::io(&path, e))?;
    }
    let files = export_run(&log, &dir)?;
    if let RunStatus::Diverged { step, detail } = &log.status {
        return Err(HarnessError::Diverged {
            step: *step,
            detail: detail.clone(),
            dir,
        });
    }
    Ok(RunOutcome { dir, log, files })
}

/// Loads `path` and runs it under the output root.
pub fn run_file(path: &Path) -> Result<RunOutcome> {
    let cfg = RunConfig::load(path)?;
    run_config(&cfg, &output_root())
}
