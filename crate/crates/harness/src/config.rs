//! Run configuration files (TOML, versioned schema, unknown keys rejected).
//!
//! ```toml
//! schema_version = 1
//! method = "lisa"            # full | lora | lisa
//! seed = 0
//! steps = 500
//! batch_size = 8
//! output_dir = "copy-lisa"   # relative to the output root
//!
//! [model]
//! preset = "desk"            # desk | desk-deep | gpt2-analogue | gpt2-small
//!
//! [data]
//! kind = "synthetic_copy"
//! vocab_size = 16
//! seq_len = 16
//! samples = 2000
//! seed = 1
//!
//! [optimizer]
//! lr = 1e-3
//!
//! [schedule]                 # lisa only
//! gamma = 2
//! period = 5
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use lisa_core::data::{Dataset, DatasetDescriptor};
use lisa_core::lisa::{FreezeSchedule, SamplingMode};
use lisa_core::lora::LoRAConfig;
use lisa_core::model::ModelConfig;
use lisa_core::optim::{AdamWConfig, MomentPolicy};
use lisa_core::train::NormCadence;

use crate::error::{HarnessError, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// Environment variable that overrides the output root directory.
pub const OUTPUT_ROOT_ENV: &str = "LISA_OUTPUT_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Full,
    Lora,
    Lisa,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Full => "full",
            Method::Lora => "lora",
            Method::Lisa => "lisa",
        }
    }
}

/// Model architecture: a named preset, individual fields, or a preset with
/// field overrides. `vocab_size` and `max_seq_len` default to the dataset's.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub preset: Option<String>,
    pub vocab_size: Option<usize>,
    pub max_seq_len: Option<usize>,
    pub model_dim: Option<usize>,
    pub num_heads: Option<usize>,
    pub num_blocks: Option<usize>,
    pub mlp_ratio: Option<f64>,
    pub tie_embeddings: Option<bool>,
}

pub const MODEL_PRESETS: [&str; 4] = ["desk", "desk-deep", "gpt2-analogue", "gpt2-small"];

/// GPT-2's vocabulary size.
pub const GPT2_VOCAB: usize = 50257;

impl ModelSection {
    /// Resolves the architecture against the dataset it will train on.
    pub fn resolve(&self, data: &Dataset) -> Result<ModelConfig> {
        let (v, s) = (data.vocab_size, data.seq_len);
        let mut cfg = match self.preset.as_deref() {
            None | Some("desk") => ModelConfig::desk(v, s),
            Some("desk-deep") => ModelConfig {
                model_dim: 32,
                num_heads: 4,
                num_blocks: 8,
                ..ModelConfig::desk(v, s)
            },
            Some("gpt2-analogue") => ModelConfig {
                vocab_size: GPT2_VOCAB,
                ..ModelConfig::desk(v, s)
            },
            Some("gpt2-small") => ModelConfig::gpt2_small(),
            Some(other) => {
                return Err(HarnessError::Config(format!(
                    "unknown model preset '{other}'; known: {}",
                    MODEL_PRESETS.join(", ")
                )))
            }
        };
        if let Some(x) = self.vocab_size {
            cfg.vocab_size = x;
        }
        if let Some(x) = self.max_seq_len {
            cfg.max_seq_len = x;
        }
        if let Some(x) = self.model_dim {
            cfg.model_dim = x;
        }
        if let Some(x) = self.num_heads {
            cfg.num_heads = x;
        }
        if let Some(x) = self.num_blocks {
            cfg.num_blocks = x;
        }
        if let Some(x) = self.mlp_ratio {
            cfg.mlp_ratio = x;
        }
        if let Some(x) = self.tie_embeddings {
            cfg.tie_embeddings = x;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// LISA sampling settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    #[serde(default)]
    pub mode: SamplingMode,
    pub gamma: usize,
    /// Sampling period `K`.
    pub period: usize,
    /// Mask seed; defaults to the run seed.
    pub seed: Option<u64>,
    /// Never-frozen layers; defaults to embedding and head.
    pub always_active: Option<Vec<usize>>,
    #[serde(default)]
    pub moment_policy: MomentPolicy,
    /// Per-layer probabilities (`N + 2` entries) for Bernoulli sampling,
    /// e.g. from norm ratios. Overrides `gamma`.
    pub probabilities: Option<Vec<f64>>,
}

impl ScheduleSection {
    pub fn build(&self, num_blocks: usize, steps: usize, run_seed: u64) -> Result<FreezeSchedule> {
        let seed = self.seed.unwrap_or(run_seed);
        let sched = match (&self.probabilities, self.mode) {
            (Some(p), _) => {
                if p.len() != num_blocks + 2 {
                    return Err(HarnessError::Config(format!(
                        "schedule.probabilities has {} entries, model has {} layers",
                        p.len(),
                        num_blocks + 2
                    )));
                }
                FreezeSchedule::with_probabilities(p.clone(), self.period, steps, seed)?
            }
            (None, SamplingMode::FixedGamma) => {
                FreezeSchedule::fixed_gamma(num_blocks, self.gamma, self.period, steps, seed)?
            }
            (None, SamplingMode::Bernoulli) => {
                FreezeSchedule::bernoulli(num_blocks, self.gamma, self.period, steps, seed)?
            }
        };
        match &self.always_active {
            Some(list) => Ok(sched.with_always_active(list.iter().copied().collect())?),
            None => Ok(sched),
        }
    }
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub method: Method,
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    /// Run directory, relative to the output root unless absolute.
    pub output_dir: PathBuf,
    #[serde(default)]
    pub norm_cadence: NormCadence,
    /// Write a checkpoint archive next to the logs.
    #[serde(default = "default_true")]
    pub save_checkpoint: bool,
    #[serde(default)]
    pub model: ModelSection,
    pub data: DatasetDescriptor,
    pub optimizer: AdamWConfig,
    pub lora: Option<LoRAConfig>,
    pub schedule: Option<ScheduleSection>,
}

/// Turns a TOML parse error into a config error that keeps its line and
/// column diagnostics.
fn toml_error(origin: &str, e: toml::de::Error) -> HarnessError {
    HarnessError::Config(format!("{origin}: {e}"))
}

/// Checks the `schema_version` key before full deserialization so version
/// mismatches are reported as such.
pub(crate) fn check_schema_version(text: &str, origin: &str) -> Result<()> {
    let table: toml::Table = toml::from_str(text).map_err(|e| toml_error(origin, e))?;
    match table.get("schema_version") {
        None => Err(HarnessError::Config(format!("{origin}: missing key `schema_version`"))),
        Some(toml::Value::Integer(v)) if *v == SCHEMA_VERSION as i64 => Ok(()),
        Some(other) => Err(HarnessError::Config(format!(
            "{origin}: unsupported schema_version {other}; this build reads version {SCHEMA_VERSION}"
        ))),
    }
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))
}

impl RunConfig {
    /// Parses and validates a config. Relative data paths resolve against
    /// `base_dir`.
    pub fn from_toml_str(text: &str, origin: &str, base_dir: &Path) -> Result<Self> {
        check_schema_version(text, origin)?;
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| toml_error(origin, e))?;
        if let DatasetDescriptor::TextFile { path, .. } = &mut cfg.data {
            if path.is_relative() {
                *path = base_dir.join(&*path);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml_str(&text, &path.display().to_string(), base)
    }

    /// Structural checks that need no data.
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(HarnessError::Config("steps must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(HarnessError::Config("batch_size must be >= 1".into()));
        }
        self.optimizer.validate()?;
        match (self.method, self.lora.is_some(), self.schedule.is_some()) {
            (Method::Full, false, false) | (Method::Lora, true, false) | (Method::Lisa, false, true) => Ok(()),
            (m, lora, sched) => {
                let mut msgs = Vec::new();
                if lora != (m == Method::Lora) {
                    msgs.push(if lora {
                        "[lora] is only allowed with method = \"lora\""
                    } else {
                        "method = \"lora\" requires a [lora] section"
                    });
                }
                if sched != (m == Method::Lisa) {
                    msgs.push(if sched {
                        "[schedule] is only allowed with method = \"lisa\""
                    } else {
                        "method = \"lisa\" requires a [schedule] section"
                    });
                }
                Err(HarnessError::Config(msgs.join("; ")))
            }
        }
    }

    /// The run directory under `root` (absolute `output_dir` wins).
    pub fn output_path(&self, root: &Path) -> PathBuf {
        root.join(&self.output_dir)
    }
}

/// `$LISA_OUTPUT_ROOT` if set, otherwise the current directory.
pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."))
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
schema_version = 1
method = "full"
seed = 3
steps = 10
batch_size = 2
output_dir = "x"

[data]
kind = "synthetic_copy"
vocab_size = 8
seq_len = 6
samples = 10
seed = 0

[optimizer]
lr = 0.001
"#;

    fn parse(text: &str) -> Result<RunConfig> {
        RunConfig::from_toml_str(text, "test.toml", Path::new("/cfg"))
    }

    #[test]
    fn parses_minimal_full() {
        let cfg = parse(BASE).unwrap();
        assert_eq!(cfg.method, Method::Full);
        assert_eq!(cfg.optimizer.beta2, 0.999);
        assert!(cfg.save_checkpoint);
        let data = Dataset::from_descriptor(&cfg.data).unwrap();
        let m = cfg.model.resolve(&data).unwrap();
        assert_eq!((m.vocab_size, m.max_seq_len, m.model_dim, m.num_blocks), (8, 6, 64, 4));
    }

    #[test]
    fn unknown_keys_are_errors() {
        let e = parse(&BASE.replace("lr = 0.001", "lr = 0.001\nlearning_rate = 1")).unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("learning_rate") && msg.contains("line"), "{msg}");
        assert_eq!(e.exit_code(), 2);
        assert!(parse(&format!("{BASE}\ntypo_key = 1")).is_err());
    }

    #[test]
    fn schema_version_checked() {
        let e = parse(&BASE.replace("schema_version = 1", "schema_version = 2")).unwrap_err();
        assert!(e.to_string().contains("schema_version"));
        assert!(parse(&BASE.replace("schema_version = 1", "")).is_err());
    }

    #[test]
    fn method_sections_must_match() {
        assert!(parse(&BASE.replace("\"full\"", "\"lisa\"")).is_err());
        assert!(parse(&BASE.replace("\"full\"", "\"lora\"")).is_err());
        let lora = format!("{}\n[lora]\nrank = 2\n", BASE.replace("\"full\"", "\"lora\""));
        assert!(parse(&lora).is_ok());
        let extra = format!("{BASE}\n[lora]\nrank = 2\n");
        assert!(parse(&extra).is_err());
        let lisa = format!("{}\n[schedule]\ngamma = 1\nperiod = 2\n", BASE.replace("\"full\"", "\"lisa\""));
        assert!(parse(&lisa).is_ok());
    }

    #[test]
    fn zero_steps_rejected() {
        assert!(parse(&BASE.replace("steps = 10", "steps = 0")).is_err());
    }

    #[test]
    fn relative_text_paths_resolve() {
        let text = BASE.replace(
            "kind = \"synthetic_copy\"\nvocab_size = 8\nseq_len = 6\nsamples = 10\nseed = 0",
            "kind = \"text_file\"\npath = \"corpus.txt\"\nseq_len = 4\nvocab = \"char\"",
        );
        let cfg = parse(&text).unwrap();
        match cfg.data {
            DatasetDescriptor::TextFile { path, .. } => assert_eq!(path, Path::new("/cfg/corpus.txt")),
            _ => panic!(),
        }
    }

    #[test]
    fn model_presets() {
        let data = Dataset::from_descriptor(&DatasetDescriptor::SyntheticCopy {
            vocab_size: 8,
            seq_len: 6,
            samples: 4,
            seed: 0,
        })
        .unwrap();
        let deep = ModelSection {
            preset: Some("desk-deep".into()),
            ..Default::default()
        };
        assert_eq!(deep.resolve(&data).unwrap().num_blocks, 8);
        let analogue = ModelSection {
            preset: Some("gpt2-analogue".into()),
            ..Default::default()
        };
        let a = analogue.resolve(&data).unwrap();
        assert_eq!(a.vocab_size, GPT2_VOCAB);
        assert!(!a.tie_embeddings);
        let bad = ModelSection {
            preset: Some("gpt-9".into()),
            ..Default::default()
        };
        assert!(bad.resolve(&data).is_err());
    }
}
