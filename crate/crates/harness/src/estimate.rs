//! The `estimate-memory` verb.

use std::collections::BTreeSet;

use lisa_core::instrument::{estimate_memory, ArchSpec, MemoryEstimate, MemoryMethod, Precision};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateRequest {
    pub preset: String,
    /// `full`, `lora` or `lisa`.
    pub method: String,
    pub rank: Option<usize>,
    pub gamma: Option<usize>,
    pub include_head: bool,
    pub precision: Precision,
    pub batch: usize,
    /// Defaults to the preset's context length.
    pub seq: Option<usize>,
}

/// Parses `f64`, `mixed16`, or a uniform byte width such as `4`.
pub fn parse_precision(text: &str) -> Result<Precision> {
    match text {
        "f64" => Ok(Precision::F64),
        "mixed16" | "16" | "bf16" | "fp16" => Ok(Precision::MIXED16),
        other => other
            .parse::<usize>()
            .ok()
            .filter(|b| *b > 0)
            .map(Precision::uniform)
            .ok_or_else(|| HarnessError::Config(format!("unknown precision '{other}'; use f64, mixed16 or a byte width"))),
    }
}

pub fn estimate(req: &EstimateRequest) -> Result<(ArchSpec, MemoryEstimate)> {
    let arch = ArchSpec::preset(&req.preset)?;
    let method = match req.method.as_str() {
        "full" => {
            if req.rank.is_some() || req.gamma.is_some() {
                return Err(HarnessError::Config("--rank/--gamma do not apply to method full".into()));
            }
            MemoryMethod::Full
        }
        "lora" => {
            if req.gamma.is_some() {
                return Err(HarnessError::Config("--gamma does not apply to method lora".into()));
            }
            let rank = req
                .rank
                .ok_or_else(|| HarnessError::Config("method lora needs --rank".into()))?;
            MemoryMethod::Lora {
                rank,
                include_head: req.include_head,
            }
        }
        "lisa" => {
            if req.rank.is_some() {
                return Err(HarnessError::Config("--rank does not apply to method lisa".into()));
            }
            let gamma = req
                .gamma
                .ok_or_else(|| HarnessError::Config("method lisa needs --gamma".into()))?;
            MemoryMethod::Lisa {
                gamma,
                always_active: BTreeSet::from([0, arch.num_blocks + 1]),
            }
        }
        other => {
            return Err(HarnessError::Config(format!(
                "unknown method '{other}'; expected full, lora or lisa"
            )))
        }
    };
    let seq = req.seq.unwrap_or(arch.default_seq);
    let est = estimate_memory(&arch, &method, req.precision, req.batch, seq)?;
    Ok((arch, est))
}

/// Human-readable byte count.
pub fn human_bytes(bytes: usize) -> String {
    const UNITS: [&str; 5] = ["B", "KiB", "MiB", "GiB", "TiB"];
    let mut v = bytes as f64;
    let mut u = 0;
    while v >= 1024.0 && u + 1 < UNITS.len() {
        v /= 1024.0;
        u += 1;
    }
    format!("{v:.2} {}", UNITS[u])
}
