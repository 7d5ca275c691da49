//! Shared helpers for the harness integration tests.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

use lisa_harness::config::RunConfig;

pub fn preset_path(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("presets").join(rel)
}

/// Loads a shipped preset.
pub fn preset(rel: &str) -> RunConfig {
    RunConfig::load(&preset_path(rel)).unwrap_or_else(|e| panic!("preset {rel}: {e}"))
}

/// Fourth-order central difference of `f` at `x0`.
pub fn central_difference(mut f: impl FnMut(f64) -> f64, x0: f64, h: f64) -> f64 {
    (-f(x0 + 2.0 * h) + 8.0 * f(x0 + h) - 8.0 * f(x0 - h) + f(x0 - 2.0 * h)) / (12.0 * h)
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Runs the `lisa` binary with `LISA_OUTPUT_ROOT = root`.
pub fn lisa(root: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_lisa"))
        .args(args)
        .env("LISA_OUTPUT_ROOT", root)
        .output()
        .expect("spawn lisa")
}

/// Contents of every file a run directory's manifest declares as hashed,
/// plus the manifest itself and the checkpoint.
pub fn hashed_contents(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let manifest_bytes = std::fs::read(dir.join("manifest.json")).expect("manifest");
    let manifest: serde_json::Value = serde_json::from_slice(&manifest_bytes).expect("manifest json");
    let mut out = BTreeMap::new();
    for name in manifest["files"].as_object().expect("files").keys() {
        out.insert(name.clone(), std::fs::read(dir.join(name)).expect("hashed file"));
    }
    if let Ok(bytes) = std::fs::read(dir.join("checkpoint.bin")) {
        out.insert("checkpoint.bin".into(), bytes);
    }
    out.insert("manifest.json".into(), manifest_bytes);
    out
}

/// Rows of a CSV file as string vectors, header first.
pub fn read_csv(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .expect("csv");
    r.records()
        .map(|rec| rec.expect("record").iter().map(str::to_string).collect())
        .collect()
}
