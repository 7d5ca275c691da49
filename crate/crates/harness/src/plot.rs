//! The `plot-data` verb: merge run directories into plot-ready tables.
//!
//! * `loss.csv` — `step, loss_<run1>, loss_<run2>, …` (just `step, loss`
//!   for a single run); a run with no value at a step gets an empty cell
//!   (shorter runs are padded, never extrapolated).
//! * `norms.csv` — `layer_index, layer_name, norm_<run1>, …` (`norm` for a
//!   single run) with each run's time-averaged per-layer weight norm.
//! * `warnings.csv` — written only when step grids disagree: every run is
//!   then resampled to the coarsest grid (its last recorded loss at or
//!   before each grid step) and each resampled run gets a record here.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use lisa_core::instrument::{import_run, RunLog};

use crate::error::{HarnessError, Result};
use crate::sweep::csv_io;

pub const LOSS_FILE: &str = "loss.csv";
pub const NORMS_FILE: &str = "norms.csv";
pub const WARNINGS_FILE: &str = "warnings.csv";

#[derive(Debug, Clone, PartialEq)]
pub struct PlotOutcome {
    pub files: Vec<PathBuf>,
    pub labels: Vec<String>,
    pub warnings: Vec<String>,
}

/// Column label for each run: its directory name, suffixed on collisions.
fn labels(dirs: &[PathBuf]) -> Vec<String> {
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    dirs.iter()
        .map(|d| {
            let base = d
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| "run".into());
            let n = seen.entry(base.clone()).or_insert(0);
            *n += 1;
            if *n == 1 {
                base
            } else {
                format!("{base}_{n}")
            }
        })
        .collect()
}

fn column_names(kind: &str, labels: &[String]) -> Vec<String> {
    if labels.len() == 1 {
        vec![kind.to_string()]
    } else {
        labels.iter().map(|l| format!("{kind}_{l}")).collect()
    }
}

fn stride(steps: &[usize]) -> usize {
    steps.windows(2).map(|w| w[1] - w[0]).max().unwrap_or(1).max(1)
}

/// Whether every run's grid is a prefix-compatible subset of one regular
/// grid (same start and stride), so plain alignment with padding suffices.
fn grids_agree(grids: &[Vec<usize>]) -> bool {
    let regular = |g: &Vec<usize>| g.windows(2).all(|w| w[1] - w[0] == stride(g));
    let nonempty: Vec<&Vec<usize>> = grids.iter().filter(|g| !g.is_empty()).collect();
    let Some(first) = nonempty.first() else {
        return true;
    };
    nonempty.iter().all(|g| regular(g) && g[0] == first[0])
        && nonempty
            .iter()
            .filter(|g| g.len() > 1)
            .map(|g| stride(g))
            .collect::<BTreeSet<_>>()
            .len()
            <= 1
}

/// Merges `logs` into the two tables; returns the written rows for tests.
pub fn merge_losses(logs: &[RunLog], names: &[String]) -> (Vec<Vec<String>>, Vec<String>) {
    let grids: Vec<Vec<usize>> = logs.iter().map(|l| l.steps.iter().map(|s| s.step).collect()).collect();
    let mut warnings = Vec::new();
    let columns: Vec<BTreeMap<usize, f64>> = if grids_agree(&grids) {
        logs.iter()
            .map(|l| l.steps.iter().map(|s| (s.step, s.loss)).collect())
            .collect()
    } else {
        // Coarsest grid: the largest stride, spanning the longest run.
        let (coarse_idx, _) = grids
            .iter()
            .enumerate()
            .max_by_key(|(i, g)| (stride(g), g.len(), std::cmp::Reverse(*i)))
            .expect("at least one run");
        let coarse_stride = stride(&grids[coarse_idx]);
        let start = grids[coarse_idx].first().copied().unwrap_or(1);
        let end = grids.iter().filter_map(|g| g.last().copied()).max().unwrap_or(start);
        let grid: Vec<usize> = (start..=end).step_by(coarse_stride).collect();
        logs.iter()
            .zip(names)
            .map(|(l, name)| {
                let last = l.steps.last().map(|s| s.step).unwrap_or(0);
                let col: BTreeMap<usize, f64> = grid
                    .iter()
                    .filter(|&&g| g <= last)
                    .filter_map(|&g| {
                        l.steps
                            .iter()
                            .take_while(|s| s.step <= g)
                            .last()
                            .map(|s| (g, s.loss))
                    })
                    .collect();
                let own: Vec<usize> = l.steps.iter().map(|s| s.step).collect();
                if own.iter().filter(|s| col.contains_key(s)).count() != own.len() || own.len() != col.len() {
                    warnings.push(format!(
                        "{name}: step grid (stride {}) resampled to stride {coarse_stride}",
                        stride(&own)
                    ));
                }
                col
            })
            .collect()
    };
    let steps: BTreeSet<usize> = columns.iter().flat_map(|c| c.keys().copied()).collect();
    let rows = steps
        .into_iter()
        .map(|s| {
            std::iter::once(s.to_string())
                .chain(columns.iter().map(|c| c.get(&s).map(|v| v.to_string()).unwrap_or_default()))
                .collect()
        })
        .collect();
    (rows, warnings)
}

pub fn merge_norms(logs: &[RunLog]) -> (Vec<Vec<String>>, Vec<String>) {
    let layers = logs.iter().map(|l| l.layer_names.len()).max().unwrap_or(0);
    let mut warnings = Vec::new();
    let mut rows = Vec::with_capacity(layers);
    for layer in 0..layers {
        let names: BTreeSet<&String> = logs.iter().filter_map(|l| l.layer_names.get(layer)).collect();
        if names.len() > 1 {
            warnings.push(format!(
                "layer {layer} has different names across runs: {}",
                names.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
            ));
        }
        let mut row = vec![
            layer.to_string(),
            names.iter().next().map(|s| s.to_string()).unwrap_or_default(),
        ];
        for l in logs {
            row.push(
                l.norm_report
                    .as_ref()
                    .and_then(|r| r.mean_norms.get(layer))
                    .map(|v| v.to_string())
                    .unwrap_or_default(),
            );
        }
        rows.push(row);
    }
    (rows, warnings)
}

fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    w.write_record(header).map_err(|e| csv_io(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

/// Reads every run directory and writes the merged tables into `out`.
pub fn plot_data(dirs: &[PathBuf], out: &Path) -> Result<PlotOutcome> {
    if dirs.is_empty() {
        return Err(HarnessError::Config("plot-data needs at least one run directory".into()));
    }
    let logs = dirs.iter().map(|d| import_run(d)).collect::<lisa_core::Result<Vec<_>>>()?;
    let names = labels(dirs);
    std::fs::create_dir_all(out).map_err(|e| HarnessError::io(out, e))?;

    let mut files = Vec::new();
    let (loss_rows, mut warnings) = merge_losses(&logs, &names);
    let header: Vec<String> = std::iter::once("step".to_string())
        .chain(column_names("loss", &names))
        .collect();
    let path = out.join(LOSS_FILE);
    write_csv(&path, &header, &loss_rows)?;
    files.push(path);

    let (norm_rows, norm_warnings) = merge_norms(&logs);
    warnings.extend(norm_warnings);
    let header: Vec<String> = ["layer_index".to_string(), "layer_name".to_string()]
        .into_iter()
        .chain(column_names("norm", &names))
        .collect();
    let path = out.join(NORMS_FILE);
    write_csv(&path, &header, &norm_rows)?;
    files.push(path);

    let path = out.join(WARNINGS_FILE);
    if warnings.is_empty() {
        if path.exists() {
            std::fs::remove_file(&path).map_err(|e| HarnessError::io(&path, e))?;
        }
    } else {
        let rows: Vec<Vec<String>> = warnings.iter().map(|w| vec![w.clone()]).collect();
        write_csv(&path, &["warning".to_string()], &rows)?;
        files.push(path);
    }
    Ok(PlotOutcome {
        files,
        labels: names,
        warnings,
    })
}
