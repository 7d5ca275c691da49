//! Measurement: per-layer weight norms, analytic memory accounting and
//! run logs.

mod memory;
mod runlog;

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::LayeredModel;

pub use memory::{estimate_memory, ArchSpec, MemoryEstimate, MemoryMethod, Precision, ACTIVATION_MODEL};
pub use runlog::{
    export_run, import_run, sha256_hex, version_string, PeriodRecord, RunLog, RunStatus, StepRecord, MANIFEST_FILE,
};

/// L2 norm of the concatenated parameters of each layer in `layers`.
pub fn record_layer_norms(model: &LayeredModel, layers: Range<usize>) -> Result<Vec<f64>> {
    layers
        .map(|l| {
            let ss: f64 = model.layer_params(l)?.iter().map(|p| p.tensor.sum_of_squares()).sum();
            Ok(ss.sqrt())
        })
        .collect()
}

/// Per-layer norms recorded at a series of steps.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NormSeries {
    pub layer_names: Vec<String>,
    /// `(step, per-layer norms)` in recording order.
    pub records: Vec<(usize, Vec<f64>)>,
}

impl NormSeries {
    pub fn new(layer_names: Vec<String>) -> Self {
        Self {
            layer_names,
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, step: usize, norms: Vec<f64>) -> Result<()> {
        if norms.len() != self.layer_names.len() {
            return Err(Error::Shape(format!(
                "{} norms for {} layers",
                norms.len(),
                self.layer_names.len()
            )));
        }
        self.records.push((step, norms));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Time-averaged per-layer weight norms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormReport {
    pub layer_names: Vec<String>,
    pub mean_norms: Vec<f64>,
}

impl NormReport {
    /// Median of the middle-block (`1..=N`) mean norms.
    pub fn median_middle(&self) -> Option<f64> {
        let n = self.mean_norms.len();
        if n < 3 {
            return None;
        }
        let mut mid = self.mean_norms[1..n - 1].to_vec();
        mid.sort_by(f64::total_cmp);
        let k = mid.len();
        Some(if k % 2 == 1 {
            mid[k / 2]
        } else {
            0.5 * (mid[k / 2 - 1] + mid[k / 2])
        })
    }

    /// `(embedding / median middle, head / median middle)`.
    pub fn skew_ratios(&self) -> Option<(f64, f64)> {
        let med = self.median_middle()?;
        let n = self.mean_norms.len();
        Some((self.mean_norms[0] / med, self.mean_norms[n - 1] / med))
    }
}

/// Exact arithmetic mean per layer over all records.
pub fn finalize_norm_report(series: &NormSeries) -> Result<NormReport> {
    if series.is_empty() {
        return Err(Error::Contract("norm series has no recorded steps".into()));
    }
    let layers = series.layer_names.len();
    let mut sums = vec![0.0; layers];
    for (_, norms) in &series.records {
        for (s, n) in sums.iter_mut().zip(norms) {
            *s += n;
        }
    }
    let count = series.records.len() as f64;
    Ok(NormReport {
        layer_names: series.layer_names.clone(),
        mean_norms: sums.into_iter().map(|s| s / count).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LayerGroup, ModelConfig};

    fn series(values: &[f64]) -> NormSeries {
        let mut s = NormSeries::new(vec!["x".into()]);
        for (i, &v) in values.iter().enumerate() {
            s.push(i + 1, vec![v]).unwrap();
        }
        s
    }

    #[test]
    fn report_means() {
        assert_eq!(finalize_norm_report(&series(&[1.0, 1.0, 1.0])).unwrap().mean_norms, vec![1.0]);
        assert_eq!(finalize_norm_report(&series(&[0.0, 2.0])).unwrap().mean_norms, vec![1.0]);
        assert!(matches!(
            finalize_norm_report(&series(&[])),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn push_checks_width() {
        let mut s = NormSeries::new(vec!["a".into(), "b".into()]);
        assert!(s.push(1, vec![1.0]).is_err());
    }

    #[test]
    fn median_and_skew() {
        let r = NormReport {
            layer_names: (0..5).map(|i| i.to_string()).collect(),
            mean_norms: vec![8.0, 1.0, 3.0, 2.0, 6.0],
        };
        assert_eq!(r.median_middle(), Some(2.0));
        assert_eq!(r.skew_ratios(), Some((4.0, 3.0)));
    }

    #[test]
    fn layer_norm_of_known_vector() {
        let cfg = ModelConfig::desk(5, 4);
        let mut m = LayeredModel::build(&cfg, 0).unwrap();
        for p in m.groups_mut()[1].params.iter_mut() {
            p.tensor.data_mut().fill(0.0);
        }
        m.groups_mut()[1].params[0].tensor.data_mut()[..2].copy_from_slice(&[3.0, 4.0]);
        let norms = record_layer_norms(&m, 1..2).unwrap();
        assert_eq!(norms, vec![5.0]);
        let g: &LayerGroup = &m.groups()[1];
        assert!(g.numel() > 2);
    }
}
