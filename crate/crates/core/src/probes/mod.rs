//! Measurements of what a student shares with its teacher: adversarial
//! transfer, invariance agreement, prediction consensus, Grad-CAM preference,
//! representation similarity (linear CKA), shape bias and per-group accuracy.
//!
//! Every probe returns a [`ProbeReport`] whose per-item records determine its
//! metrics: each metric is `scale × mean(value)` over the records sharing a
//! key.

mod adversarial;
mod agreement;
mod cka;
mod metrics;

pub use adversarial::{fooling_rates, ifgsm_attack, ifgsm_batch, AdvConfig};
pub use agreement::{
    agreement_score, cam_preference, consensus_score, crop_pair, identity_pair, jitter_pair, shift_pair,
    PairGenerator,
};
pub use cka::{cka_matrix, cka_report, linear_cka, CkaMatrix, CkaValue};
pub use metrics::{accuracy, group_accuracy, shape_bias};

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::Model;

/// One measured value for one item.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: usize,
    pub key: String,
    pub value: f64,
    pub prediction: Option<usize>,
    pub reference: Option<usize>,
}

impl Record {
    pub fn new(id: usize, key: impl Into<String>, value: f64) -> Self {
        Record {
            id,
            key: key.into(),
            value,
            prediction: None,
            reference: None,
        }
    }

    pub fn with_predictions(mut self, prediction: usize, reference: usize) -> Self {
        self.prediction = Some(prediction);
        self.reference = Some(reference);
        self
    }
}

/// A named measurement: the headline `summary` is the metric under
/// `summary_key`; `degenerate` marks a summary with no supporting records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub name: String,
    pub summary_key: String,
    pub scale: f64,
    pub summary: f64,
    pub metrics: BTreeMap<String, f64>,
    pub counts: BTreeMap<String, usize>,
    pub degenerate: bool,
    #[serde(skip)]
    pub records: Vec<Record>,
    pub config: serde_json::Value,
    pub seed: u64,
}

fn aggregate(records: &[Record], scale: f64) -> (BTreeMap<String, f64>, BTreeMap<String, usize>) {
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for r in records {
        let e = sums.entry(r.key.clone()).or_default();
        e.0 += r.value;
        e.1 += 1;
    }
    let metrics = sums
        .iter()
        .map(|(k, &(s, n))| (k.clone(), scale * s / n as f64))
        .collect();
    let counts = sums.into_iter().map(|(k, (_, n))| (k, n)).collect();
    (metrics, counts)
}

impl ProbeReport {
    pub fn from_records(
        name: impl Into<String>,
        summary_key: impl Into<String>,
        scale: f64,
        records: Vec<Record>,
        config: serde_json::Value,
        seed: u64,
    ) -> Self {
        let summary_key = summary_key.into();
        let (metrics, counts) = aggregate(&records, scale);
        let summary = metrics.get(&summary_key).copied();
        ProbeReport {
            name: name.into(),
            summary: summary.unwrap_or(0.0),
            degenerate: summary.is_none(),
            summary_key,
            scale,
            metrics,
            counts,
            records,
            config,
            seed,
        }
    }

    /// The metric under `key`, if any record carries it.
    pub fn metric(&self, key: &str) -> Option<f64> {
        self.metrics.get(key).copied()
    }

    /// Rebuilds the summary and metrics from the records alone.
    pub fn recompute(&self) -> ProbeReport {
        ProbeReport::from_records(
            self.name.clone(),
            self.summary_key.clone(),
            self.scale,
            self.records.clone(),
            self.config.clone(),
            self.seed,
        )
    }

    /// Writes `<stem>.json` (summary, metrics, config) and `<stem>.csv`
    /// (records) into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join(format!("{stem}.json"));
        fs::write(&json, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(&json, e))?;
        let csv_path = dir.join(format!("{stem}.csv"));
        let mut w = csv::Writer::from_path(&csv_path).map_err(|e| Error::format(&csv_path, e.to_string()))?;
        for r in &self.records {
            w.serialize(r).map_err(|e| Error::format(&csv_path, e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(&csv_path, e))
    }

    /// Reads a report written by [`ProbeReport::save`], records included.
    pub fn load(dir: impl AsRef<Path>, stem: &str) -> Result<ProbeReport> {
        let dir = dir.as_ref();
        let json = dir.join(format!("{stem}.json"));
        let bytes = fs::read(&json).map_err(|e| Error::io(&json, e))?;
        let mut report: ProbeReport =
            serde_json::from_slice(&bytes).map_err(|e| Error::format(&json, e.to_string()))?;
        let csv_path = dir.join(format!("{stem}.csv"));
        let mut r = csv::Reader::from_path(&csv_path).map_err(|e| Error::format(&csv_path, e.to_string()))?;
        report.records = r
            .deserialize()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::format(&csv_path, e.to_string()))?;
        Ok(report)
    }
}

/// Argmax predictions for the given items, evaluated in chunks.
pub(crate) fn predict_items(model: &Model, ds: &LabeledDataset, indices: &[usize]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(256) {
        let batch = ds.batch(chunk, model.in_channels())?;
        out.extend(model.forward(&batch)?.argmax_rows());
    }
    Ok(out)
}

pub(crate) fn all_items(ds: &LabeledDataset) -> Vec<usize> {
    (0..ds.len()).collect()
}
