//! Scoring of reconstructions: per-window correlation, per-subject
//! aggregation and the subject-leakage probe.

pub mod probe;
pub mod report;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::codec::MlaCodec;
use crate::error::{Error, Result};
use crate::signal::{correlation, SplitMode, WindowedDataset};
use crate::tensor::Tensor;
use crate::train::reconstruct_all;

pub use probe::{
    eeg_features, envelope_features, probe_reconstructions, subject_probe, ProbeConfig,
};
pub use report::{report_csv, report_emit, report_svg, CSV_HEADER};

/// Correlation with the degenerate convention applied; the flag reports
/// whether it was used.
pub fn pcc_checked(truth: &[f64], pred: &[f64]) -> Result<(f64, bool)> {
    if truth.len() != pred.len() {
        return Err(Error::dim(format!(
            "pcc over windows of {} and {} samples",
            truth.len(),
            pred.len()
        )));
    }
    if truth.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "pcc over {} samples",
            truth.len()
        )));
    }
    Ok(match correlation(truth, pred) {
        Some(r) => (r, false),
        None => (0.0, true),
    })
}

/// Sample Pearson correlation; a window without spread scores 0.
pub fn pcc_metric(truth: &[f64], pred: &[f64]) -> Result<f64> {
    pcc_checked(truth, pred).map(|(r, _)| r)
}

/// Infallible form for callers that already guarantee equal lengths.
pub fn pcc_value(truth: &[f64], pred: &[f64]) -> f64 {
    correlation(truth, pred).unwrap_or(0.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectScore {
    pub subject_id: usize,
    pub mean_pcc: f64,
    pub std_pcc: f64,
    pub n_windows: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub split: SplitMode,
    pub config_hash: String,
    pub subjects: Vec<SubjectScore>,
    pub probe_acc: Option<f64>,
    /// Windows scored 0 because one side was constant.
    pub degenerate_windows: usize,
}

impl MetricsReport {
    /// Window-weighted mean over subjects.
    pub fn mean_pcc(&self) -> f64 {
        let n: usize = self.subjects.iter().map(|s| s.n_windows).sum();
        let total: f64 = self
            .subjects
            .iter()
            .map(|s| s.mean_pcc * s.n_windows as f64)
            .sum();
        total / n.max(1) as f64
    }

    pub fn validate(&self) -> Result<()> {
        for s in &self.subjects {
            if !(-1.0..=1.0).contains(&s.mean_pcc) || !s.std_pcc.is_finite() {
                return Err(Error::param(format!(
                    "subject {} pcc {}",
                    s.subject_id, s.mean_pcc
                )));
            }
        }
        if let Some(p) = self.probe_acc {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::param(format!("probe accuracy {p}")));
            }
        }
        Ok(())
    }
}

/// Scores precomputed predictions `[N, L]` against `ds`.
pub fn evaluate_predictions(
    pred: &Tensor<f64>,
    ds: &WindowedDataset,
    mode: SplitMode,
    model: &str,
    config_hash: &str,
) -> Result<MetricsReport> {
    ds.check_provenance()?;
    let l = ds.window_len;
    if pred.shape() != [ds.len(), l] {
        return Err(Error::dim(format!(
            "predictions {:?} for {} windows of {l}",
            pred.shape(),
            ds.len()
        )));
    }
    let mut per: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut degenerate = 0;
    for (i, w) in ds.windows.iter().enumerate() {
        let (r, deg) = pcc_checked(ds.envelope(i), &pred.data()[i * l..(i + 1) * l])?;
        degenerate += usize::from(deg);
        per.entry(w.subject_id).or_default().push(r);
    }
    let subjects = per
        .into_iter()
        .map(|(subject_id, rs)| {
            let n = rs.len() as f64;
            let mean = rs.iter().sum::<f64>() / n;
            let var = rs.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
            SubjectScore {
                subject_id,
                mean_pcc: mean,
                std_pcc: var.sqrt(),
                n_windows: rs.len(),
            }
        })
        .collect();
    Ok(MetricsReport {
        model: model.to_string(),
        split: mode,
        config_hash: config_hash.to_string(),
        subjects,
        probe_acc: None,
        degenerate_windows: degenerate,
    })
}

/// Evaluates `codec` on `ds`. In cross mode any subject also present in
/// `train_subjects` is a hard error.
pub fn evaluate(
    codec: &MlaCodec<f64>,
    ds: &WindowedDataset,
    mode: SplitMode,
    train_subjects: &BTreeSet<usize>,
    model: &str,
    config_hash: &str,
) -> Result<MetricsReport> {
    if mode == SplitMode::Cross {
        let overlap: Vec<usize> = ds
            .subjects()
            .intersection(train_subjects)
            .copied()
            .collect();
        if !overlap.is_empty() {
            return Err(Error::Split(format!(
                "cross-subject evaluation includes training subjects {overlap:?}"
            )));
        }
    }
    let pred = reconstruct_all(codec, ds)?;
    evaluate_predictions(&pred, ds, mode, model, config_hash)
}
