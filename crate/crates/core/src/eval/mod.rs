//! Lesion-level detection metrics.
//!
//! A predicted probability map is binarized at `tau_bin`; each connected
//! component becomes a detection scored by its mean probability and matched
//! one-to-one against ground-truth lesions. Detections from every test
//! patient are pooled into one precision-recall curve, from which mAP,
//! sensitivity at a target precision and true-positive DICE are read off.
//! The mAP interval comes from a patient-level bootstrap.

mod bootstrap;
mod detection;
mod pr;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use bootstrap::{ci95, percentile, MAX_REDRAWS};
pub use detection::{binarize, extract_detections, lesions_of, DetectionRecord};
pub use pr::{operating_point_at_precision, pr_curve, sensitivity_at_precision, write_pr_csv, OperatingPoint, PrCurve};

use crate::error::{Error, Result};
use crate::morphology::{dice, Component, Connectivity};
use crate::volume::Volume;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    pub tau_bin: f64,
    pub d_match_mm: f64,
    pub p_target: f64,
    pub connectivity: Connectivity,
    pub bootstrap_resamples: usize,
    pub bootstrap_seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            tau_bin: 0.10,
            d_match_mm: 1.0,
            p_target: 0.80,
            connectivity: Connectivity::TwentySix,
            bootstrap_resamples: 1000,
            bootstrap_seed: 0,
        }
    }
}

impl EvalSettings {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau_bin) || self.tau_bin == 0.0 {
            return Err(Error::Config(format!("tau_bin must lie in (0, 1], got {}", self.tau_bin)));
        }
        if self.d_match_mm.is_nan() || self.d_match_mm < 0.0 {
            return Err(Error::Config("d_match_mm must be nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&self.p_target) {
            return Err(Error::Config("p_target must lie in [0, 1]".into()));
        }
        if self.bootstrap_resamples == 0 {
            return Err(Error::Config("bootstrap_resamples must be >= 1".into()));
        }
        Ok(())
    }

    /// Whether two runs scored detections the same way and can share a table.
    pub fn comparable(&self, other: &Self) -> bool {
        self.tau_bin == other.tau_bin
            && self.d_match_mm == other.d_match_mm
            && self.p_target == other.p_target
            && self.connectivity == other.connectivity
    }
}

/// Detections of one test patient together with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientEval {
    pub patient_id: String,
    pub lesions: Vec<Component>,
    pub detections: Vec<DetectionRecord>,
}

pub fn evaluate_patient(
    patient_id: &str,
    prob: &Volume,
    lesions: &[Component],
    settings: &EvalSettings,
) -> Result<PatientEval> {
    Ok(PatientEval {
        patient_id: patient_id.to_string(),
        lesions: lesions.to_vec(),
        detections: extract_detections(patient_id, prob, lesions, settings)?,
    })
}

/// Mean DICE of the true positives scoring at least `threshold`; `None`
/// when there are none.
pub fn tp_dice_at_operating_point(
    detections: &[DetectionRecord],
    truth: &BTreeMap<&str, &[Component]>,
    threshold: f64,
) -> Option<f64> {
    let dices: Vec<f64> = detections
        .iter()
        .filter(|d| d.score >= threshold)
        .filter_map(|d| {
            let id = d.matched_lesion?;
            let lesion = truth.get(d.patient_id.as_str())?.iter().find(|l| l.id == id)?;
            Some(dice(&d.component.voxels, &lesion.voxels))
        })
        .collect();
    (!dices.is_empty()).then(|| dices.iter().sum::<f64>() / dices.len() as f64)
}

fn pooled<'a>(patients: impl IntoIterator<Item = &'a PatientEval>) -> (Vec<(f64, bool)>, usize) {
    let mut scored = Vec::new();
    let mut n_gt = 0;
    for p in patients {
        n_gt += p.lesions.len();
        scored.extend(p.detections.iter().map(|d| (d.score, d.is_tp())));
    }
    (scored, n_gt)
}

/// Pooled PR curve without an interval.
pub fn pooled_curve(patients: &[PatientEval]) -> Result<PrCurve> {
    let (scored, n_gt) = pooled(patients);
    pr_curve(&scored, n_gt)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub map: f64,
    pub map_ci95: (f64, f64),
    pub sensitivity_at_p80: f64,
    /// Absent when the operating point has no true positives.
    pub tp_dice_at_p80: Option<f64>,
    pub operating_threshold: Option<f64>,
    pub n_gt: usize,
    pub n_tp: usize,
    pub n_fp: usize,
    pub n_detections: usize,
    pub settings: EvalSettings,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Scores a test set. The precision target is `settings.p_target`; the
/// field names keep the conventional 80% label.
pub fn summarize(patients: &[PatientEval], settings: &EvalSettings) -> Result<(MetricsReport, PrCurve)> {
    settings.validate()?;
    let mut curve = pooled_curve(patients)?;
    let ci = ci95(
        patients,
        |draw: &[&PatientEval]| {
            let (scored, n_gt) = pooled(draw.iter().copied());
            pr_curve(&scored, n_gt).ok().map(|c| c.map)
        },
        settings.bootstrap_resamples,
        settings.bootstrap_seed,
    )?;
    curve.ci95 = Some(ci);

    let op = operating_point_at_precision(&curve, settings.p_target).copied();
    let truth: BTreeMap<&str, &[Component]> =
        patients.iter().map(|p| (p.patient_id.as_str(), p.lesions.as_slice())).collect();
    let all: Vec<DetectionRecord> = patients.iter().flat_map(|p| p.detections.iter().cloned()).collect();
    let report = MetricsReport {
        map: curve.map,
        map_ci95: ci,
        sensitivity_at_p80: op.map_or(0.0, |p| p.recall),
        tp_dice_at_p80: op.and_then(|p| tp_dice_at_operating_point(&all, &truth, p.threshold)),
        operating_threshold: op.map(|p| p.threshold),
        n_gt: curve.n_gt,
        n_tp: op.map_or(0, |p| p.tp),
        n_fp: op.map_or(0, |p| p.fp),
        n_detections: all.len(),
        settings: settings.clone(),
    };
    Ok((report, curve))
}
