//! Per-member training views: lesion censoring, patient subsampling and the
//! hyperparameter grid.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::OptimizerKind;
use crate::seeds::{self, tag};
use crate::synthgen::PatientCase;
use crate::volume::MaskVolume;

pub const DEFAULT_CENSOR_RATE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CensorMode {
    /// All patients, each lesion kept independently with probability `1 − rate`.
    LesionCensor,
    /// A random subset of patients with all of their lesions.
    PatientSubsample,
    /// Everything kept.
    Full,
}

/// What one ensemble member may see during training. Fixed for the whole run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CensorPlan {
    pub member_id: usize,
    pub mode: CensorMode,
    pub rate: f64,
    /// Kept lesion ids per kept patient.
    pub kept_lesions: BTreeMap<String, BTreeSet<u32>>,
    pub kept_patients: BTreeSet<String>,
    pub seed: u64,
}

impl CensorPlan {
    pub fn keeps_patient(&self, id: &str) -> bool {
        self.kept_patients.contains(id)
    }

    pub fn kept_lesion_count(&self) -> usize {
        self.kept_lesions.values().map(BTreeSet::len).sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

fn all_lesions(case: &PatientCase) -> BTreeSet<u32> {
    case.lesions.iter().map(|l| l.id).collect()
}

pub fn full_plan(cases: &[PatientCase], member_id: usize, seed: u64) -> CensorPlan {
    CensorPlan {
        member_id,
        mode: CensorMode::Full,
        rate: 0.0,
        kept_lesions: cases.iter().map(|c| (c.id.clone(), all_lesions(c))).collect(),
        kept_patients: cases.iter().map(|c| c.id.clone()).collect(),
        seed,
    }
}

/// `n` lesion-censoring plans; plan `i` keeps every lesion of every patient
/// independently with probability `1 − rate`.
pub fn make_lesion_plans(cases: &[PatientCase], n: usize, rate: f64, seed: u64) -> Result<Vec<CensorPlan>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("censor rate must lie in [0, 1), got {rate}")));
    }
    Ok((0..n)
        .map(|member_id| {
            let mut rng = seeds::rng(seed, tag::CENSOR, member_id as u64);
            let kept_lesions = cases
                .iter()
                .map(|c| {
                    let kept = c.lesions.iter().filter(|_| rng.random::<f64>() >= rate).map(|l| l.id).collect();
                    (c.id.clone(), kept)
                })
                .collect();
            CensorPlan {
                member_id,
                mode: CensorMode::LesionCensor,
                rate,
                kept_lesions,
                kept_patients: cases.iter().map(|c| c.id.clone()).collect(),
                seed,
            }
        })
        .collect())
}

fn patient_plan(cases: &[PatientCase], member_id: usize, seed: u64, keep: impl Fn(usize) -> bool) -> CensorPlan {
    let kept: Vec<&PatientCase> = cases.iter().enumerate().filter(|(i, _)| keep(*i)).map(|(_, c)| c).collect();
    CensorPlan {
        member_id,
        mode: CensorMode::PatientSubsample,
        rate: 0.5,
        kept_lesions: kept.iter().map(|c| (c.id.clone(), all_lesions(c))).collect(),
        kept_patients: kept.iter().map(|c| c.id.clone()).collect(),
        seed,
    }
}

/// `n` patient-subsampling plans; each patient is kept independently with
/// probability one half.
pub fn make_patient_plans(cases: &[PatientCase], n: usize, seed: u64) -> Result<Vec<CensorPlan>> {
    if cases.is_empty() {
        return Err(Error::Config("patient subsampling needs a nonempty cohort".into()));
    }
    Ok((0..n)
        .map(|member_id| {
            let mut rng = seeds::rng(seed, tag::CENSOR, member_id as u64);
            let flags: Vec<bool> = cases.iter().map(|_| rng.random_bool(0.5)).collect();
            patient_plan(cases, member_id, seed, |i| flags[i])
        })
        .collect())
}

/// Variant of [`make_patient_plans`] that keeps exactly `⌈N/2⌉` patients.
pub fn make_patient_plans_exact_half(cases: &[PatientCase], n: usize, seed: u64) -> Result<Vec<CensorPlan>> {
    if cases.is_empty() {
        return Err(Error::Config("patient subsampling needs a nonempty cohort".into()));
    }
    let half = cases.len().div_ceil(2);
    Ok((0..n)
        .map(|member_id| {
            let mut rng = seeds::rng(seed, tag::CENSOR, member_id as u64);
            let chosen: BTreeSet<usize> = sample(&mut rng, cases.len(), half).into_iter().collect();
            patient_plan(cases, member_id, seed, |i| chosen.contains(&i))
        })
        .collect())
}

/// The annotation mask a member trains on: censored lesions become background.
/// Image channels are never touched.
pub fn apply_plan(plan: &CensorPlan, case: &PatientCase) -> Result<MaskVolume> {
    if !plan.keeps_patient(&case.id) {
        return Err(Error::PatientNotInPlan(case.id.clone()));
    }
    let empty = BTreeSet::new();
    let kept = plan.kept_lesions.get(&case.id).unwrap_or(&empty);
    if let Some(missing) = kept.iter().find(|&&id| case.lesion(id).is_none()) {
        return Err(Error::Config(format!("plan keeps lesion {missing} which {} does not have", case.id)));
    }
    let mut mask = case.truth.clone();
    for lesion in case.lesions.iter().filter(|l| !kept.contains(&l.id)) {
        for &v in &lesion.voxels {
            mask.set_index(v, false);
        }
    }
    Ok(mask)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperparameterPoint {
    pub learning_rate: f64,
    pub l2_lambda: f64,
    pub optimizer: OptimizerKind,
}

impl Default for HyperparameterPoint {
    /// The best grid point reported for the clinical data.
    fn default() -> Self {
        Self { learning_rate: 3e-3, l2_lambda: 1e-2, optimizer: OptimizerKind::Adam }
    }
}

impl HyperparameterPoint {
    pub fn validate(&self) -> Result<()> {
        if !GRID_LEARNING_RATES.contains(&self.learning_rate) || !GRID_L2.contains(&self.l2_lambda) {
            return Err(Error::Config(format!(
                "hyperparameters (lr {}, l2 {}) are not on the grid",
                self.learning_rate, self.l2_lambda
            )));
        }
        Ok(())
    }
}

pub const GRID_LEARNING_RATES: [f64; 5] = [3e-2, 1e-2, 3e-3, 1e-3, 3e-4];
pub const GRID_L2: [f64; 2] = [1e-2, 1e-3];

/// Cartesian product of learning rate × L2 × optimizer, in that nesting order.
pub fn enumerate_grid() -> Vec<HyperparameterPoint> {
    let mut out = Vec::with_capacity(30);
    for &learning_rate in &GRID_LEARNING_RATES {
        for &l2_lambda in &GRID_L2 {
            for optimizer in OptimizerKind::ALL {
                out.push(HyperparameterPoint { learning_rate, l2_lambda, optimizer });
            }
        }
    }
    out
}
