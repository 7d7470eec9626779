use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::morphology::{centroid_to_voxels_distance, label_components, Component, Connectivity};
use crate::volume::{MaskVolume, Volume};

use super::EvalSettings;

/// A connected component of the binarized prediction, with its score and
/// (if it is a true positive) the ground-truth lesion it claimed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub patient_id: String,
    pub component: Component,
    /// Mean predicted probability over the component's voxels.
    pub score: f64,
    pub matched_lesion: Option<u32>,
}

impl DetectionRecord {
    pub fn is_tp(&self) -> bool {
        self.matched_lesion.is_some()
    }
}

pub fn binarize(prob: &Volume, threshold: f64) -> Result<MaskVolume> {
    if prob.channels() != 1 {
        return Err(Error::Shape(format!("probability map must have 1 channel, has {}", prob.channels())));
    }
    let voxels = prob.data().iter().map(|&p| (p as f64 >= threshold) as u8).collect();
    MaskVolume::from_voxels(prob.dims(), prob.spacing_mm(), voxels)
}

/// Lower bound on the distance from `c` to any voxel centre of `lesion`,
/// from its bounding box. Lets most CC-lesion pairs skip the exact scan.
fn bbox_lower_bound(c: [f64; 3], lesion: &Component, prob: &Volume) -> f64 {
    let dims = prob.dims();
    let sp = prob.spacing_mm();
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    for &v in &lesion.voxels {
        let p = crate::volume::coords_of(dims, v);
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let mut d2 = 0.0;
    for a in 0..3 {
        let min_c = (lo[a] as f64 + 0.5) * sp[a];
        let max_c = (hi[a] as f64 + 0.5) * sp[a];
        let gap = if c[a] < min_c {
            min_c - c[a]
        } else if c[a] > max_c {
            c[a] - max_c
        } else {
            0.0
        };
        d2 += gap * gap;
    }
    d2.sqrt()
}

/// Scores every component of the binarized map and matches it one-to-one
/// against ground truth, highest score first. A component is a candidate
/// for a lesion when its centroid lies within `d_match_mm` of one of the
/// lesion's voxel centres; it claims the nearest unclaimed candidate.
pub fn extract_detections(
    patient_id: &str,
    prob: &Volume,
    lesions: &[Component],
    settings: &EvalSettings,
) -> Result<Vec<DetectionRecord>> {
    let mask = binarize(prob, settings.tau_bin)?;
    let probs = prob.data();
    let mut records: Vec<DetectionRecord> = label_components(&mask, settings.connectivity)
        .into_iter()
        .map(|component| {
            let sum: f64 = component.voxels.iter().map(|&v| probs[v] as f64).sum();
            let score = sum / component.voxels.len() as f64;
            DetectionRecord { patient_id: patient_id.to_string(), component, score, matched_lesion: None }
        })
        .collect();

    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| records[b].score.total_cmp(&records[a].score).then(a.cmp(&b)));
    let mut claimed = vec![false; lesions.len()];
    for i in order {
        let c = records[i].component.centroid_mm;
        let mut best: Option<(f64, usize)> = None;
        for (li, lesion) in lesions.iter().enumerate() {
            if claimed[li] || bbox_lower_bound(c, lesion, prob) > settings.d_match_mm {
                continue;
            }
            let d = centroid_to_voxels_distance(c, &lesion.voxels, prob.dims(), prob.spacing_mm())?;
            if d <= settings.d_match_mm && best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, li));
            }
        }
        if let Some((_, li)) = best {
            claimed[li] = true;
            records[i].matched_lesion = Some(lesions[li].id);
        }
    }
    Ok(records)
}

/// Connectivity-aware wrapper used by callers that only hold a mask of the truth.
pub fn lesions_of(truth: &MaskVolume, connectivity: Connectivity) -> Vec<Component> {
    label_components(truth, connectivity)
}
