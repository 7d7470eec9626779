use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    /// Detections with score ≥ threshold are counted.
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub tp: usize,
    pub fp: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    /// In order of decreasing threshold.
    pub points: Vec<OperatingPoint>,
    pub n_gt: usize,
    pub map: f64,
    pub ci95: Option<(f64, f64)>,
}

/// Sweeps the threshold over the distinct scores, highest first. Tied scores
/// enter together.
pub fn pr_curve(scored: &[(f64, bool)], n_gt: usize) -> Result<PrCurve> {
    if n_gt == 0 {
        return Err(Error::NoGroundTruth);
    }
    let mut sorted = scored.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let threshold = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == threshold {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(OperatingPoint {
            threshold,
            precision: tp as f64 / (tp + fp) as f64,
            recall: tp as f64 / n_gt as f64,
            tp,
            fp,
        });
    }
    let map = interpolated_ap(&points, n_gt);
    Ok(PrCurve { points, n_gt, map, ci95: None })
}

/// Area under the precision envelope. Points arrive in decreasing threshold,
/// so recall is nondecreasing; the envelope is a suffix maximum.
fn interpolated_ap(points: &[OperatingPoint], n_gt: usize) -> f64 {
    let mut envelope = vec![0.0; points.len()];
    let mut best: f64 = 0.0;
    for (k, p) in points.iter().enumerate().rev() {
        best = best.max(p.precision);
        envelope[k] = best;
    }
    // recall steps are whole true positives; divide once at the end
    let mut ap = 0.0;
    let mut prev_tp = 0;
    for (p, env) in points.iter().zip(&envelope) {
        ap += (p.tp - prev_tp) as f64 * env;
        prev_tp = p.tp;
    }
    ap / n_gt as f64
}

/// The operating point with the highest recall among those reaching
/// `p_target` precision. Ties go to the higher threshold.
pub fn operating_point_at_precision(curve: &PrCurve, p_target: f64) -> Option<&OperatingPoint> {
    curve.points.iter().filter(|p| p.precision >= p_target).fold(None, |best: Option<&OperatingPoint>, p| match best {
        Some(b) if b.recall >= p.recall => Some(b),
        _ => Some(p),
    })
}

pub fn sensitivity_at_precision(curve: &PrCurve, p_target: f64) -> f64 {
    operating_point_at_precision(curve, p_target).map_or(0.0, |p| p.recall)
}

pub fn write_pr_csv(curve: &PrCurve) -> String {
    let mut out = String::from("threshold,precision,recall\n");
    for p in &curve.points {
        out.push_str(&format!("{},{},{}\n", p.threshold, p.precision, p.recall));
    }
    out
}
