use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::seeds::{self, tag};

/// Redraw budget per resample when the metric is undefined on a draw.
pub const MAX_REDRAWS: usize = 100;

/// Percentile-bootstrap 95% interval of `metric` over resamples of `units`
/// (drawn with replacement, same size as the original set). Resample `r`
/// uses its own derived RNG, so the result does not depend on the thread
/// count.
pub fn ci95<P, F>(units: &[P], metric: F, resamples: usize, seed: u64) -> Result<(f64, f64)>
where
    P: Sync,
    F: Fn(&[&P]) -> Option<f64> + Sync,
{
    if units.len() < 2 {
        return Err(Error::Config(format!("bootstrap needs at least 2 patients, got {}", units.len())));
    }
    if resamples == 0 {
        return Err(Error::Config("bootstrap needs at least one resample".into()));
    }
    let values: Vec<Option<f64>> = (0..resamples)
        .into_par_iter()
        .map(|r| {
            let mut rng = seeds::rng(seed, tag::BOOTSTRAP, r as u64);
            (0..MAX_REDRAWS).find_map(|_| {
                let draw: Vec<&P> = (0..units.len()).map(|_| &units[rng.random_range(0..units.len())]).collect();
                metric(&draw)
            })
        })
        .collect();
    let mut values: Vec<f64> = values.into_iter().flatten().collect();
    if values.is_empty() {
        return Err(Error::NoGroundTruth);
    }
    values.sort_by(f64::total_cmp);
    Ok((percentile(&values, 2.5), percentile(&values, 97.5)))
}

/// Linear interpolation between order statistics.
pub fn percentile(sorted: &[f64], pct: f64) -> f64 {
    let pos = pct / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}
