//! Deterministic synthetic cohorts: multi-channel volumes with hyperintense
//! ellipsoid lesions over a smooth structured background.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::morphology::{label_components, Component, Connectivity};
use crate::seeds::{self, tag};
use crate::volume::{self, linear_index, Dims, MaskVolume, Spacing, Volume};

/// Lesion-count stratum of a patient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stratum {
    /// 1–3 lesions
    Low,
    /// 4–10 lesions
    Mid,
    /// more than 10 lesions
    High,
}

impl Stratum {
    pub const ALL: [Stratum; 3] = [Stratum::Low, Stratum::Mid, Stratum::High];

    /// Inclusive lesion-count bounds; `High` is capped by `max_lesions`.
    pub fn bounds(self, max_lesions: usize) -> (usize, usize) {
        match self {
            Stratum::Low => (1, 3),
            Stratum::Mid => (4, 10),
            Stratum::High => (11, max_lesions.max(11)),
        }
    }

    pub fn contains(self, count: usize) -> bool {
        match self {
            Stratum::Low => (1..=3).contains(&count),
            Stratum::Mid => (4..=10).contains(&count),
            Stratum::High => count > 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortSpec {
    pub n_train: usize,
    pub n_test: usize,
    pub dims: Dims,
    pub spacing_mm: Spacing,
    pub channels: usize,
    /// Lesion radius range in mm; radii are drawn log-uniformly.
    pub lesion_radius_mm: [f64; 2],
    /// Upper lesion count for the `high` stratum.
    pub max_lesions: usize,
    /// Peak lesion contrast per channel, in units of the background level.
    pub lesion_contrast: Vec<f64>,
    /// Per-lesion multiplicative contrast jitter range.
    pub lesion_contrast_jitter: [f64; 2],
    /// Non-lesion bright blobs per patient (inclusive range).
    pub distractors: [usize; 2],
    /// Peak distractor contrast per channel.
    pub distractor_contrast: Vec<f64>,
    /// Amplitude of the low-frequency background structure.
    pub background_amplitude: f64,
    /// Standard deviation of i.i.d. Gaussian voxel noise.
    pub noise_scale: f64,
    pub connectivity: Connectivity,
    pub max_placement_attempts: usize,
    /// Voxels of different lesions, and of a lesion and a distractor, are
    /// more than this Chebyshev distance apart. 1 only forbids adjacency.
    pub min_separation_vox: usize,
    pub seed: u64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        Self {
            n_train: 40,
            n_test: 21,
            dims: [64, 64, 16],
            spacing_mm: [1.0, 1.0, 1.0],
            channels: 4,
            lesion_radius_mm: [1.0, 6.0],
            max_lesions: 14,
            lesion_contrast: vec![1.0, 0.7, 0.85, 0.5],
            lesion_contrast_jitter: [0.35, 1.3],
            distractors: [2, 6],
            distractor_contrast: vec![0.9, 0.0, 0.7, 0.0],
            background_amplitude: 0.25,
            noise_scale: 0.35,
            connectivity: Connectivity::TwentySix,
            max_placement_attempts: 2000,
            min_separation_vox: 4,
            seed: 7,
        }
    }
}

impl CohortSpec {
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if !self.n_test.is_multiple_of(3) {
            return cfg(format!("n_test must be divisible by 3, got {}", self.n_test));
        }
        if self.dims.iter().any(|&d| d < 3) {
            return cfg(format!("dims must all be >= 3, got {:?}", self.dims));
        }
        if self.spacing_mm.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return cfg("spacing must be strictly positive".into());
        }
        if self.channels == 0 {
            return cfg("need at least one channel".into());
        }
        if self.lesion_contrast.len() != self.channels || self.distractor_contrast.len() != self.channels {
            return cfg(format!("contrast vectors must have {} entries", self.channels));
        }
        let [lo, hi] = self.lesion_radius_mm;
        if !(lo > 0.0 && hi >= lo) {
            return cfg(format!("bad lesion radius range {:?}", self.lesion_radius_mm));
        }
        let [jlo, jhi] = self.lesion_contrast_jitter;
        if !(jlo > 0.0 && jhi >= jlo) {
            return cfg("bad contrast jitter range".into());
        }
        if self.distractors[0] > self.distractors[1] {
            return cfg("bad distractor range".into());
        }
        if self.noise_scale < 0.0 || self.background_amplitude < 0.0 {
            return cfg("noise and background amplitude must be nonnegative".into());
        }
        if self.min_separation_vox == 0 {
            return cfg("min_separation_vox must be >= 1 so lesions stay separate components".into());
        }
        if self.max_lesions < 11 {
            return cfg("max_lesions must be >= 11 so the high stratum is nonempty".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatientCase {
    pub id: String,
    pub image: Volume,
    pub truth: MaskVolume,
    /// Ground-truth lesions, i.e. the connected components of `truth`.
    pub lesions: Vec<Component>,
    pub stratum: Stratum,
}

impl PatientCase {
    pub fn lesion(&self, id: u32) -> Option<&Component> {
        self.lesions.iter().find(|l| l.id == id)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub spec: CohortSpec,
    pub train: Vec<PatientCase>,
    pub test: Vec<PatientCase>,
}

pub fn total_lesion_count(cases: &[PatientCase]) -> usize {
    cases.iter().map(|c| c.lesions.len()).sum()
}

/// Baseline background intensity before structure, lesions and noise.
const BACKGROUND_LEVEL: f64 = 1.0;

/// Normalized-radius width of the Gaussian lesion profile.
const FALLOFF_SIGMA: f64 = 0.7;

struct Ellipsoid {
    center: [f64; 3],
    radii_vox: [f64; 3],
}

impl Ellipsoid {
    /// Squared normalized distance from the centre of voxel `(x,y,z)`.
    fn norm2(&self, x: usize, y: usize, z: usize) -> f64 {
        let p = [x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5];
        (0..3).map(|a| ((p[a] - self.center[a]) / self.radii_vox[a]).powi(2)).sum()
    }

    fn bbox(&self, dims: Dims, scale: f64) -> [(usize, usize); 3] {
        std::array::from_fn(|a| {
            let r = self.radii_vox[a] * scale;
            let lo = (self.center[a] - r).floor().max(0.0) as usize;
            let hi = ((self.center[a] + r).ceil() as usize).min(dims[a] - 1);
            (lo, hi)
        })
    }

    fn voxels(&self, dims: Dims) -> Vec<usize> {
        let mut out = Vec::new();
        let [bx, by, bz] = self.bbox(dims, 1.0);
        for z in bz.0..=bz.1 {
            for y in by.0..=by.1 {
                for x in bx.0..=bx.1 {
                    if self.norm2(x, y, z) <= 1.0 {
                        out.push(linear_index(dims, x, y, z));
                    }
                }
            }
        }
        out
    }

    fn add_profile(&self, plane: &mut [f32], dims: Dims, amplitude: f64) {
        let [bx, by, bz] = self.bbox(dims, 3.0);
        let two_s2 = 2.0 * FALLOFF_SIGMA * FALLOFF_SIGMA;
        for z in bz.0..=bz.1 {
            for y in by.0..=by.1 {
                for x in bx.0..=bx.1 {
                    let d2 = self.norm2(x, y, z);
                    plane[linear_index(dims, x, y, z)] += (amplitude * (-d2 / two_s2).exp()) as f32;
                }
            }
        }
    }
}

fn sample_ellipsoid(rng: &mut ChaCha8Rng, spec: &CohortSpec) -> Option<Ellipsoid> {
    let [lo, hi] = spec.lesion_radius_mm;
    let r_mm = (lo.ln() + rng.random::<f64>() * (hi.ln() - lo.ln())).exp();
    let mut radii_vox = [0.0; 3];
    let mut center = [0.0; 3];
    for a in 0..3 {
        let aspect: f64 = rng.random_range(0.8..1.25);
        let r = (r_mm * aspect / spec.spacing_mm[a]).max(1.0);
        radii_vox[a] = r;
        // voxels at index <= c - r are outside, so keep one free voxel on each side
        let margin = r.floor() as usize + 1;
        let dim = spec.dims[a];
        if 2 * margin >= dim {
            return None;
        }
        let c = rng.random_range(margin..dim - margin);
        center[a] = c as f64 + 0.5;
    }
    Some(Ellipsoid { center, radii_vox })
}

/// Sets every voxel within Chebyshev distance `r` of `vox`.
fn dilate_into(mask: &mut MaskVolume, vox: &[usize], r: usize) {
    let dims = mask.dims();
    for &i in vox {
        let [x, y, z] = volume::coords_of(dims, i);
        for zz in z.saturating_sub(r)..=(z + r).min(dims[2] - 1) {
            for yy in y.saturating_sub(r)..=(y + r).min(dims[1] - 1) {
                for xx in x.saturating_sub(r)..=(x + r).min(dims[0] - 1) {
                    mask.set(xx, yy, zz, true);
                }
            }
        }
    }
}

fn touches_boundary(dims: Dims, vox: &[usize]) -> bool {
    vox.iter().any(|&i| {
        let c = volume::coords_of(dims, i);
        (0..3).any(|a| c[a] == 0 || c[a] + 1 == dims[a])
    })
}

fn place(
    rng: &mut ChaCha8Rng,
    spec: &CohortSpec,
    count: usize,
    keepout: &mut MaskVolume,
    mark: bool,
) -> Result<Vec<Ellipsoid>> {
    let mut placed = Vec::with_capacity(count);
    for _ in 0..count {
        let mut ok = false;
        for _ in 0..spec.max_placement_attempts {
            let Some(e) = sample_ellipsoid(rng, spec) else { continue };
            let vox = e.voxels(spec.dims);
            if vox.is_empty() || touches_boundary(spec.dims, &vox) || vox.iter().any(|&i| keepout.voxels()[i] != 0) {
                continue;
            }
            if mark {
                dilate_into(keepout, &vox, spec.min_separation_vox);
            }
            placed.push(e);
            ok = true;
            break;
        }
        if !ok {
            return Err(Error::Placement(format!(
                "placed {} of {count} blobs in {:?} after {} attempts each",
                placed.len(),
                spec.dims,
                spec.max_placement_attempts
            )));
        }
    }
    Ok(placed)
}

struct Wave {
    freq: [f64; 3],
    phase: f64,
    amp: f64,
}

fn background(rng: &mut ChaCha8Rng, spec: &CohortSpec, channel_plane: &mut [f32]) {
    let dims = spec.dims;
    let waves: Vec<Wave> = (0..3)
        .map(|_| Wave {
            freq: std::array::from_fn(|a| rng.random_range(0.5..2.0) * std::f64::consts::TAU / dims[a] as f64),
            phase: rng.random_range(0.0..std::f64::consts::TAU),
            amp: spec.background_amplitude * rng.random_range(0.5..1.0),
        })
        .collect();
    let noise = Normal::new(0.0, spec.noise_scale.max(f64::MIN_POSITIVE)).unwrap();
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let p = [x as f64, y as f64, z as f64];
                let structure: f64 = waves
                    .iter()
                    .map(|w| w.amp * (w.freq[0] * p[0] + w.freq[1] * p[1] + w.freq[2] * p[2] + w.phase).cos())
                    .sum();
                let eps = if spec.noise_scale > 0.0 { noise.sample(rng) } else { 0.0 };
                channel_plane[linear_index(dims, x, y, z)] = (BACKGROUND_LEVEL + structure + eps) as f32;
            }
        }
    }
}

fn generate_patient(spec: &CohortSpec, id: String, stratum: Stratum, mut rng: ChaCha8Rng) -> Result<PatientCase> {
    let (lo, hi) = stratum.bounds(spec.max_lesions);
    let count = rng.random_range(lo..=hi);
    let mut keepout = MaskVolume::zeros(spec.dims, spec.spacing_mm)?;
    let lesions = place(&mut rng, spec, count, &mut keepout, true)?;
    let n_distract = rng.random_range(spec.distractors[0]..=spec.distractors[1]);
    // distractors may overlap each other but keep their distance from lesions
    let distractors = place(&mut rng, spec, n_distract, &mut keepout, false)?;
    let mut truth = MaskVolume::zeros(spec.dims, spec.spacing_mm)?;
    for e in &lesions {
        for i in e.voxels(spec.dims) {
            truth.set_index(i, true);
        }
    }

    let mut image = Volume::zeros(spec.dims, spec.channels, spec.spacing_mm)?;
    for c in 0..spec.channels {
        background(&mut rng, spec, image.channel_mut(c));
    }
    let [jlo, jhi] = spec.lesion_contrast_jitter;
    for e in &lesions {
        let jitter = rng.random_range(jlo..=jhi);
        for c in 0..spec.channels {
            e.add_profile(image.channel_mut(c), spec.dims, spec.lesion_contrast[c] * jitter);
        }
    }
    for e in &distractors {
        let jitter = rng.random_range(jlo..=jhi);
        for c in 0..spec.channels {
            e.add_profile(image.channel_mut(c), spec.dims, spec.distractor_contrast[c] * jitter);
        }
    }
    let lesions = label_components(&truth, spec.connectivity);
    debug_assert_eq!(lesions.len(), count);
    Ok(PatientCase { id, image, truth, lesions, stratum })
}

/// Generates the train and test cohorts. Test strata are exactly balanced;
/// training strata are drawn uniformly.
pub fn generate_cohort(spec: &CohortSpec) -> Result<Cohort> {
    spec.validate()?;
    let train = (0..spec.n_train)
        .map(|i| {
            let mut rng = seeds::rng(spec.seed, tag::TRAIN_PATIENT, i as u64);
            let stratum = Stratum::ALL[rng.random_range(0..3)];
            generate_patient(spec, format!("train-{i:03}"), stratum, rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let per = spec.n_test / 3;
    let test = (0..spec.n_test)
        .map(|i| {
            let rng = seeds::rng(spec.seed, tag::TEST_PATIENT, i as u64);
            generate_patient(spec, format!("test-{i:03}"), Stratum::ALL[i / per.max(1)], rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Cohort { spec: spec.clone(), train, test })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CohortManifest {
    pub spec: CohortSpec,
    pub train: Vec<ManifestEntry>,
    pub test: Vec<ManifestEntry>,
    pub total_train_lesions: usize,
    pub total_test_lesions: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub stratum: Stratum,
    pub lesions: usize,
    pub image: String,
    pub truth: String,
}

pub const COHORT_MANIFEST: &str = "cohort.json";

/// Writes every patient as a pair of RBV files plus a JSON manifest.
pub fn save_cohort(dir: &Path, cohort: &Cohort) -> Result<CohortManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write_split = |cases: &[PatientCase]| -> Result<Vec<ManifestEntry>> {
        cases
            .iter()
            .map(|c| {
                let image = format!("{}_image.rbv", c.id);
                let truth = format!("{}_truth.rbv", c.id);
                volume::write_volume(&dir.join(&image), &c.image)?;
                volume::write_mask(&dir.join(&truth), &c.truth)?;
                Ok(ManifestEntry { id: c.id.clone(), stratum: c.stratum, lesions: c.lesions.len(), image, truth })
            })
            .collect()
    };
    let manifest = CohortManifest {
        spec: cohort.spec.clone(),
        train: write_split(&cohort.train)?,
        test: write_split(&cohort.test)?,
        total_train_lesions: total_lesion_count(&cohort.train),
        total_test_lesions: total_lesion_count(&cohort.test),
    };
    let path = dir.join(COHORT_MANIFEST);
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn load_cohort(dir: &Path) -> Result<Cohort> {
    let path = dir.join(COHORT_MANIFEST);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CohortManifest = serde_json::from_slice(&bytes).map_err(|e| Error::format(&path, e.to_string()))?;
    let conn = manifest.spec.connectivity;
    let read_split = |entries: &[ManifestEntry]| -> Result<Vec<PatientCase>> {
        entries
            .iter()
            .map(|e| {
                let image = volume::read_volume(&dir.join(&e.image))?;
                let truth = volume::read_mask(&dir.join(&e.truth))?;
                let lesions = label_components(&truth, conn);
                if lesions.len() != e.lesions {
                    return Err(Error::format(
                        dir.join(&e.truth),
                        format!("manifest lists {} lesions, mask has {}", e.lesions, lesions.len()),
                    ));
                }
                Ok(PatientCase { id: e.id.clone(), image, truth, lesions, stratum: e.stratum })
            })
            .collect()
    };
    Ok(Cohort { spec: manifest.spec.clone(), train: read_split(&manifest.train)?, test: read_split(&manifest.test)? })
}
