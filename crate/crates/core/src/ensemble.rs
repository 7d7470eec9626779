//! Bundles of independently trained networks and their fused prediction.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::censor::{self, enumerate_grid, CensorPlan, HyperparameterPoint, DEFAULT_CENSOR_RATE};
use crate::error::{Error, Result};
use crate::neural::checkpoint::{load_checkpoint, save_checkpoint};
use crate::neural::input::{input_stack, standardize};
use crate::neural::train::{train, ViewCase};
use crate::neural::{ArchSpec, LossConfig, NetworkModel, Tensor, TrainSchedule, TrainingView};
use crate::seeds::{self, tag};
use crate::synthgen::PatientCase;
use crate::volume::Volume;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Full data, one member per grid point.
    Hyperparameter,
    PatientSubsample,
    /// Random Bundle: full images, independently censored lesion labels.
    LesionCensor,
    Single,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Hyperparameter => "hyperparameter",
            Strategy::PatientSubsample => "patient_subsample",
            Strategy::LesionCensor => "lesion_censor",
            Strategy::Single => "single",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    #[default]
    Mean,
    /// Fraction of members with foreground probability ≥ 0.5.
    MajorityVote,
    Max,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Member {
    pub model: NetworkModel,
    pub plan: CensorPlan,
    pub hp: HyperparameterPoint,
    pub sampling_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bundle {
    pub strategy: Strategy,
    pub seed: u64,
    /// Sorted by `plan.member_id`.
    pub members: Vec<Member>,
}

impl Bundle {
    pub fn n(&self) -> usize {
        self.members.len()
    }

    /// Members whose ids are listed, in id order.
    pub fn subset(&self, ids: &[usize]) -> Result<Bundle> {
        let mut members = Vec::with_capacity(ids.len());
        for &id in ids {
            let m = self
                .members
                .iter()
                .find(|m| m.plan.member_id == id)
                .ok_or_else(|| Error::Config(format!("bundle has no member {id}")))?;
            members.push(m.clone());
        }
        members.sort_by_key(|m| m.plan.member_id);
        if members.windows(2).any(|w| w[0].plan.member_id == w[1].plan.member_id) {
            return Err(Error::Config("member subset lists an id twice".into()));
        }
        Ok(Bundle { strategy: self.strategy, seed: self.seed, members })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleConfig {
    pub strategy: Strategy,
    pub n: usize,
    pub seed: u64,
    pub arch: ArchSpec,
    /// Used by every strategy except `Hyperparameter`.
    pub hp: HyperparameterPoint,
    pub loss: LossConfig,
    pub schedule: TrainSchedule,
    pub censor_rate: f64,
}

impl BundleConfig {
    pub fn new(strategy: Strategy, n: usize, seed: u64, arch: ArchSpec) -> Self {
        Self {
            strategy,
            n,
            seed,
            arch,
            hp: HyperparameterPoint::default(),
            loss: LossConfig::default(),
            schedule: TrainSchedule::default(),
            censor_rate: DEFAULT_CENSOR_RATE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("a bundle needs at least one member".into()));
        }
        if self.strategy == Strategy::Single && self.n != 1 {
            return Err(Error::Config(format!("strategy single takes exactly one member, got {}", self.n)));
        }
        let grid = enumerate_grid().len();
        if self.strategy == Strategy::Hyperparameter && self.n > grid {
            return Err(Error::Config(format!("hyperparameter bundle limited to {grid} members, got {}", self.n)));
        }
        self.arch.validate()?;
        self.loss.validate()?;
        self.hp.validate()?;
        self.schedule.validate()
    }
}

/// Training plans for the `n` members, one per member id.
pub fn member_plans(train_cases: &[PatientCase], cfg: &BundleConfig) -> Result<Vec<CensorPlan>> {
    let seed = seeds::derive(cfg.seed, tag::CENSOR, 0);
    match cfg.strategy {
        Strategy::LesionCensor => censor::make_lesion_plans(train_cases, cfg.n, cfg.censor_rate, seed),
        Strategy::PatientSubsample => censor::make_patient_plans(train_cases, cfg.n, seed),
        Strategy::Hyperparameter | Strategy::Single => {
            Ok((0..cfg.n).map(|i| censor::full_plan(train_cases, i, seed)).collect())
        }
    }
}

/// The labels member `plan` is allowed to see. Only patients in the plan appear.
pub fn training_view<'a>(train_cases: &'a [PatientCase], plan: &CensorPlan) -> Result<TrainingView<'a>> {
    let cases = train_cases
        .iter()
        .filter(|c| plan.keeps_patient(&c.id))
        .map(|c| Ok(ViewCase { patient_id: &c.id, image: &c.image, labels: censor::apply_plan(plan, c)? }))
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainingView { cases })
}

/// Trains every member, in parallel across members. Member `i` is seeded from
/// `(cfg.seed, i)` alone, so results do not depend on the worker count.
pub fn train_bundle(train_cases: &[PatientCase], cfg: &BundleConfig) -> Result<Bundle> {
    cfg.validate()?;
    let plans = member_plans(train_cases, cfg)?;
    let grid = enumerate_grid();
    let members = plans
        .into_par_iter()
        .map(|plan| {
            let id = plan.member_id;
            let hp = if cfg.strategy == Strategy::Hyperparameter { grid[id] } else { cfg.hp };
            let init_seed = seeds::derive(cfg.seed, tag::INIT, id as u64);
            let sampling_seed = seeds::derive(cfg.seed, tag::SAMPLING, id as u64);
            let run = || -> Result<Member> {
                let view = training_view(train_cases, &plan)?;
                let model = NetworkModel::new(cfg.arch, init_seed)?;
                let schedule = TrainSchedule { sampling_seed, ..cfg.schedule.clone() };
                let outcome = train(model, &view, &hp, &cfg.loss, &schedule)?;
                Ok(Member { model: outcome.model, plan: plan.clone(), hp, sampling_seed })
            };
            run().map_err(|e| e.in_member(id))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Bundle { strategy: cfg.strategy, seed: cfg.seed, members })
}

/// Sum in a fixed binary tree over the slice order.
fn pairwise_sum(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        n => pairwise_sum(&xs[..n / 2]) + pairwise_sum(&xs[n / 2..]),
    }
}

/// Fuses per-member foreground maps given in member-id order.
pub fn fuse(maps: &[Vec<f32>], fusion: Fusion) -> Result<Vec<f32>> {
    let Some(first) = maps.first() else {
        return Err(Error::Config("nothing to fuse".into()));
    };
    let len = first.len();
    if maps.iter().any(|m| m.len() != len) {
        return Err(Error::Shape("member maps differ in size".into()));
    }
    let n = maps.len();
    let mut column = vec![0.0f64; n];
    Ok((0..len)
        .map(|v| {
            for (slot, m) in column.iter_mut().zip(maps) {
                *slot = m[v] as f64;
            }
            let fused = match fusion {
                Fusion::Mean => pairwise_sum(&column) / n as f64,
                Fusion::MajorityVote => column.iter().filter(|&&p| p >= 0.5).count() as f64 / n as f64,
                Fusion::Max => column.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            };
            fused as f32
        })
        .collect())
}

/// Replicates edge pixels so both in-plane sizes become multiples of `m`.
fn pad_to_multiple(x: &Tensor<f32>, m: usize) -> Tensor<f32> {
    let (c, h, w) = x.shape();
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    if (ph, pw) == (h, w) {
        return x.clone();
    }
    let mut out = Tensor::zeros(c, ph, pw);
    for ch in 0..c {
        for y in 0..ph {
            for xx in 0..pw {
                out.data[(ch * ph + y) * pw + xx] = x.data[(ch * h + y.min(h - 1)) * w + xx.min(w - 1)];
            }
        }
    }
    out
}

fn member_slice(model: &NetworkModel, x: &Tensor<f32>, h: usize, w: usize) -> Result<Vec<f32>> {
    let padded = pad_to_multiple(x, model.arch.spatial_multiple());
    let probs = model.forward(&padded)?;
    let (_, _, pw) = probs.shape();
    let fg = &probs.data[probs.plane()..];
    Ok((0..h).flat_map(|y| fg[y * pw..y * pw + w].iter().copied()).collect())
}

/// Each member's foreground probability volume, in member-id order.
pub fn predict_members(bundle: &Bundle, image: &Volume, z_slices: usize) -> Result<Vec<Volume>> {
    if bundle.members.is_empty() {
        return Err(Error::Config("bundle has no members".into()));
    }
    let mut order: Vec<&Member> = bundle.members.iter().collect();
    order.sort_by_key(|m| m.plan.member_id);
    let want = image.channels() * z_slices;
    if let Some(m) = order.iter().find(|m| m.model.arch.in_channels != want) {
        return Err(Error::Shape(format!(
            "member {} expects {} input channels, image gives {want}",
            m.plan.member_id, m.model.arch.in_channels
        )));
    }
    let [nx, ny, nz] = image.dims();
    let image = standardize(image);
    let stacks = (0..nz).map(|z| input_stack(&image, z, z_slices)).collect::<Result<Vec<_>>>()?;
    order
        .par_iter()
        .map(|m| {
            let run = || -> Result<Volume> {
                let mut out = Volume::zeros(image.dims(), 1, image.spacing_mm())?;
                for (z, x) in stacks.iter().enumerate() {
                    out.plane_mut(0, z).copy_from_slice(&member_slice(&m.model, x, ny, nx)?);
                }
                Ok(out)
            };
            run().map_err(|e| e.in_member(m.plan.member_id))
        })
        .collect()
}

/// Fuses single-channel probability volumes given in member-id order.
pub fn fuse_volumes(maps: &[&Volume], fusion: Fusion) -> Result<Volume> {
    let Some(first) = maps.first() else {
        return Err(Error::Config("nothing to fuse".into()));
    };
    if maps.iter().any(|m| m.dims() != first.dims() || m.channels() != 1) {
        return Err(Error::Shape("member volumes differ in shape".into()));
    }
    let data: Vec<Vec<f32>> = maps.iter().map(|m| m.data().to_vec()).collect();
    Volume::from_data(first.dims(), 1, first.spacing_mm(), fuse(&data, fusion)?)
}

/// Foreground probability per voxel, one channel, fused across members.
pub fn predict_volume(bundle: &Bundle, image: &Volume, z_slices: usize, fusion: Fusion) -> Result<Volume> {
    let maps = predict_members(bundle, image, z_slices)?;
    fuse_volumes(&maps.iter().collect::<Vec<_>>(), fusion)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BundleManifest {
    format_version: u32,
    strategy: Strategy,
    seed: u64,
    n: usize,
    members: Vec<ManifestMember>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestMember {
    member_id: usize,
    checkpoint: String,
    plan: String,
    hp: HyperparameterPoint,
    sampling_seed: u64,
}

pub const BUNDLE_MANIFEST: &str = "bundle.json";

pub fn save_bundle(dir: &Path, bundle: &Bundle) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut members = Vec::with_capacity(bundle.n());
    for m in &bundle.members {
        let id = m.plan.member_id;
        let checkpoint = format!("member-{id:03}.ckpt");
        let plan = format!("member-{id:03}.plan.json");
        save_checkpoint(&dir.join(&checkpoint), &m.model).map_err(|e| e.in_member(id))?;
        let plan_path = dir.join(&plan);
        fs::write(&plan_path, m.plan.to_json()).map_err(|e| Error::io(&plan_path, e).in_member(id))?;
        members.push(ManifestMember { member_id: id, checkpoint, plan, hp: m.hp, sampling_seed: m.sampling_seed });
    }
    let manifest =
        BundleManifest { format_version: 1, strategy: bundle.strategy, seed: bundle.seed, n: bundle.n(), members };
    let path = dir.join(BUNDLE_MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(&manifest).expect("manifest serializes"))
        .map_err(|e| Error::io(&path, e))
}

pub fn load_bundle(dir: &Path) -> Result<Bundle> {
    let path = dir.join(BUNDLE_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: BundleManifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&path, format!("bad bundle manifest: {e}")))?;
    if manifest.format_version != 1 {
        return Err(Error::format(&path, format!("unsupported format version {}", manifest.format_version)));
    }
    if manifest.n != manifest.members.len() || manifest.n == 0 {
        return Err(Error::format(
            &path,
            format!("manifest lists {} members, declares {}", manifest.members.len(), manifest.n),
        ));
    }
    let mut members = Vec::with_capacity(manifest.n);
    for entry in &manifest.members {
        let id = entry.member_id;
        let load = || -> Result<Member> {
            let model = load_checkpoint(&dir.join(&entry.checkpoint))?;
            let plan_path = dir.join(&entry.plan);
            let text = fs::read_to_string(&plan_path).map_err(|e| Error::io(&plan_path, e))?;
            let plan = CensorPlan::from_json(&text).map_err(|e| Error::format(&plan_path, e.to_string()))?;
            if plan.member_id != id {
                return Err(Error::format(&plan_path, format!("plan belongs to member {}", plan.member_id)));
            }
            Ok(Member { model, plan, hp: entry.hp, sampling_seed: entry.sampling_seed })
        };
        members.push(load().map_err(|e| e.in_member(id))?);
    }
    members.sort_by_key(|m| m.plan.member_id);
    Ok(Bundle { strategy: manifest.strategy, seed: manifest.seed, members })
}
