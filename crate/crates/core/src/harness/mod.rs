//! Experiment configuration, runners and run reports.

mod report;
mod run;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use report::{cmd_report, read_run_report, Comparison, ComparisonRow};
pub use run::{cmd_gen, cmd_run, cmd_wrn_study, predict_file, subset_ids, RUN_REPORT_FILE};

use crate::censor::{HyperparameterPoint, DEFAULT_CENSOR_RATE};
use crate::ensemble::{Fusion, Strategy};
use crate::error::{Error, Result};
use crate::eval::{EvalSettings, MetricsReport};
use crate::neural::{ArchSpec, LossConfig, TrainSchedule};
use crate::synthgen::CohortSpec;

pub const SCHEMA_VERSION: u32 = 1;

/// Accepted band for count(k_base) / count(k_member), relative to (k_base/k_member)².
pub const PARAM_RATIO_TOLERANCE: f64 = 0.10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WrnStudyConfig {
    pub baseline_width: f64,
    pub member_width: f64,
    pub blocks_per_stage: usize,
    pub member_counts: Vec<usize>,
}

impl Default for WrnStudyConfig {
    fn default() -> Self {
        Self { baseline_width: 2.0, member_width: 0.5, blocks_per_stage: 3, member_counts: vec![1, 2, 4, 8, 16] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    /// Drives censor plans, initialization, sampling, subsets and bootstrap.
    pub seed: u64,
    pub cohort: CohortSpec,
    /// Read the cohort from here instead of generating it.
    pub cohort_dir: Option<PathBuf>,
    pub strategies: Vec<Strategy>,
    pub member_counts: Vec<usize>,
    pub arch: ArchSpec,
    pub loss: LossConfig,
    pub hp: HyperparameterPoint,
    pub schedule: TrainSchedule,
    pub censor_rate: f64,
    pub fusion: Fusion,
    pub wrn: WrnStudyConfig,
    pub eval: EvalSettings,
    /// Not part of the config hash.
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let cohort = CohortSpec::default();
        let schedule = TrainSchedule { steps: 1500, ..TrainSchedule::default() };
        // the most stable grid learning rate at this scale; see README
        let hp = HyperparameterPoint { learning_rate: 1e-3, ..HyperparameterPoint::default() };
        let in_channels = cohort.channels * schedule.z_slices;
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 1,
            cohort,
            cohort_dir: None,
            strategies: vec![Strategy::Single, Strategy::LesionCensor, Strategy::PatientSubsample],
            member_counts: vec![1, 3, 8],
            arch: ArchSpec::encoder_decoder(1.0, 3, in_channels),
            loss: LossConfig::default(),
            hp,
            schedule,
            censor_rate: DEFAULT_CENSOR_RATE,
            fusion: Fusion::Mean,
            wrn: WrnStudyConfig::default(),
            eval: EvalSettings::default(),
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    /// Sets the global seed and the cohort seed together.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.cohort.seed = seed;
        self
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("bad experiment config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn input_channels(&self) -> usize {
        self.cohort.channels * self.schedule.z_slices
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {}, expected {SCHEMA_VERSION}",
                self.schema_version
            )));
        }
        if self.strategies.is_empty() {
            return Err(Error::Config("no strategies requested".into()));
        }
        if self.member_counts.is_empty() || self.member_counts.contains(&0) {
            return Err(Error::Config("member_counts must be nonempty and every count >= 1".into()));
        }
        if self.arch.in_channels != self.input_channels() {
            return Err(Error::Config(format!(
                "arch expects {} input channels but cohort gives {} channels x {} slices",
                self.arch.in_channels, self.cohort.channels, self.schedule.z_slices
            )));
        }
        if !(0.0..1.0).contains(&self.censor_rate) {
            return Err(Error::Config(format!("censor_rate must lie in [0, 1), got {}", self.censor_rate)));
        }
        self.cohort.validate()?;
        self.arch.validate()?;
        self.loss.validate()?;
        self.hp.validate()?;
        self.schedule.validate()?;
        self.eval.validate()
    }

    pub fn validate_wrn(&self) -> Result<()> {
        let w = &self.wrn;
        if w.member_counts.is_empty() || w.member_counts.contains(&0) {
            return Err(Error::Config("wrn.member_counts must be nonempty and every count >= 1".into()));
        }
        if w.blocks_per_stage == 0 {
            return Err(Error::Config("wrn.blocks_per_stage must be >= 1".into()));
        }
        ArchSpec::wide_res_seg(w.baseline_width, w.blocks_per_stage, self.input_channels()).validate()?;
        ArchSpec::wide_res_seg(w.member_width, w.blocks_per_stage, self.input_channels()).validate()?;
        if w.baseline_width.is_nan() || w.baseline_width <= w.member_width {
            return Err(Error::Config("wrn.baseline_width must exceed wrn.member_width".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON, ignoring the output directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        sha256_hex(&serde_json::to_vec(&c).expect("config serializes"))
    }
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunKind {
    Run,
    WrnStudy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub strategy: Strategy,
    pub arch: ArchSpec,
    pub n: usize,
    pub member_ids: Vec<usize>,
    pub params_total: usize,
    pub train_steps_total: usize,
    pub metrics: MetricsReport,
    /// PR curve CSV, relative to the run directory.
    pub pr_curve_csv: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub cohort_seed: u64,
    pub code_version: String,
    /// Per bundle label, the initialization seed of each member.
    pub member_init_seeds: Vec<(String, Vec<u64>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WrnCompute {
    pub baseline_params: usize,
    pub member_params: usize,
    pub ratio: f64,
    pub expected_ratio: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub total_s: f64,
    pub train_s: Vec<(String, f64)>,
    pub predict_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub kind: RunKind,
    pub rows: Vec<ReportRow>,
    pub eval: EvalSettings,
    pub provenance: Provenance,
    pub compute: Option<WrnCompute>,
    /// Wall-clock only; excluded from [`RunReport::hash`].
    pub timings: Option<Timings>,
}

impl RunReport {
    /// SHA-256 of the canonical JSON with timings removed.
    pub fn hash(&self) -> String {
        let mut r = self.clone();
        r.timings = None;
        sha256_hex(&serde_json::to_vec(&r).expect("report serializes"))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn row(&self, label: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.label == label)
    }
}
