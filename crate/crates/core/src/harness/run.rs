use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::index::sample;

use super::{
    ExperimentConfig, Provenance, ReportRow, RunKind, RunReport, Timings, WrnCompute, PARAM_RATIO_TOLERANCE,
    SCHEMA_VERSION,
};
use crate::ensemble::{
    fuse_volumes, load_bundle, predict_members, predict_volume, save_bundle, train_bundle, Bundle, BundleConfig,
    Fusion, Strategy,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate_patient, summarize, write_pr_csv, PatientEval};
use crate::neural::ArchSpec;
use crate::seeds::{self, tag};
use crate::synthgen::{generate_cohort, load_cohort, save_cohort, Cohort, CohortManifest, PatientCase};
use crate::volume::{self, Volume};

pub const RUN_REPORT_FILE: &str = "run_report.json";

pub fn cmd_gen(cfg: &ExperimentConfig, dir: &Path) -> Result<CohortManifest> {
    cfg.cohort.validate()?;
    let cohort = generate_cohort(&cfg.cohort).map_err(|e| e.in_stage("generate cohort"))?;
    save_cohort(dir, &cohort).map_err(|e| e.in_stage("write cohort"))
}

fn obtain_cohort(cfg: &ExperimentConfig) -> Result<Cohort> {
    match &cfg.cohort_dir {
        Some(dir) => load_cohort(dir).map_err(|e| e.in_stage("load cohort")),
        None => generate_cohort(&cfg.cohort).map_err(|e| e.in_stage("generate cohort")),
    }
}

/// Member ids to fuse for an `n`-member row out of a `max`-member bundle:
/// all of them when `n == max`, otherwise a seeded random subset.
pub fn subset_ids(max: usize, n: usize, seed: u64, key: u64) -> Result<Vec<usize>> {
    if n == 0 || n > max {
        return Err(Error::Config(format!("cannot pick {n} of {max} members")));
    }
    if n == max {
        return Ok((0..max).collect());
    }
    let mut rng = seeds::rng(seed, tag::SUBSET, key);
    let mut ids = sample(&mut rng, max, n).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// Fails if any member's plan mentions a patient outside the training split.
fn check_training_isolation(bundle: &Bundle, train: &[PatientCase], test: &[PatientCase]) -> Result<()> {
    let train_ids: BTreeSet<&str> = train.iter().map(|c| c.id.as_str()).collect();
    let test_ids: BTreeSet<&str> = test.iter().map(|c| c.id.as_str()).collect();
    for m in &bundle.members {
        for id in m.plan.kept_patients.iter().chain(m.plan.kept_lesions.keys()) {
            if test_ids.contains(id.as_str()) || !train_ids.contains(id.as_str()) {
                return Err(Error::Config(format!("member {} was given non-training patient {id}", m.plan.member_id)));
            }
        }
    }
    Ok(())
}

struct Evaluated {
    rows: Vec<ReportRow>,
    curves: Vec<(String, String)>,
}

/// Scores `n`-member subsets of a trained bundle on the test split.
fn evaluate_rows(
    cfg: &ExperimentConfig,
    bundle: &Bundle,
    prefix: &str,
    counts: &[usize],
    test: &[PatientCase],
    predict_s: &mut f64,
) -> Result<Evaluated> {
    let t = Instant::now();
    let maps: Vec<Vec<Volume>> = test
        .iter()
        .map(|c| predict_members(bundle, &c.image, cfg.schedule.z_slices))
        .collect::<Result<_>>()
        .map_err(|e| e.in_stage(format!("predict {prefix}")))?;
    *predict_s += t.elapsed().as_secs_f64();

    let mut out = Evaluated { rows: Vec::new(), curves: Vec::new() };
    for &n in counts {
        let label = format!("{prefix}-{n}");
        let key = (bundle.strategy as u64) << 32 | n as u64;
        let ids = subset_ids(bundle.n(), n, cfg.seed, key)?;
        let score = || -> Result<_> {
            let evals = test
                .iter()
                .zip(&maps)
                .map(|(case, member_maps)| {
                    let chosen: Vec<&Volume> = ids.iter().map(|&i| &member_maps[i]).collect();
                    let prob = fuse_volumes(&chosen, cfg.fusion)?;
                    evaluate_patient(&case.id, &prob, &case.lesions, &cfg.eval)
                })
                .collect::<Result<Vec<PatientEval>>>()?;
            summarize(&evals, &cfg.eval)
        };
        let (metrics, curve) = score().map_err(|e| e.in_stage(format!("evaluate {label}")))?;
        let csv_name = format!("pr/{label}.csv");
        out.curves.push((csv_name.clone(), write_pr_csv(&curve)));
        let arch = bundle.members[0].model.arch;
        out.rows.push(ReportRow {
            label,
            strategy: bundle.strategy,
            arch,
            n,
            member_ids: ids,
            params_total: n * arch.param_count(),
            train_steps_total: n * cfg.schedule.steps,
            metrics,
            pr_curve_csv: csv_name,
        });
    }
    Ok(out)
}

fn bundle_config(cfg: &ExperimentConfig, strategy: Strategy, n: usize, arch: ArchSpec) -> BundleConfig {
    BundleConfig {
        strategy,
        n,
        seed: cfg.seed,
        arch,
        hp: cfg.hp,
        loss: cfg.loss,
        schedule: cfg.schedule.clone(),
        censor_rate: cfg.censor_rate,
    }
}

struct Runner<'a> {
    cfg: &'a ExperimentConfig,
    out: Option<&'a Path>,
    cohort: Cohort,
    rows: Vec<ReportRow>,
    curves: Vec<(String, String)>,
    seeds: Vec<(String, Vec<u64>)>,
    timings: Timings,
}

impl<'a> Runner<'a> {
    fn new(cfg: &'a ExperimentConfig, out: Option<&'a Path>) -> Result<Self> {
        Ok(Self {
            cfg,
            out,
            cohort: obtain_cohort(cfg)?,
            rows: Vec::new(),
            curves: Vec::new(),
            seeds: Vec::new(),
            timings: Timings::default(),
        })
    }

    fn train_and_score(&mut self, prefix: &str, bcfg: &BundleConfig, counts: &[usize]) -> Result<()> {
        let t = Instant::now();
        let bundle = train_bundle(&self.cohort.train, bcfg).map_err(|e| e.in_stage(format!("train {prefix}")))?;
        self.timings.train_s.push((prefix.to_string(), t.elapsed().as_secs_f64()));
        check_training_isolation(&bundle, &self.cohort.train, &self.cohort.test)
            .map_err(|e| e.in_stage(format!("train {prefix}")))?;
        self.seeds.push((prefix.to_string(), bundle.members.iter().map(|m| m.model.init_seed).collect()));
        if let Some(dir) = self.out {
            save_bundle(&dir.join("bundles").join(prefix), &bundle)
                .map_err(|e| e.in_stage(format!("save {prefix}")))?;
        }
        let ev = evaluate_rows(self.cfg, &bundle, prefix, counts, &self.cohort.test, &mut self.timings.predict_s)?;
        self.rows.extend(ev.rows);
        self.curves.extend(ev.curves);
        Ok(())
    }

    fn finish(self, kind: RunKind, compute: Option<WrnCompute>, started: Instant) -> Result<RunReport> {
        let mut timings = self.timings;
        timings.total_s = started.elapsed().as_secs_f64();
        let report = RunReport {
            schema_version: SCHEMA_VERSION,
            kind,
            rows: self.rows,
            eval: self.cfg.eval.clone(),
            provenance: Provenance {
                config_hash: self.cfg.hash(),
                seed: self.cfg.seed,
                cohort_seed: self.cohort.spec.seed,
                code_version: env!("CARGO_PKG_VERSION").to_string(),
                member_init_seeds: self.seeds,
            },
            compute,
            timings: Some(timings),
        };
        if let Some(dir) = self.out {
            let write = |rel: &str, text: &str| -> Result<()> {
                let path = dir.join(rel);
                if let Some(parent) = path.parent() {
                    fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
                }
                fs::write(&path, text).map_err(|e| Error::io(&path, e))
            };
            for (rel, csv) in &self.curves {
                write(rel, csv)?;
            }
            write("config.json", &self.cfg.to_json())?;
            write(RUN_REPORT_FILE, &report.to_json())?;
        }
        Ok(report)
    }
}

/// Trains one bundle per requested strategy, sized for the largest member
/// count, and scores every requested count on the held-out patients.
pub fn cmd_run(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<RunReport> {
    let started = Instant::now();
    cfg.validate()?;
    let mut runner = Runner::new(cfg, out)?;
    let mut strategies = cfg.strategies.clone();
    strategies.dedup();
    let max = *cfg.member_counts.iter().max().expect("validated nonempty");
    for strategy in strategies {
        let counts: Vec<usize> = match strategy {
            Strategy::Single => vec![1],
            _ => {
                let mut c = cfg.member_counts.clone();
                c.sort_unstable();
                c.dedup();
                c
            }
        };
        let n = if strategy == Strategy::Single { 1 } else { max };
        let bcfg = bundle_config(cfg, strategy, n, cfg.arch);
        runner.train_and_score(strategy.name(), &bcfg, &counts)?;
    }
    runner.finish(RunKind::Run, None, started)
}

/// Compares one wide network on full data against Random-Bundle ensembles
/// of narrow networks at several member counts.
pub fn cmd_wrn_study(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<RunReport> {
    let started = Instant::now();
    cfg.validate()?;
    cfg.validate_wrn()?;
    let w = &cfg.wrn;
    let base_arch = ArchSpec::wide_res_seg(w.baseline_width, w.blocks_per_stage, cfg.input_channels());
    let member_arch = ArchSpec::wide_res_seg(w.member_width, w.blocks_per_stage, cfg.input_channels());
    let (bp, mp) = (base_arch.param_count(), member_arch.param_count());
    let expected_ratio = (w.baseline_width / w.member_width).powi(2);
    let compute = WrnCompute { baseline_params: bp, member_params: mp, ratio: bp as f64 / mp as f64, expected_ratio };
    if (compute.ratio / expected_ratio - 1.0).abs() > PARAM_RATIO_TOLERANCE {
        return Err(Error::Config(format!(
            "parameter ratio {:.2} is outside ±{:.0}% of {expected_ratio}",
            compute.ratio,
            PARAM_RATIO_TOLERANCE * 100.0
        )));
    }
    let mut counts = w.member_counts.clone();
    counts.sort_unstable();
    counts.dedup();
    let max = *counts.last().expect("validated nonempty");

    let mut runner = Runner::new(cfg, out)?;
    runner.train_and_score(
        &format!("wrn-k{}-single", w.baseline_width),
        &bundle_config(cfg, Strategy::Single, 1, base_arch),
        &[1],
    )?;
    runner.train_and_score(
        &format!("wrn-k{}-rb", w.member_width),
        &bundle_config(cfg, Strategy::LesionCensor, max, member_arch),
        &counts,
    )?;
    runner.finish(RunKind::WrnStudy, Some(compute), started)
}

/// Runs a saved bundle over one image volume and writes the probability map.
pub fn predict_file(bundle_dir: &Path, image: &Path, out: &Path, z_slices: usize, fusion: Fusion) -> Result<Volume> {
    let bundle = load_bundle(bundle_dir).map_err(|e| e.in_stage("load bundle"))?;
    let image = volume::read_volume(image).map_err(|e| e.in_stage("read image"))?;
    let prob = predict_volume(&bundle, &image, z_slices, fusion).map_err(|e| e.in_stage("predict"))?;
    volume::write_volume(out, &prob)?;
    Ok(prob)
}
