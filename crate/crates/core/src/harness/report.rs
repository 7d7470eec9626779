use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{RunReport, RUN_REPORT_FILE};
use crate::ensemble::Strategy;
use crate::error::{Error, Result};

/// Reads `run_report.json` from a run directory, or the file itself.
pub fn read_run_report(path: &Path) -> Result<RunReport> {
    let file = if path.is_dir() { path.join(RUN_REPORT_FILE) } else { path.to_path_buf() };
    let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(&file, format!("bad run report: {e}")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub run: String,
    pub label: String,
    pub strategy: Strategy,
    pub width: f64,
    pub n: usize,
    pub map: f64,
    pub map_lo: f64,
    pub map_hi: f64,
    pub sensitivity_at_p80: f64,
    pub tp_dice_at_p80: Option<f64>,
    pub n_gt: usize,
    pub n_tp: usize,
    pub n_fp: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "run,label,strategy,width,n,map,map_lo,map_hi,sensitivity_at_p80,tp_dice_at_p80,n_gt,n_tp,n_fp\n",
        );
        for r in &self.rows {
            let dice = r.tp_dice_at_p80.map_or(String::new(), |d| d.to_string());
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.run,
                r.label,
                r.strategy.name(),
                r.width,
                r.n,
                r.map,
                r.map_lo,
                r.map_hi,
                r.sensitivity_at_p80,
                dice,
                r.n_gt,
                r.n_tp,
                r.n_fp
            )
            .unwrap();
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<12} {:<26} {:>5} {:>4} {:>22} {:>9} {:>9}\n",
            "run", "configuration", "k", "n", "mAP (95% CI)", "sens@P80", "TP DICE"
        );
        for r in &self.rows {
            let dice = r.tp_dice_at_p80.map_or("-".to_string(), |d| format!("{:.1}", 100.0 * d));
            writeln!(
                s,
                "{:<12} {:<26} {:>5} {:>4} {:>22} {:>9.1} {:>9}",
                r.run,
                r.label,
                r.width,
                r.n,
                format!("{:.1} ({:.1}-{:.1})", 100.0 * r.map, 100.0 * r.map_lo, 100.0 * r.map_hi),
                100.0 * r.sensitivity_at_p80,
                dice
            )
            .unwrap();
        }
        s
    }
}

/// Merges reports into one table sorted by strategy name, then member count.
/// Runs that scored detections differently cannot be merged.
pub fn cmd_report(reports: &[(String, RunReport)]) -> Result<Comparison> {
    let Some((_, first)) = reports.first() else {
        return Err(Error::Config("no run reports to merge".into()));
    };
    for (name, r) in reports {
        if !r.eval.comparable(&first.eval) {
            return Err(Error::Config(format!(
                "run {name} uses eval settings (tau_bin {}, d_match {} mm, p_target {}) that differ from the first run's ({}, {} mm, {})",
                r.eval.tau_bin, r.eval.d_match_mm, r.eval.p_target, first.eval.tau_bin, first.eval.d_match_mm, first.eval.p_target
            )));
        }
    }
    let mut rows: Vec<ComparisonRow> = reports
        .iter()
        .flat_map(|(name, r)| {
            r.rows.iter().map(move |row| ComparisonRow {
                run: name.clone(),
                label: row.label.clone(),
                strategy: row.strategy,
                width: row.arch.width,
                n: row.n,
                map: row.metrics.map,
                map_lo: row.metrics.map_ci95.0,
                map_hi: row.metrics.map_ci95.1,
                sensitivity_at_p80: row.metrics.sensitivity_at_p80,
                tp_dice_at_p80: row.metrics.tp_dice_at_p80,
                n_gt: row.metrics.n_gt,
                n_tp: row.metrics.n_tp,
                n_fp: row.metrics.n_fp,
            })
        })
        .collect();
    rows.sort_by(|a, b| {
        a.strategy
            .name()
            .cmp(b.strategy.name())
            .then(a.n.cmp(&b.n))
            .then(a.width.total_cmp(&b.width))
            .then(a.run.cmp(&b.run))
    });
    Ok(Comparison { rows })
}
