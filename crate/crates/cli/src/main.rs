use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use rbundle::ensemble::{Fusion, Strategy};
use rbundle::error::Error;
use rbundle::harness::{cmd_gen, cmd_report, cmd_run, cmd_wrn_study, predict_file, read_run_report, ExperimentConfig};

#[derive(Parser)]
#[command(name = "rbundle", version, about = "Lesion-censoring segmentation ensembles on synthetic cohorts")]
struct Cli {
    /// Worker threads for training and evaluation (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic cohort and its manifest.
    Gen(ConfigArgs),
    /// Train and evaluate every configured strategy and member count.
    Run(ConfigArgs),
    /// Compare one wide WRN against RB ensembles of narrow WRNs.
    WrnStudy(ConfigArgs),
    /// Merge run reports into one comparison table.
    Report {
        /// Run directories or run_report.json files.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Write the CSV table here as well as printing it.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict a probability volume for one image with a saved bundle.
    Predict {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        z_slices: usize,
        #[arg(long, default_value = "mean", value_parser = parse_fusion)]
        fusion: Fusion,
    },
}

/// Config file plus overrides for its most common fields.
#[derive(Args)]
struct ConfigArgs {
    /// JSON experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Global seed; also reseeds the cohort.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Read an existing cohort instead of generating one.
    #[arg(long)]
    cohort_dir: Option<PathBuf>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    /// Comma-separated: single, lesion_censor, patient_subsample, hyperparameter.
    #[arg(long, value_delimiter = ',', value_parser = parse_strategy)]
    strategies: Option<Vec<Strategy>>,
    #[arg(long, value_delimiter = ',')]
    member_counts: Option<Vec<usize>>,
    #[arg(long)]
    width: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    censor_rate: Option<f64>,
    #[arg(long, value_parser = parse_fusion)]
    fusion: Option<Fusion>,
    #[arg(long)]
    tau_bin: Option<f64>,
    #[arg(long)]
    bootstrap_resamples: Option<usize>,
    /// Comma-separated member counts for the WRN study.
    #[arg(long, value_delimiter = ',')]
    wrn_member_counts: Option<Vec<usize>>,
}

fn parse_enum<T: serde::de::DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    parse_enum(s)
}

fn parse_fusion(s: &str) -> Result<Fusion, String> {
    parse_enum(s)
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                ExperimentConfig::from_json(&text)?
            }
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg = cfg.with_seed(seed);
        }
        if let Some(out) = &self.out {
            cfg.output_dir = Some(out.clone());
        }
        if let Some(dir) = &self.cohort_dir {
            cfg.cohort_dir = Some(dir.clone());
        }
        set(&mut cfg.cohort.n_train, self.n_train);
        set(&mut cfg.cohort.n_test, self.n_test);
        set(&mut cfg.strategies, self.strategies.clone());
        set(&mut cfg.member_counts, self.member_counts.clone());
        set(&mut cfg.arch.width, self.width);
        set(&mut cfg.schedule.steps, self.steps);
        set(&mut cfg.hp.learning_rate, self.learning_rate);
        set(&mut cfg.loss.alpha, self.alpha);
        set(&mut cfg.loss.beta, self.beta);
        set(&mut cfg.censor_rate, self.censor_rate);
        set(&mut cfg.fusion, self.fusion);
        set(&mut cfg.eval.tau_bin, self.tau_bin);
        set(&mut cfg.eval.bootstrap_resamples, self.bootstrap_resamples);
        set(&mut cfg.wrn.member_counts, self.wrn_member_counts.clone());
        cfg.validate()?;
        Ok(cfg)
    }
}

fn set<T>(field: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *field = v;
    }
}

fn out_dir(cfg: &ExperimentConfig) -> Result<&Path, Error> {
    cfg.output_dir.as_deref().ok_or_else(|| Error::Config("--out is required".into()))
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    if let Some(workers) = cli.workers {
        if workers == 0 {
            return Err(Error::Config("--workers must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(workers).build_global().context("configuring worker pool")?;
    }
    match cli.command {
        Command::Gen(args) => {
            let cfg = args.load()?;
            let manifest = cmd_gen(&cfg, out_dir(&cfg)?)?;
            println!(
                "wrote {} train ({} lesions) and {} test ({} lesions) patients to {}",
                manifest.train.len(),
                manifest.total_train_lesions,
                manifest.test.len(),
                manifest.total_test_lesions,
                out_dir(&cfg)?.display()
            );
        }
        Command::Run(args) => {
            let cfg = args.load()?;
            let report = cmd_run(&cfg, cfg.output_dir.as_deref())?;
            print_rows(&report);
        }
        Command::WrnStudy(args) => {
            let cfg = args.load()?;
            let report = cmd_wrn_study(&cfg, cfg.output_dir.as_deref())?;
            if let Some(c) = &report.compute {
                println!("parameter ratio {:.3} (expected {:.3})", c.ratio, c.expected_ratio);
            }
            print_rows(&report);
        }
        Command::Report { runs, out } => {
            let reports = runs
                .iter()
                .map(|p| Ok((p.display().to_string(), read_run_report(p)?)))
                .collect::<Result<Vec<_>, Error>>()?;
            let table = cmd_report(&reports)?;
            print!("{}", table.to_table());
            if let Some(path) = out {
                fs::write(&path, table.to_csv()).map_err(|e| Error::io(&path, e))?;
            }
        }
        Command::Predict { bundle, image, out, z_slices, fusion } => {
            predict_file(&bundle, &image, &out, z_slices, fusion)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn print_rows(report: &rbundle::harness::RunReport) {
    println!("{:<28} {:>8} {:>10} {:>10}", "configuration", "mAP", "sens@P80", "TP DICE");
    for row in &report.rows {
        let m = &row.metrics;
        let dice = m.tp_dice_at_p80.map_or("-".to_string(), |d| format!("{d:.3}"));
        println!("{:<28} {:>8.3} {:>10.3} {:>10}", row.label, m.map, m.sensitivity_at_p80, dice);
    }
    println!("report hash {}", report.hash());
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = err.downcast_ref::<Error>().map_or(1, Error::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
