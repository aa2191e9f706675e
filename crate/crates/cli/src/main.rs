mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;
use sleepradar_core::cohort::generate_subject;
use sleepradar_core::oximetry::FusedDetection;
use sleepradar_core::pipeline::report::emit_report_and_plots;
use sleepradar_core::pipeline::{
    fold_plans, fused_detections, predicted_hypnogram, prepare_subjects, radar_detections, run_pipeline,
    sweep_omega, train_folds, FoldModels, PipelineConfig, RunReport, SubjectData,
};
use sleepradar_core::{DetectedSegment, Error};

use config::{ConfigError, Overrides};

const EXIT_OTHER: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_STAGE: u8 = 3;
const EXIT_VALIDATION: u8 = 4;

#[derive(Parser)]
#[command(name = "sleepradar", version, about = "Radar sleep apnea screening pipeline on synthetic cohorts")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Pipeline configuration (TOML or JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; the artifact cache lives in `<out>/cache`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    folds: Option<usize>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the cohort and write each subject's reference annotations.
    GenCohort,
    /// Simulate and preprocess every subject into the cache.
    Preprocess,
    /// Train the detector, stager and fusion network of every fold.
    Train,
    /// Radar-only event detection for every test subject.
    Detect,
    /// Sleep staging for every test subject.
    Stage,
    /// Soft-fused event detection for every test subject.
    Fuse,
    /// Full cross-validated run; writes report.json and summary.txt.
    Evaluate,
    /// Render the summary and plots from a saved report.
    Report {
        /// Defaults to `<out>/report.json`.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Pooled test AP@0.5 for a list of fusion weights.
    SweepOmega {
        #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,1")]
        omegas: Vec<f64>,
    },
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn segments_csv(dets: &[DetectedSegment]) -> String {
    let mut out = String::from("class,score,t_start,t_end\n");
    for d in dets {
        let _ = writeln!(out, "{},{},{},{}", d.kind.as_str(), d.score, d.t_start, d.t_end);
    }
    out
}

fn fused_csv(dets: &[FusedDetection]) -> String {
    let mut out = String::from("class,p_r,p_s,p_f,t_start,t_end\n");
    for f in dets {
        let d = &f.segment;
        let p_s = f.p_s.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{p_s},{},{},{}", d.kind.as_str(), f.p_r, d.score, d.t_start, d.t_end);
    }
    out
}

/// Trained folds together with the subjects each one tests.
fn trained(config: &PipelineConfig) -> Result<(Vec<SubjectData>, Vec<FoldModels>)> {
    let subjects = prepare_subjects(config)?;
    let plans = fold_plans(subjects.len(), config.folds)?;
    let models = train_folds(config, &plans, &subjects)?;
    Ok((subjects, models))
}

fn run(cli: Cli) -> Result<()> {
    let overrides = Overrides {
        seed: cli.global.seed,
        out: cli.global.out.clone(),
        folds: cli.global.folds,
    };
    let config = config::resolve(cli.global.config.as_deref(), &overrides)?;
    let out = config.out_dir.clone();
    match cli.command {
        Command::GenCohort => {
            for profile in config.cohort_spec().profiles() {
                let r = generate_subject(&profile)?;
                let doc = json!({
                    "id": r.id,
                    "duration": profile.duration,
                    "events": r.truth_events,
                    "hypnogram": r.truth_hypnogram,
                    "spo2": r.spo2.samples,
                });
                write(&out.join("cohort").join(format!("{}.json", r.id)), &serde_json::to_string(&doc)?)?;
                println!(
                    "{}  {:.1} h  {} events  TST {:.2} h",
                    r.id,
                    profile.duration / 3600.0,
                    r.truth_events.len(),
                    r.truth_hypnogram.tst_hours()
                );
            }
        }
        Command::Preprocess => {
            for s in prepare_subjects(&config)? {
                println!("{}  {} range bins x {} frames  {}", s.id, s.stack.range_bins, s.stack.frames, &s.hash[..16]);
            }
        }
        Command::Train => {
            let (subjects, models) = trained(&config)?;
            let ids = |v: &[usize]| v.iter().map(|&i| subjects[i].id.clone()).collect::<Vec<_>>();
            let mut folds = Vec::new();
            for m in &models {
                println!(
                    "fold {}  test {:?}  omega {}  AHI score threshold {}  {}",
                    m.plan.fold,
                    ids(&m.plan.test),
                    m.training.omega,
                    m.training.ahi_min_score,
                    m.dir.display()
                );
                folds.push(json!({
                    "fold": m.plan.fold,
                    "train": ids(&m.plan.train),
                    "val": ids(&m.plan.val),
                    "test": ids(&m.plan.test),
                    "model_hash": m.hash,
                    "dir": m.dir,
                    "training": m.training,
                }));
            }
            write(&out.join("folds.json"), &(serde_json::to_string_pretty(&folds)? + "\n"))?;
        }
        Command::Detect | Command::Stage | Command::Fuse => {
            let (subjects, models) = trained(&config)?;
            for m in &models {
                for &i in &m.plan.test {
                    let s = &subjects[i];
                    match cli.command {
                        Command::Detect => {
                            let d = radar_detections(m, s)?;
                            write(&out.join("detections").join(format!("radar_{}.csv", s.id)), &segments_csv(&d))?;
                            println!("{}  {} radar detections", s.id, d.len());
                        }
                        Command::Fuse => {
                            let d = fused_detections(m, s)?;
                            write(&out.join("detections").join(format!("fused_{}.csv", s.id)), &fused_csv(&d))?;
                            println!("{}  {} fused detections (omega {})", s.id, d.len(), m.training.omega);
                        }
                        _ => {
                            let p = predicted_hypnogram(m, s)?;
                            let mut csv = String::from("epoch,t_start,stage\n");
                            for (k, st) in p.hypnogram.epochs.iter().enumerate() {
                                let _ = writeln!(csv, "{k},{},{}", k as f64 * p.hypnogram.epoch_len, st.as_str());
                            }
                            write(&out.join("hypnograms").join(format!("{}.csv", s.id)), &csv)?;
                            println!("{}  TST {:.2} h (reference {:.2} h)", s.id, p.tst_hours, s.hypnogram.tst_hours());
                        }
                    }
                }
            }
        }
        Command::Evaluate => {
            let report = run_pipeline(&config)?;
            write(&out.join("report.json"), &report.to_json()?)?;
            let summary = report.summary();
            write(&out.join("summary.txt"), &summary)?;
            print!("{summary}");
        }
        Command::Report { report } => {
            let path = report.unwrap_or_else(|| out.join("report.json"));
            let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            let report = RunReport::from_json(&text)?;
            let files = emit_report_and_plots(&report, &out.join("report"))?;
            for f in files {
                println!("{}", f.display());
            }
        }
        Command::SweepOmega { omegas } => {
            let (radar, rows) = sweep_omega(&config, &omegas)?;
            let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.6}"));
            let mut csv = String::from("omega,ap50\n");
            println!("radar only  AP@0.5 {}", fmt(radar));
            println!("{:>6}  {:>10}", "omega", "AP@0.5");
            for r in &rows {
                println!("{:>6}  {:>10}", r.omega, fmt(r.ap));
                let _ = writeln!(csv, "{},{}", r.omega, r.ap.map(|v| v.to_string()).unwrap_or_default());
            }
            write(&out.join("omega_sweep.csv"), &csv)?;
        }
    }
    Ok(())
}

fn is_validation(e: &Error) -> bool {
    matches!(
        e,
        Error::VersionMismatch { .. } | Error::Truncated(..) | Error::Checksum { .. } | Error::BadMagic | Error::Format(_)
    )
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<ConfigError>().is_some() {
        return EXIT_CONFIG;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::Stage { source, .. }) if is_validation(source) => EXIT_VALIDATION,
        Some(Error::Stage { .. }) => EXIT_STAGE,
        Some(e) if is_validation(e) => EXIT_VALIDATION,
        Some(Error::Json(_)) => EXIT_VALIDATION,
        _ => EXIT_OTHER,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
