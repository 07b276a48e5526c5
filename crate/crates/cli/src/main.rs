mod config;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use odisar_core::dtc::write_score_csv;
use odisar_core::dtm::{load_checkpoint, save_checkpoint, EpochRecord};
use odisar_core::eval::{
    desk_grid, prepare_detector, run_experiment, CellSpec, DetectorSpec, ExperimentConfig,
    ExperimentReport, ModelSource, PreparedDetector, Profile, Progress,
};
use odisar_core::explain::{attribute, emit_json, to_record};
use odisar_core::rng::subseed;
use odisar_core::synth::{
    export_trace, gen_robot, gen_vessel, load_trace, sample_waypoints, sidecar_path,
    DisturbanceCase, LabeledTrace, Maneuver, NoiseSigma, RobotScenario, VesselScenario,
};
use odisar_core::timeseries::{load_csv, FeatureSchema, MultivariateSeries};

use config::{Overrides, RunConfig};

#[derive(Parser)]
#[command(
    name = "odisar",
    version,
    about = "Proactive OOD detection with a transformer digital twin"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Flat key = value config file; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Clone, Copy, ValueEnum)]
enum System {
    Vessel,
    Robot,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic trace (CSV plus label sidecar).
    GenData {
        system: System,
        /// Vessel maneuver: zigzag, turning or random.
        #[arg(long, default_value = "zigzag")]
        maneuver: String,
        /// Angle in degrees (zigzag/turning) or 1/low/high (random).
        #[arg(long, default_value = "20")]
        variant: String,
        /// Vessel disturbance: none, case1, case2 or case3.
        #[arg(long, default_value = "none")]
        case: String,
        #[arg(long, default_value_t = 1200.0)]
        duration: f64,
        /// Number of robot waypoints.
        #[arg(long, default_value_t = 5)]
        waypoints: usize,
        /// Disable the robot odometry-noise episode.
        #[arg(long)]
        clean: bool,
        /// File stem of the generated trace.
        #[arg(long, default_value = "trace")]
        name: String,
        #[command(flatten)]
        common: Common,
    },
    /// Train a model and write checkpoint.json and history.csv.
    Train {
        /// Training trace (repeatable).
        #[arg(long = "data", required = true)]
        data: Vec<PathBuf>,
        /// Validation trace (repeatable).
        #[arg(long = "val", required = true)]
        val: Vec<PathBuf>,
        /// Sample rate for traces without a label sidecar.
        #[arg(long)]
        rate: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Derive thresholds from in-distribution validation traces.
    Calibrate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "data", required = true)]
        data: Vec<PathBuf>,
        #[arg(long)]
        rate: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Score a trace and write detections.json and scores.csv.
    Detect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        thresholds: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        rate: Option<f64>,
        /// Attach state attribution to every window, not only flagged ones.
        #[arg(long)]
        attribute_all: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Run an experiment grid and write report.csv, report.txt and roc.csv.
    Evaluate {
        /// Built-in grid; `desk` generates and trains everything.
        #[arg(long, conflicts_with = "checkpoint")]
        grid: Option<String>,
        /// Evaluate a trained model instead of a built-in grid.
        #[arg(long, requires_all = ["data", "test"])]
        checkpoint: Option<PathBuf>,
        /// Calibration trace for --checkpoint (repeatable).
        #[arg(long = "data")]
        data: Vec<PathBuf>,
        /// Labeled test trace for --checkpoint (repeatable).
        #[arg(long = "test")]
        test: Vec<PathBuf>,
        #[arg(long, default_value = "custom")]
        cell: String,
        #[arg(long)]
        rate: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenData {
            system,
            maneuver,
            variant,
            case,
            duration,
            waypoints,
            clean,
            name,
            common,
        } => {
            let cfg = resolve("gen-data", common)?;
            let trace = match system {
                System::Vessel => gen_vessel(&VesselScenario {
                    duration_s: duration,
                    ..VesselScenario::new(
                        Maneuver::parse(&maneuver, &variant)?,
                        DisturbanceCase::parse(&case)?,
                        cfg.seed,
                    )
                })?,
                System::Robot => {
                    let mut s = RobotScenario::new(
                        sample_waypoints(waypoints, 8.0, subseed(cfg.seed, "waypoints")),
                        cfg.seed,
                    );
                    if clean {
                        s.noise_sigma = NoiseSigma::ZERO;
                    }
                    gen_robot(&s)?
                }
            };
            let path = cfg.out.join(format!("{name}.csv"));
            export_trace(&trace, &path)?;
            println!(
                "wrote {} ({} steps, ood interval {:?})",
                path.display(),
                trace.series.len(),
                trace.ood_interval
            );
        }
        Command::Train {
            data,
            val,
            rate,
            common,
        } => {
            let cfg = resolve("train", common)?;
            let profile = cfg.profile();
            let spec = DetectorSpec {
                name: "cli".into(),
                profile,
                model: None,
                source: ModelSource::Train(load_all(&data, profile, rate)?),
                calibration: load_all(&val, profile, rate)?,
            };
            let det = prepare_detector(&spec, &cfg.experiment(), &mut print_epoch("train"))?;
            let ck = cfg.out.join("checkpoint.json");
            save_checkpoint(&det.model, &det.schema, &det.normalizer, &ck)?;
            let history = cfg.out.join("history.csv");
            det.history
                .as_ref()
                .expect("trained in this run")
                .write_csv(&history)?;
            println!(
                "wrote {} ({} parameters) and {}",
                ck.display(),
                det.model.num_params(),
                history.display()
            );
        }
        Command::Calibrate {
            checkpoint,
            data,
            rate,
            common,
        } => {
            let cfg = resolve("calibrate", common)?;
            let det = load_detector(&checkpoint, &data, rate, &cfg)?;
            let path = cfg.out.join("thresholds.json");
            det.thresholds.save(&path)?;
            let t = &det.thresholds;
            println!(
                "tau_recon {:.6} tau_var {:.6} (k = {}); {:.1}% of calibration windows exceed tau_recon",
                t.tau_recon,
                t.tau_var,
                t.k,
                100.0 * det.calibration_flag_rate
            );
            println!("wrote {}", path.display());
        }
        Command::Detect {
            checkpoint,
            thresholds,
            data,
            rate,
            attribute_all,
            common,
        } => {
            let cfg = resolve("detect", common)?;
            let ck = load_checkpoint(&checkpoint)
                .with_context(|| format!("loading {}", checkpoint.display()))?;
            let th = odisar_core::dtc::Thresholds::load(&thresholds)?;
            let series = load_series(&data, &ck.schema, rate)?;
            let normalized = ck.normalizer.normalize(&series)?;
            let detections = odisar_core::dtc::detect_series(
                &ck.model,
                &th,
                &normalized,
                cfg.passes,
                subseed(cfg.seed, "detect"),
            )?;
            let mut records = Vec::with_capacity(detections.len());
            for d in &detections {
                let a = attribute(&d.forecast, &d.recon, &ck.schema)?;
                records.push(to_record(&d.verdict, Some(&a), attribute_all));
            }
            let json = cfg.out.join("detections.json");
            emit_json(&records, &json)?;
            let csv = cfg.out.join("scores.csv");
            write_score_csv(detections.iter().map(|d| &d.verdict), &csv)?;
            let flagged = detections.iter().filter(|d| d.verdict.is_ood).count();
            println!(
                "{flagged} of {} windows flagged OOD; wrote {} and {}",
                detections.len(),
                json.display(),
                csv.display()
            );
        }
        Command::Evaluate {
            grid,
            checkpoint,
            data,
            test,
            cell,
            rate,
            common,
        } => {
            let base = if grid.is_some() {
                ExperimentConfig::desk()
            } else {
                ExperimentConfig::default()
            };
            let cfg = resolve_with("evaluate", common, &base)?;
            let (detectors, cells) = match (grid.as_deref(), checkpoint) {
                (Some("desk"), None) => desk_grid(cfg.seed)?,
                (Some(other), _) => bail!("unknown grid {other:?} (available: desk)"),
                (None, Some(ck)) => {
                    let schema = load_checkpoint(&ck)
                        .with_context(|| format!("loading {}", ck.display()))?
                        .schema;
                    let calibration = data
                        .iter()
                        .map(|p| load_series(p, &schema, rate))
                        .collect::<Result<Vec<_>>>()?;
                    let tests = test
                        .iter()
                        .map(|p| load_labeled(p, &schema))
                        .collect::<Result<Vec<_>>>()?;
                    let det = DetectorSpec {
                        name: "cli".into(),
                        profile: cfg.profile(),
                        model: None,
                        source: ModelSource::Checkpoint(ck),
                        calibration,
                    };
                    let cell = CellSpec {
                        name: cell,
                        detector: "cli".into(),
                        test: tests,
                    };
                    (vec![det], vec![cell])
                }
                (None, None) => bail!("evaluate needs --grid or --checkpoint"),
            };
            let report = run_experiment(&detectors, &cells, &cfg.experiment(), &mut |p| match p {
                Progress::Epoch { detector, record } => print_epoch(detector)(record),
                Progress::Detector { detector, prepared } => eprintln!(
                    "[{detector}] tau_recon {:.6}, tau_var {:.6}, baseline tau {:.6}",
                    prepared.thresholds.tau_recon,
                    prepared.thresholds.tau_var,
                    prepared.baseline_threshold
                ),
                Progress::Cell(c) => eprintln!(
                    "[{}] ODiSAR AUROC {:.4} F1(OOD) {:.4} | baseline AUROC {:.4} F1(OOD) {:.4}",
                    c.cell, c.odisar.auroc, c.odisar.f1_ood, c.baseline.auroc, c.baseline.f1_ood
                ),
            })?;
            write_report(&report, &cfg.out)?;
            print!("{}", report.to_table());
        }
    }
    Ok(())
}

fn resolve(command: &str, common: Common) -> Result<RunConfig> {
    resolve_with(command, common, &ExperimentConfig::default())
}

fn resolve_with(command: &str, common: Common, base: &ExperimentConfig) -> Result<RunConfig> {
    let cfg = RunConfig::resolve(command, common.config.as_deref(), common.overrides, base)?;
    cfg.echo()?;
    Ok(cfg)
}

fn print_epoch(name: &str) -> impl FnMut(&EpochRecord) + '_ {
    move |r| {
        eprintln!(
            "[{name}] epoch {:>3}: train {:.5} (forecast {:.5}, recon {:.5}), val {:.5}",
            r.epoch, r.train.total, r.train.forecast, r.train.recon, r.val.total
        )
    }
}

fn default_rate(schema: &FeatureSchema) -> f64 {
    if schema == &FeatureSchema::robot() {
        10.0
    } else {
        1.0
    }
}

/// Reads a CSV trace; the sample rate comes from its label sidecar when one
/// exists, else from `--rate`, else from the profile default.
fn load_series(
    path: &Path,
    schema: &FeatureSchema,
    rate: Option<f64>,
) -> Result<MultivariateSeries> {
    if !path.exists() {
        bail!("missing data file {}", path.display());
    }
    if sidecar_path(path).exists() {
        Ok(load_trace(path, schema)?.series)
    } else {
        Ok(load_csv(
            path,
            schema,
            rate.unwrap_or_else(|| default_rate(schema)),
        )?)
    }
}

fn load_labeled(path: &Path, schema: &FeatureSchema) -> Result<LabeledTrace> {
    if !path.exists() {
        bail!("missing test trace {}", path.display());
    }
    load_trace(path, schema).with_context(|| {
        format!(
            "test traces need a label sidecar ({})",
            sidecar_path(path).display()
        )
    })
}

fn load_all(
    paths: &[PathBuf],
    profile: Profile,
    rate: Option<f64>,
) -> Result<Vec<MultivariateSeries>> {
    let schema = profile.schema();
    paths
        .iter()
        .map(|p| load_series(p, &schema, rate))
        .collect()
}

fn load_detector(
    checkpoint: &Path,
    data: &[PathBuf],
    rate: Option<f64>,
    cfg: &RunConfig,
) -> Result<PreparedDetector> {
    let schema = load_checkpoint(checkpoint)
        .with_context(|| format!("loading {}", checkpoint.display()))?
        .schema;
    let calibration = data
        .iter()
        .map(|p| load_series(p, &schema, rate))
        .collect::<Result<Vec<_>>>()?;
    let spec = DetectorSpec {
        name: "cli".into(),
        profile: cfg.profile(),
        model: None,
        source: ModelSource::Checkpoint(checkpoint.to_path_buf()),
        calibration,
    };
    Ok(prepare_detector(&spec, &cfg.experiment(), &mut |_| {})?)
}

fn write_report(report: &ExperimentReport, out: &Path) -> Result<()> {
    report.write_report_csv(out.join("report.csv"))?;
    report.write_roc_csv(out.join("roc.csv"))?;
    fs::write(out.join("report.txt"), report.to_table())
        .with_context(|| format!("writing {}", out.join("report.txt").display()))?;
    for (name, det) in &report.detectors {
        if let Some(h) = &det.history {
            save_checkpoint(
                &det.model,
                &det.schema,
                &det.normalizer,
                out.join(format!("checkpoint_{name}.json")),
            )?;
            h.write_csv(out.join(format!("history_{name}.csv")))?;
        }
    }
    Ok(())
}
