use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::metrics::{label_windows, metrics_at, roc_points, LabeledScore, MetricsReport};
use crate::dtc::{calibrate, detect_series, mean_std, Thresholds, DEFAULT_K, DEFAULT_PASSES};
use crate::dtm::loss::mean_step_sq_norm;
use crate::dtm::{
    load_checkpoint, train_with, DtModel, EpochRecord, Mode, ModelConfig, TrainConfig, TrainHistory,
};
use crate::error::{Error, Result};
use crate::rng::subseed;
use crate::synth::{
    gen_robot, gen_vessel, sample_waypoints, DisturbanceCase, LabeledTrace, Maneuver, NoiseSigma,
    RobotScenario, VesselScenario,
};
use crate::timeseries::{
    fit_normalizer_many, make_windows, FeatureSchema, Matrix, MultivariateSeries, Normalizer,
    WindowPair,
};

/// Forecast RMSE over all `h x D` elements.
pub fn baseline_rmse(forecast: &Matrix, target: &Matrix) -> Result<f64> {
    let d = forecast.ncols().max(1) as f64;
    Ok((mean_step_sq_norm(forecast, target)? / d).sqrt())
}

/// Forecast-error-only scores: deterministic forecast against the true future.
pub fn baseline_rmse_scores(model: &DtModel, windows: &[WindowPair]) -> Result<Vec<f64>> {
    windows
        .iter()
        .map(|w| baseline_rmse(&model.forward(&w.input, Mode::Eval)?.forecast, &w.target))
        .collect()
}

/// Model profile; selects the dropout rate and feature schema.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Profile {
    Vessel,
    Robot,
}

impl Profile {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "vessel" => Ok(Profile::Vessel),
            "robot" => Ok(Profile::Robot),
            other => Err(Error::invalid(format!(
                "unknown profile {other:?} (expected vessel or robot)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Profile::Vessel => "vessel",
            Profile::Robot => "robot",
        }
    }

    pub fn model_config(self, w: usize, h: usize, d_features: usize) -> ModelConfig {
        match self {
            Profile::Vessel => ModelConfig::vessel(w, h, d_features),
            Profile::Robot => ModelConfig::robot(w, h, d_features),
        }
    }

    pub fn schema(self) -> FeatureSchema {
        match self {
            Profile::Vessel => FeatureSchema::vessel(),
            Profile::Robot => FeatureSchema::robot(),
        }
    }
}

/// Where a detector's model comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelSource {
    /// Train on these in-distribution traces (validation loss is tracked on
    /// the detector's calibration traces).
    Train(Vec<MultivariateSeries>),
    Checkpoint(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorSpec {
    pub name: String,
    pub profile: Profile,
    pub model: Option<ModelConfig>,
    pub source: ModelSource,
    /// Held-out in-distribution traces for thresholds.
    pub calibration: Vec<MultivariateSeries>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellSpec {
    pub name: String,
    pub detector: String,
    pub test: Vec<LabeledTrace>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub w: usize,
    pub h: usize,
    /// Offset between consecutive training windows.
    pub train_stride: usize,
    pub k: f64,
    pub n_passes: usize,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            w: 30,
            h: 30,
            train_stride: 10,
            k: DEFAULT_K,
            n_passes: DEFAULT_PASSES,
            train: TrainConfig::default(),
        }
    }
}

/// Seed of the desk grid reported in the README.
pub const DESK_SEED: u64 = 7;

impl ExperimentConfig {
    /// Settings used for the desk grid: default training schedule, shorter
    /// windows. A 20-step horizon keeps the lag between a disturbance onset
    /// and the first window whose input sees it short.
    pub fn desk() -> Self {
        Self {
            seed: DESK_SEED,
            w: 20,
            h: 20,
            train_stride: 20,
            train: TrainConfig {
                seed: DESK_SEED,
                ..TrainConfig::default()
            },
            ..Self::default()
        }
    }
}

/// A model with everything needed to score traces.
#[derive(Debug, Clone)]
pub struct PreparedDetector {
    pub model: DtModel,
    pub schema: FeatureSchema,
    pub normalizer: Normalizer,
    pub thresholds: Thresholds,
    /// `mu + k sigma` of baseline RMSE on the calibration windows.
    pub baseline_threshold: f64,
    /// Present when the model was trained in this run.
    pub history: Option<TrainHistory>,
    /// Fraction of calibration windows whose recon error exceeds `tau_recon`.
    pub calibration_flag_rate: f64,
}

fn normalized(norm: &Normalizer, traces: &[MultivariateSeries]) -> Result<Vec<MultivariateSeries>> {
    traces.iter().map(|t| norm.normalize(t)).collect()
}

fn windows_of(
    traces: &[MultivariateSeries],
    w: usize,
    h: usize,
    stride: usize,
) -> Result<Vec<WindowPair>> {
    let mut out = Vec::new();
    for t in traces {
        out.extend(make_windows(t, w, h, stride)?);
    }
    Ok(out)
}

/// Trains (or loads) the model and calibrates both detectors.
pub fn prepare_detector(
    spec: &DetectorSpec,
    cfg: &ExperimentConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<PreparedDetector> {
    if spec.calibration.is_empty() {
        return Err(Error::invalid(format!(
            "detector {}: no calibration traces",
            spec.name
        )));
    }
    let (model, schema, normalizer, history) = match &spec.source {
        ModelSource::Train(traces) => {
            if traces.is_empty() {
                return Err(Error::invalid(format!(
                    "detector {}: no training traces",
                    spec.name
                )));
            }
            let schema = traces[0].schema().clone();
            let normalizer = fit_normalizer_many(traces)?;
            let train = windows_of(
                &normalized(&normalizer, traces)?,
                cfg.w,
                cfg.h,
                cfg.train_stride,
            )?;
            let val = windows_of(
                &normalized(&normalizer, &spec.calibration)?,
                cfg.w,
                cfg.h,
                cfg.h,
            )?;
            let mc = spec
                .model
                .clone()
                .unwrap_or_else(|| spec.profile.model_config(cfg.w, cfg.h, schema.len()));
            let model = DtModel::new(mc, subseed(cfg.seed, &format!("model/{}", spec.name)))?;
            let tc = TrainConfig {
                seed: subseed(cfg.seed, &format!("train/{}", spec.name)),
                ..cfg.train.clone()
            };
            let (model, history) = train_with(model, &train, &val, &tc, on_epoch)?;
            (model, schema, normalizer, Some(history))
        }
        ModelSource::Checkpoint(path) => {
            let ck = load_checkpoint(path)
                .map_err(|e| Error::invalid(format!("detector {}: {e}", spec.name)))?;
            (ck.model, ck.schema, ck.normalizer, None)
        }
    };
    let (w, h) = (model.config().w, model.config().h);
    let calib = windows_of(&normalized(&normalizer, &spec.calibration)?, w, h, h)?;
    let mc_seed = subseed(cfg.seed, &format!("calibrate/{}", spec.name));
    let (thresholds, scores) = calibrate(&model, &calib, cfg.k, cfg.n_passes, mc_seed)?;
    let base = baseline_rmse_scores(&model, &calib)?;
    let (mu, sigma) = mean_std(&base)?;
    let flagged = scores
        .iter()
        .filter(|s| s.recon_error > thresholds.tau_recon)
        .count();
    Ok(PreparedDetector {
        model,
        schema,
        normalizer,
        thresholds,
        baseline_threshold: mu + cfg.k * sigma,
        history,
        calibration_flag_rate: flagged as f64 / scores.len() as f64,
    })
}

/// Window scores of both detectors on one set of test traces.
#[derive(Debug, Clone, PartialEq)]
pub struct CellScores {
    pub odisar: Vec<LabeledScore>,
    pub baseline: Vec<LabeledScore>,
}

pub fn score_traces(
    det: &PreparedDetector,
    traces: &[LabeledTrace],
    n_passes: usize,
    seed: u64,
) -> Result<CellScores> {
    let (w, h) = (det.model.config().w, det.model.config().h);
    let mut odisar = Vec::new();
    let mut baseline = Vec::new();
    for (ti, trace) in traces.iter().enumerate() {
        if trace.series.schema() != &det.schema {
            return Err(Error::invalid(format!(
                "trace {} does not match the detector's feature schema",
                trace.scenario
            )));
        }
        let series = det.normalizer.normalize(&trace.series)?;
        let detections = detect_series(
            &det.model,
            &det.thresholds,
            &series,
            n_passes,
            subseed(seed, &format!("trace/{ti}")),
        )?;
        let windows = make_windows(&series, w, h, h)?;
        let spans: Vec<(usize, usize)> = detections
            .iter()
            .map(|d| (d.verdict.start_time_step, d.verdict.end_time_step))
            .collect();
        let truth = label_windows(&spans, trace.ood_interval);
        let base = baseline_rmse_scores(&det.model, &windows)?;
        for ((d, t), b) in detections.iter().zip(truth).zip(base) {
            let v = &d.verdict;
            odisar.push(LabeledScore {
                score: v.recon_error,
                is_ood_truth: t,
                start_time_step: v.start_time_step,
                end_time_step: v.end_time_step,
            });
            baseline.push(LabeledScore {
                score: b,
                is_ood_truth: t,
                start_time_step: v.start_time_step,
                end_time_step: v.end_time_step,
            });
        }
    }
    Ok(CellScores { odisar, baseline })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub cell: String,
    pub odisar: MetricsReport,
    pub baseline: MetricsReport,
    pub n_windows: usize,
    pub n_ood: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocRow {
    pub cell: String,
    pub detector: String,
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, Default)]
pub struct ExperimentReport {
    pub cells: Vec<CellReport>,
    pub roc: Vec<RocRow>,
    pub detectors: BTreeMap<String, PreparedDetector>,
}

pub const REPORT_COLUMNS: [&str; 8] = [
    "odisar_auroc",
    "odisar_tnr_at_tpr95",
    "odisar_f1_ind",
    "odisar_f1_ood",
    "baseline_auroc",
    "baseline_tnr_at_tpr95",
    "baseline_f1_ind",
    "baseline_f1_ood",
];

impl ExperimentReport {
    pub fn write_report_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let io = |e| Error::io(path, e);
        let mut out = BufWriter::new(File::create(path).map_err(io)?);
        writeln!(out, "cell,{},n_windows,n_ood", REPORT_COLUMNS.join(",")).map_err(io)?;
        for c in &self.cells {
            let (o, b) = (&c.odisar, &c.baseline);
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                c.cell,
                o.auroc,
                o.tnr_at_tpr95,
                o.f1_ind,
                o.f1_ood,
                b.auroc,
                b.tnr_at_tpr95,
                b.f1_ind,
                b.f1_ood,
                c.n_windows,
                c.n_ood
            )
            .map_err(io)?;
        }
        out.flush().map_err(io)
    }

    pub fn write_roc_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let io = |e| Error::io(path, e);
        let mut out = BufWriter::new(File::create(path).map_err(io)?);
        writeln!(out, "cell,detector,threshold,fpr,tpr").map_err(io)?;
        for r in &self.roc {
            writeln!(
                out,
                "{},{},{},{},{}",
                r.cell, r.detector, r.threshold, r.fpr, r.tpr
            )
            .map_err(io)?;
        }
        out.flush().map_err(io)
    }

    /// Fixed-width table of the report, percentages with two decimals.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<28} {:>8} {:>8} {:>8} {:>8} | {:>8} {:>8} {:>8} {:>8}",
            "cell", "AUROC", "TNR@95", "F1 IND", "F1 OOD", "AUROC", "TNR@95", "F1 IND", "F1 OOD"
        );
        let _ = writeln!(s, "{:<28} {:^35} | {:^35}", "", "ODiSAR", "RMSE baseline");
        for c in &self.cells {
            let pct = |x: f64| format!("{:.2}", 100.0 * x);
            let (o, b) = (&c.odisar, &c.baseline);
            let _ = writeln!(
                s,
                "{:<28} {:>8} {:>8} {:>8} {:>8} | {:>8} {:>8} {:>8} {:>8}",
                c.cell,
                pct(o.auroc),
                pct(o.tnr_at_tpr95),
                pct(o.f1_ind),
                pct(o.f1_ood),
                pct(b.auroc),
                pct(b.tnr_at_tpr95),
                pct(b.f1_ind),
                pct(b.f1_ood)
            );
        }
        s
    }
}

/// Progress events emitted while a grid runs.
pub enum Progress<'a> {
    Epoch {
        detector: &'a str,
        record: &'a EpochRecord,
    },
    Detector {
        detector: &'a str,
        prepared: &'a PreparedDetector,
    },
    Cell(&'a CellReport),
}

/// Prepares every detector once, then scores each cell's test traces.
pub fn run_experiment(
    detectors: &[DetectorSpec],
    cells: &[CellSpec],
    cfg: &ExperimentConfig,
    progress: &mut dyn FnMut(Progress<'_>),
) -> Result<ExperimentReport> {
    let mut report = ExperimentReport::default();
    for cell in cells {
        if !detectors.iter().any(|d| d.name == cell.detector) {
            return Err(Error::Cell {
                cell: cell.name.clone(),
                message: format!("no detector named {:?}", cell.detector),
            });
        }
        if cell.test.is_empty() {
            return Err(Error::Cell {
                cell: cell.name.clone(),
                message: "no test traces".into(),
            });
        }
    }
    for spec in detectors {
        if !cells.iter().any(|c| c.detector == spec.name) {
            continue;
        }
        let prepared = prepare_detector(spec, cfg, &mut |r| {
            progress(Progress::Epoch {
                detector: &spec.name,
                record: r,
            })
        })
        .map_err(|e| {
            let cell = cells
                .iter()
                .filter(|c| c.detector == spec.name)
                .map(|c| c.name.as_str())
                .collect::<Vec<_>>()
                .join(", ");
            Error::Cell {
                cell,
                message: e.to_string(),
            }
        })?;
        progress(Progress::Detector {
            detector: &spec.name,
            prepared: &prepared,
        });
        report.detectors.insert(spec.name.clone(), prepared);
    }
    for cell in cells {
        let det = &report.detectors[&cell.detector];
        let cell_err = |e: Error| Error::Cell {
            cell: cell.name.clone(),
            message: e.to_string(),
        };
        let scores = score_traces(
            det,
            &cell.test,
            cfg.n_passes,
            subseed(cfg.seed, &format!("detect/{}", cell.name)),
        )
        .map_err(cell_err)?;
        let odisar = metrics_at(&scores.odisar, det.thresholds.tau_recon).map_err(cell_err)?;
        let baseline = metrics_at(&scores.baseline, det.baseline_threshold).map_err(cell_err)?;
        for (name, s) in [("odisar", &scores.odisar), ("baseline", &scores.baseline)] {
            for p in roc_points(s).map_err(cell_err)? {
                report.roc.push(RocRow {
                    cell: cell.name.clone(),
                    detector: name.to_string(),
                    threshold: p.threshold,
                    fpr: p.fpr,
                    tpr: p.tpr,
                });
            }
        }
        let row = CellReport {
            cell: cell.name.clone(),
            odisar,
            baseline,
            n_windows: scores.odisar.len(),
            n_ood: scores.odisar.iter().filter(|s| s.is_ood_truth).count(),
        };
        progress(Progress::Cell(&row));
        report.cells.push(row);
    }
    Ok(report)
}

/// Number of independent robot runs per split in the desk grid.
const ROBOT_RUNS: u64 = 6;

fn vessel_variants() -> Vec<Maneuver> {
    ["zigzag", "turning", "random"]
        .iter()
        .flat_map(|k| Maneuver::variants(k).expect("known maneuver"))
        .collect()
}

fn vessel_traces(
    split: &str,
    case: DisturbanceCase,
    maneuvers: &[Maneuver],
    seed: u64,
) -> Result<Vec<LabeledTrace>> {
    maneuvers
        .iter()
        .enumerate()
        .map(|(i, &m)| {
            gen_vessel(&VesselScenario::new(
                m,
                case,
                subseed(seed, &format!("vessel/{split}/{}/{i}", case.name())),
            ))
        })
        .collect()
}

fn robot_traces(split: &str, noise: NoiseSigma, seed: u64) -> Result<Vec<LabeledTrace>> {
    (0..ROBOT_RUNS)
        .map(|i| {
            let s = subseed(seed, &format!("robot/{split}/{i}"));
            gen_robot(&RobotScenario {
                noise_sigma: noise,
                ..RobotScenario::new(sample_waypoints(5, 8.0, s), s)
            })
        })
        .collect()
}

/// The desk-scale grid: one vessel detector trained on clean runs of every
/// maneuver, evaluated on 3 disturbance cases x 3 maneuver families, plus one
/// robot detector evaluated on the odometry-noise scenario. Every trace is
/// generated from `seed`.
pub fn desk_grid(seed: u64) -> Result<(Vec<DetectorSpec>, Vec<CellSpec>)> {
    let all = vessel_variants();
    let series = |t: Vec<LabeledTrace>| t.into_iter().map(|t| t.series).collect::<Vec<_>>();
    let vessel = DetectorSpec {
        name: "vessel".into(),
        profile: Profile::Vessel,
        model: None,
        source: ModelSource::Train(series(vessel_traces(
            "train",
            DisturbanceCase::None,
            &all,
            seed,
        )?)),
        calibration: series(vessel_traces(
            "calibration",
            DisturbanceCase::None,
            &all,
            seed,
        )?),
    };
    let robot = DetectorSpec {
        name: "robot".into(),
        profile: Profile::Robot,
        model: None,
        source: ModelSource::Train(series(robot_traces("train", NoiseSigma::ZERO, seed)?)),
        calibration: series(robot_traces("calibration", NoiseSigma::ZERO, seed)?),
    };
    let mut cells = Vec::new();
    for case in [
        DisturbanceCase::Case1,
        DisturbanceCase::Case2,
        DisturbanceCase::Case3,
    ] {
        for kind in ["zigzag", "turning", "random"] {
            let maneuvers = Maneuver::variants(kind)?;
            cells.push(CellSpec {
                name: format!("vessel/{}/{kind}", case.name()),
                detector: "vessel".into(),
                test: vessel_traces(&format!("test/{kind}"), case, &maneuvers, seed)?,
            });
        }
    }
    cells.push(CellSpec {
        name: "robot/waypoints".into(),
        detector: "robot".into(),
        test: robot_traces("test", NoiseSigma::default(), seed)?,
    });
    Ok((vec![vessel, robot], cells))
}
