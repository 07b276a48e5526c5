//! Synthetic scenario generators: a vessel running zigzag/turning/random
//! maneuvers under ramped environmental disturbances, and a waypoint-following
//! mobile robot with an injected odometry-noise episode.
//!
//! Both are deterministic functions of their scenario (seed included). Every
//! noise channel draws from its own stream derived from `(seed, label,
//! channel)`, so switching a disturbance on never shifts the noise of
//! unrelated channels.

mod robot;
mod vessel;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::timeseries::{load_csv, FeatureSchema, MultivariateSeries};

pub use robot::{gen_robot, sample_waypoints, NoiseSigma, RobotScenario};
pub use vessel::{gen_vessel, DisturbanceCase, Maneuver, RandomIntensity, VesselScenario};

/// A generated trace plus the half-open step interval designated OOD.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledTrace {
    pub series: MultivariateSeries,
    pub ood_interval: Option<(usize, usize)>,
    pub scenario: String,
}

impl LabeledTrace {
    pub fn new(
        series: MultivariateSeries,
        ood_interval: Option<(usize, usize)>,
        scenario: impl Into<String>,
    ) -> Result<Self> {
        if let Some((a, b)) = ood_interval {
            if a >= b || b > series.len() {
                return Err(Error::invalid(format!(
                    "ood interval [{a}, {b}) does not lie within [0, {})",
                    series.len()
                )));
            }
        }
        Ok(Self {
            series,
            ood_interval,
            scenario: scenario.into(),
        })
    }
}

/// Contents of the JSON label sidecar written next to each CSV trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSidecar {
    pub ood_start: Option<usize>,
    pub ood_end: Option<usize>,
    pub sample_rate_hz: f64,
    pub scenario: String,
}

/// `run.csv` -> `run.labels.json`.
pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("labels.json")
}

/// Writes the trace CSV and its label sidecar.
pub fn export_trace(trace: &LabeledTrace, csv_path: impl AsRef<Path>) -> Result<()> {
    let csv_path = csv_path.as_ref();
    trace.series.write_csv(csv_path)?;
    let sidecar = LabelSidecar {
        ood_start: trace.ood_interval.map(|i| i.0),
        ood_end: trace.ood_interval.map(|i| i.1),
        sample_rate_hz: trace.series.sample_rate_hz(),
        scenario: trace.scenario.clone(),
    };
    let path = sidecar_path(csv_path);
    let text = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

pub fn read_sidecar(csv_path: impl AsRef<Path>) -> Result<LabelSidecar> {
    let path = sidecar_path(csv_path.as_ref());
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.clone(),
        message: e.to_string(),
    })
}

/// Loads a CSV trace together with its label sidecar.
pub fn load_trace(csv_path: impl AsRef<Path>, schema: &FeatureSchema) -> Result<LabeledTrace> {
    let csv_path = csv_path.as_ref();
    let sidecar = read_sidecar(csv_path)?;
    let series = load_csv(csv_path, schema, sidecar.sample_rate_hz)?;
    let interval = match (sidecar.ood_start, sidecar.ood_end) {
        (Some(a), Some(b)) => Some((a, b)),
        (None, None) => None,
        _ => {
            return Err(Error::Parse {
                path: sidecar_path(csv_path),
                message: "ood_start and ood_end must both be set or both null".into(),
            })
        }
    };
    LabeledTrace::new(series, interval, sidecar.scenario)
}

/// Mean over features of the ratio between the dispersion (mean absolute
/// deviation about the segment mean) inside the OOD interval and outside it.
/// Returns `None` for traces without an interval.
pub fn disturbance_contrast(trace: &LabeledTrace) -> Option<f64> {
    let (a, b) = trace.ood_interval?;
    let v = trace.series.values();
    let n = v.nrows();
    let mad = |rows: &mut dyn Iterator<Item = usize>, j: usize| -> f64 {
        let xs: Vec<f64> = rows.map(|i| v[[i, j]]).collect();
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        xs.iter().map(|x| (x - m).abs()).sum::<f64>() / xs.len() as f64
    };
    let d = v.ncols();
    let mut total = 0.0;
    for j in 0..d {
        let inside = mad(&mut (a..b), j);
        let outside = mad(&mut (0..a).chain(b..n), j);
        total += inside / outside.max(1e-12);
    }
    Some(total / d as f64)
}
