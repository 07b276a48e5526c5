//! Monte-Carlo dropout scoring, threshold calibration and the four-quadrant
//! window classification.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dtm::loss::mean_step_sq_norm;
use crate::dtm::{DtModel, Mode};
use crate::error::{Error, Result};
use crate::rng::stream;
use crate::timeseries::{make_windows, Matrix, MultivariateSeries, WindowPair};

pub const DEFAULT_PASSES: usize = 30;
pub const DEFAULT_K: f64 = 3.0;

/// Stochastic forecasts of one window plus the dropout-free forecast and
/// reconstruction.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastEnsemble {
    pub passes: Vec<Matrix>,
    pub mean: Matrix,
    /// Per-element population variance across passes (divides by N).
    pub variance: Matrix,
    pub deterministic_forecast: Matrix,
    pub deterministic_recon: Matrix,
}

impl ForecastEnsemble {
    pub fn from_passes(
        passes: Vec<Matrix>,
        deterministic_forecast: Matrix,
        deterministic_recon: Matrix,
    ) -> Result<Self> {
        if passes.len() < 2 {
            return Err(Error::invalid(format!(
                "variance needs at least 2 passes, got {}",
                passes.len()
            )));
        }
        let dim = deterministic_forecast.dim();
        if deterministic_recon.dim() != dim {
            return Err(Error::shape(
                format!("{dim:?}"),
                format!("{:?}", deterministic_recon.dim()),
            ));
        }
        if let Some(p) = passes.iter().find(|p| p.dim() != dim) {
            return Err(Error::shape(format!("{dim:?}"), format!("{:?}", p.dim())));
        }
        // Two-pass on data shifted by the first pass: identical passes give
        // exactly zero variance instead of rounding residue.
        let n = passes.len() as f64;
        let origin = &passes[0];
        let mut shift = Array2::zeros(dim);
        for p in &passes {
            shift += &(p - origin);
        }
        shift /= n;
        let mut variance = Array2::zeros(dim);
        for p in &passes {
            let d = &(p - origin) - &shift;
            variance += &(&d * &d);
        }
        variance /= n;
        let mean = origin + &shift;
        Ok(Self {
            passes,
            mean,
            variance,
            deterministic_forecast,
            deterministic_recon,
        })
    }
}

/// MC-dropout ensemble for a single input window. Pass `n` draws its masks
/// from `(seed, "mc", [0, n])`.
pub fn mc_forecast(
    model: &DtModel,
    x: &Matrix,
    n_passes: usize,
    seed: u64,
) -> Result<ForecastEnsemble> {
    mc_forecast_indexed(model, x, n_passes, seed, 0)
}

/// As [`mc_forecast`], with the window index folded into every pass stream so
/// windows can be scored in any order.
pub fn mc_forecast_indexed(
    model: &DtModel,
    x: &Matrix,
    n_passes: usize,
    seed: u64,
    window: u64,
) -> Result<ForecastEnsemble> {
    if n_passes < 2 {
        return Err(Error::invalid(format!(
            "n_passes must be >= 2, got {n_passes}"
        )));
    }
    let det = model.forward(x, Mode::Eval)?;
    let passes = (0..n_passes)
        .map(|n| {
            let mut rng = stream(seed, "mc", &[window, n as u64]);
            model.forward(x, Mode::Mc(&mut rng)).map(|f| f.forecast)
        })
        .collect::<Result<Vec<_>>>()?;
    ForecastEnsemble::from_passes(passes, det.forecast, det.recon)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowScores {
    pub recon_error: f64,
    pub variance_score: f64,
}

/// Reconstruction error of the deterministic pass and the mean MC variance.
pub fn window_scores(ens: &ForecastEnsemble) -> Result<WindowScores> {
    Ok(WindowScores {
        recon_error: mean_step_sq_norm(&ens.deterministic_recon, &ens.deterministic_forecast)?,
        variance_score: ens.variance.mean().unwrap_or(0.0),
    })
}

/// Scores each window's input; window `i` uses pass streams `(seed, "mc", [i, n])`.
pub fn score_windows(
    model: &DtModel,
    windows: &[WindowPair],
    n_passes: usize,
    seed: u64,
) -> Result<Vec<WindowScores>> {
    windows
        .iter()
        .enumerate()
        .map(|(i, w)| {
            window_scores(&mc_forecast_indexed(
                model, &w.input, n_passes, seed, i as u64,
            )?)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub mu_recon: f64,
    pub sigma_recon: f64,
    pub tau_recon: f64,
    pub mu_var: f64,
    pub sigma_var: f64,
    pub tau_var: f64,
    pub k: f64,
}

/// Sample mean and sample standard deviation (ddof = 1).
pub fn mean_std(xs: &[f64]) -> Result<(f64, f64)> {
    if xs.len() < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 scores for a standard deviation, got {}",
            xs.len()
        )));
    }
    let n = xs.len() as f64;
    let mu = xs.iter().sum::<f64>() / n;
    let ss = xs.iter().map(|x| (x - mu).powi(2)).sum::<f64>();
    Ok((mu, (ss / (n - 1.0)).sqrt()))
}

impl Thresholds {
    /// `tau = mu + k * sigma` for both scores.
    pub fn from_scores(scores: &[WindowScores], k: f64) -> Result<Self> {
        if !(k > 0.0 && k.is_finite()) {
            return Err(Error::invalid(format!("k must be positive, got {k}")));
        }
        let recon: Vec<f64> = scores.iter().map(|s| s.recon_error).collect();
        let var: Vec<f64> = scores.iter().map(|s| s.variance_score).collect();
        let (mu_recon, sigma_recon) = mean_std(&recon)?;
        let (mu_var, sigma_var) = mean_std(&var)?;
        Ok(Self {
            mu_recon,
            sigma_recon,
            tau_recon: mu_recon + k * sigma_recon,
            mu_var,
            sigma_var,
            tau_var: mu_var + k * sigma_var,
            k,
        })
    }

    /// Same statistics with a different sensitivity.
    pub fn with_k(&self, k: f64) -> Self {
        Self {
            tau_recon: self.mu_recon + k * self.sigma_recon,
            tau_var: self.mu_var + k * self.sigma_var,
            k,
            ..*self
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("thresholds serialize");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let t: Thresholds = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        if !(t.sigma_recon >= 0.0 && t.sigma_var >= 0.0) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                message: "thresholds have a negative sigma".into(),
            });
        }
        Ok(t)
    }
}

/// Scores the (in-distribution) validation windows and derives thresholds.
pub fn calibrate(
    model: &DtModel,
    validation: &[WindowPair],
    k: f64,
    n_passes: usize,
    seed: u64,
) -> Result<(Thresholds, Vec<WindowScores>)> {
    if validation.len() < 2 {
        return Err(Error::invalid(format!(
            "calibration needs at least 2 validation windows, got {}",
            validation.len()
        )));
    }
    if !(k > 0.0 && k.is_finite()) {
        return Err(Error::invalid(format!("k must be positive, got {k}")));
    }
    let scores = score_windows(model, validation, n_passes, seed)?;
    Ok((Thresholds::from_scores(&scores, k)?, scores))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Category {
    #[serde(rename = "IND_Confident")]
    IndConfident,
    #[serde(rename = "IND_Uncertain")]
    IndUncertain,
    #[serde(rename = "OOD_Uncertain")]
    OodUncertain,
    #[serde(rename = "OOD_Confident")]
    OodConfident,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category::IndConfident,
        Category::IndUncertain,
        Category::OodUncertain,
        Category::OodConfident,
    ];

    pub fn from_flags(recon_exceeds: bool, var_exceeds: bool) -> Self {
        match (recon_exceeds, var_exceeds) {
            (false, false) => Category::IndConfident,
            (false, true) => Category::IndUncertain,
            (true, true) => Category::OodUncertain,
            (true, false) => Category::OodConfident,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::IndConfident => "IND_Confident",
            Category::IndUncertain => "IND_Uncertain",
            Category::OodUncertain => "OOD_Uncertain",
            Category::OodConfident => "OOD_Confident",
        }
    }

    pub fn is_ood(self) -> bool {
        matches!(self, Category::OodUncertain | Category::OodConfident)
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowVerdict {
    pub sequence_index: usize,
    /// First forecast step.
    pub start_time_step: usize,
    /// Last forecast step (inclusive).
    pub end_time_step: usize,
    pub recon_error: f64,
    pub variance_score: f64,
    pub recon_exceeds: bool,
    pub var_exceeds: bool,
    pub is_ood: bool,
    pub category: Category,
}

/// Strict comparison: a score equal to its threshold does not exceed it.
pub fn classify(
    sequence_index: usize,
    start_time_step: usize,
    end_time_step: usize,
    scores: WindowScores,
    th: &Thresholds,
) -> WindowVerdict {
    let recon_exceeds = scores.recon_error > th.tau_recon;
    let var_exceeds = scores.variance_score > th.tau_var;
    WindowVerdict {
        sequence_index,
        start_time_step,
        end_time_step,
        recon_error: scores.recon_error,
        variance_score: scores.variance_score,
        recon_exceeds,
        var_exceeds,
        is_ood: recon_exceeds,
        category: Category::from_flags(recon_exceeds, var_exceeds),
    }
}

/// Optional single ranking score `max(recon / tau_recon, var / tau_var)`.
pub fn combined_score(scores: WindowScores, th: &Thresholds) -> f64 {
    let ratio = |s: f64, t: f64| {
        if t > 0.0 {
            s / t
        } else if s > 0.0 {
            f64::INFINITY
        } else {
            0.0
        }
    };
    ratio(scores.recon_error, th.tau_recon).max(ratio(scores.variance_score, th.tau_var))
}

/// A verdict with the deterministic forecast and reconstruction behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub verdict: WindowVerdict,
    pub forecast: Matrix,
    pub recon: Matrix,
}

/// Scores consecutive windows at stride `h` over a normalized series.
pub fn detect_series(
    model: &DtModel,
    thresholds: &Thresholds,
    series: &MultivariateSeries,
    n_passes: usize,
    seed: u64,
) -> Result<Vec<Detection>> {
    let (w, h) = (model.config().w, model.config().h);
    let windows = make_windows(series, w, h, h)?;
    windows
        .iter()
        .enumerate()
        .map(|(i, win)| {
            let ens = mc_forecast_indexed(model, &win.input, n_passes, seed, i as u64)?;
            let verdict = classify(
                i,
                win.forecast_start(),
                win.end_step,
                window_scores(&ens)?,
                thresholds,
            );
            Ok(Detection {
                verdict,
                forecast: ens.deterministic_forecast,
                recon: ens.deterministic_recon,
            })
        })
        .collect()
}

/// `sequence_index,start,end,recon_error,variance_score,category`.
pub fn write_score_csv<'a>(
    verdicts: impl IntoIterator<Item = &'a WindowVerdict>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let mut out = BufWriter::new(File::create(path).map_err(io)?);
    writeln!(
        out,
        "sequence_index,start,end,recon_error,variance_score,category"
    )
    .map_err(io)?;
    for v in verdicts {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            v.sequence_index,
            v.start_time_step,
            v.end_time_step,
            v.recon_error,
            v.variance_score,
            v.category
        )
        .map_err(io)?;
    }
    out.flush().map_err(io)
}
