//! Multivariate state traces: schema, CSV ingestion, z-score normalization
//! and sliding-window construction.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{s, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Matrix = Array2<f64>;

/// Ordered, uniquely named feature columns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSchema {
    names: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    units: Vec<Option<String>>,
}

impl FeatureSchema {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(Error::invalid("feature schema needs at least one feature"));
        }
        let mut seen = HashSet::new();
        for n in &names {
            if n.trim().is_empty() {
                return Err(Error::invalid("feature names must be non-empty"));
            }
            if !seen.insert(n.as_str()) {
                return Err(Error::invalid(format!("duplicate feature name {n:?}")));
            }
        }
        Ok(Self {
            names,
            units: Vec::new(),
        })
    }

    pub fn with_units<S: Into<String>>(
        mut self,
        units: impl IntoIterator<Item = Option<S>>,
    ) -> Result<Self> {
        let units: Vec<Option<String>> = units.into_iter().map(|u| u.map(Into::into)).collect();
        if units.len() != self.names.len() {
            return Err(Error::shape(
                format!("{} units", self.names.len()),
                format!("{} units", units.len()),
            ));
        }
        self.units = units;
        Ok(self)
    }

    /// Vessel motion states.
    pub fn vessel() -> Self {
        Self::new([
            "Surge Speed",
            "Sway Speed",
            "Yaw Rate",
            "Roll Angle",
            "Roll Rate",
        ])
        .expect("static schema")
    }

    /// Planar robot pose plus odometry velocities.
    pub fn robot() -> Self {
        Self::new(["x", "y", "theta", "v", "omega"]).expect("static schema")
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn unit(&self, i: usize) -> Option<&str> {
        self.units.get(i).and_then(|u| u.as_deref())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// A uniformly sampled `T x D` trace.
#[derive(Debug, Clone, PartialEq)]
pub struct MultivariateSeries {
    schema: FeatureSchema,
    sample_rate_hz: f64,
    values: Matrix,
    origin_timestep: usize,
}

impl MultivariateSeries {
    pub fn new(schema: FeatureSchema, sample_rate_hz: f64, values: Matrix) -> Result<Self> {
        Self::with_origin(schema, sample_rate_hz, values, 0)
    }

    pub fn with_origin(
        schema: FeatureSchema,
        sample_rate_hz: f64,
        values: Matrix,
        origin_timestep: usize,
    ) -> Result<Self> {
        if !(sample_rate_hz.is_finite() && sample_rate_hz > 0.0) {
            return Err(Error::invalid(format!(
                "sample rate must be positive, got {sample_rate_hz}"
            )));
        }
        if values.ncols() != schema.len() {
            return Err(Error::shape(
                format!("{} columns", schema.len()),
                format!("{} columns", values.ncols()),
            ));
        }
        if values.nrows() == 0 {
            return Err(Error::invalid("series must have at least one row"));
        }
        if let Some(((r, c), v)) = values.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite value {v} at row {r}, column {:?}",
                schema.names[c]
            )));
        }
        Ok(Self {
            schema,
            sample_rate_hz,
            values,
            origin_timestep,
        })
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    pub fn sample_rate_hz(&self) -> f64 {
        self.sample_rate_hz
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn origin_timestep(&self) -> usize {
        self.origin_timestep
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn n_features(&self) -> usize {
        self.values.ncols()
    }

    /// Writes the series as CSV (header row + one sample per row). Values
    /// use Rust's shortest round-trip formatting, so reading back is exact.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        writeln!(out, "{}", self.schema.names.join(",")).map_err(io)?;
        for row in self.values.rows() {
            let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            writeln!(out, "{}", line.join(",")).map_err(io)?;
        }
        out.flush().map_err(io)
    }
}

/// Reads only the header row of a CSV trace.
pub fn read_csv_header(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| parse_err(path, e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| parse_err(path, e.to_string()))?;
    Ok(headers.iter().map(|h| h.trim().to_string()).collect())
}

fn parse_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Loads a CSV trace, matching header names to `schema` irrespective of
/// column order. Extra columns are ignored.
pub fn load_csv(
    path: impl AsRef<Path>,
    schema: &FeatureSchema,
    sample_rate_hz: f64,
) -> Result<MultivariateSeries> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => parse_err(path, format!("cannot open: {e}")),
            _ => parse_err(path, e.to_string()),
        })?;
    let headers = reader
        .headers()
        .map_err(|e| parse_err(path, e.to_string()))?
        .clone();
    if headers.is_empty() || headers.iter().all(|h| h.is_empty()) {
        return Err(parse_err(path, "empty file: no header row"));
    }
    let mut columns = Vec::with_capacity(schema.len());
    for name in schema.names() {
        let idx = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn {
                path: path.to_path_buf(),
                column: name.clone(),
            })?;
        columns.push(idx);
    }

    let mut flat = Vec::new();
    let mut rows = 0usize;
    for (i, record) in reader.records().enumerate() {
        // data rows are numbered from 1; the header is row 0
        let row = i + 1;
        let record = record.map_err(|e| parse_err(path, format!("row {row}: {e}")))?;
        for (&idx, name) in columns.iter().zip(schema.names()) {
            let cell = record.get(idx).ok_or_else(|| {
                parse_err(path, format!("row {row}: missing cell for column {name:?}"))
            })?;
            let v: f64 = cell.parse().map_err(|_| {
                parse_err(
                    path,
                    format!("row {row}, column {name:?}: non-numeric value {cell:?}"),
                )
            })?;
            if !v.is_finite() {
                return Err(parse_err(
                    path,
                    format!("row {row}, column {name:?}: non-finite value {cell:?}"),
                ));
            }
            flat.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(parse_err(path, "empty file: no data rows"));
    }
    let values = Array2::from_shape_vec((rows, schema.len()), flat).expect("row-major fill");
    MultivariateSeries::new(schema.clone(), sample_rate_hz, values)
}

/// Per-feature z-score transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn n_features(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize_matrix(&self, m: &Matrix) -> Result<Matrix> {
        self.check(m.ncols())?;
        let mut out = m.clone();
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[j]) / self.std[j];
            }
        }
        Ok(out)
    }

    pub fn denormalize_matrix(&self, m: &Matrix) -> Result<Matrix> {
        self.check(m.ncols())?;
        let mut out = m.clone();
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = *v * self.std[j] + self.mean[j];
            }
        }
        Ok(out)
    }

    pub fn normalize(&self, series: &MultivariateSeries) -> Result<MultivariateSeries> {
        let values = self.normalize_matrix(series.values())?;
        MultivariateSeries::with_origin(
            series.schema.clone(),
            series.sample_rate_hz,
            values,
            series.origin_timestep,
        )
    }

    pub fn denormalize(&self, series: &MultivariateSeries) -> Result<MultivariateSeries> {
        let values = self.denormalize_matrix(series.values())?;
        MultivariateSeries::with_origin(
            series.schema.clone(),
            series.sample_rate_hz,
            values,
            series.origin_timestep,
        )
    }

    fn check(&self, d: usize) -> Result<()> {
        if d != self.mean.len() {
            return Err(Error::shape(
                format!("{} features", self.mean.len()),
                format!("{d} features"),
            ));
        }
        Ok(())
    }
}

/// Fits per-column sample mean and sample standard deviation (ddof = 1).
pub fn fit_normalizer(series: &MultivariateSeries) -> Result<Normalizer> {
    fit_normalizer_many(std::slice::from_ref(series))
}

/// Fits one normalizer over the rows of several traces sharing a schema.
pub fn fit_normalizer_many(series: &[MultivariateSeries]) -> Result<Normalizer> {
    let first = series
        .first()
        .ok_or_else(|| Error::invalid("no series to fit a normalizer on"))?;
    let d = first.n_features();
    for s in series {
        if s.schema() != first.schema() {
            return Err(Error::invalid(
                "series passed to the normalizer disagree on schema",
            ));
        }
    }
    let n: usize = series.iter().map(|s| s.len()).sum();
    if n < 2 {
        return Err(Error::invalid("need at least 2 rows to fit a normalizer"));
    }
    let mut mean = vec![0.0; d];
    for s in series {
        for (j, col) in s.values().axis_iter(Axis(1)).enumerate() {
            mean[j] += col.sum();
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut ss = vec![0.0; d];
    for s in series {
        for (j, col) in s.values().axis_iter(Axis(1)).enumerate() {
            ss[j] += col.iter().map(|v| (v - mean[j]).powi(2)).sum::<f64>();
        }
    }
    let mut std = Vec::with_capacity(d);
    for (j, s) in ss.iter().enumerate() {
        let sd = (s / (n - 1) as f64).sqrt();
        // relative guard: a column whose spread is lost in rounding noise is constant
        if !(sd > 1e-12 * mean[j].abs().max(1e-300)) || sd == 0.0 {
            return Err(Error::DegenerateFeature {
                feature: first.schema().names()[j].clone(),
            });
        }
        std.push(sd);
    }
    Ok(Normalizer { mean, std })
}

/// One `(past w steps, next h steps)` sample.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowPair {
    pub input: Matrix,
    pub target: Matrix,
    /// Absolute timestep of the first input row.
    pub start_step: usize,
    /// Absolute timestep of the last forecast row.
    pub end_step: usize,
}

impl WindowPair {
    pub fn w(&self) -> usize {
        self.input.nrows()
    }

    pub fn h(&self) -> usize {
        self.target.nrows()
    }

    /// Absolute timestep of the first forecast row.
    pub fn forecast_start(&self) -> usize {
        self.start_step + self.w()
    }
}

/// Number of windows `make_windows` yields.
pub fn window_count(t: usize, w: usize, h: usize, stride: usize) -> usize {
    if t < w + h || stride == 0 {
        0
    } else {
        (t - w - h) / stride + 1
    }
}

/// Slices `(input, target)` pairs at offsets `0, stride, 2*stride, ...`.
pub fn make_windows(
    series: &MultivariateSeries,
    w: usize,
    h: usize,
    stride: usize,
) -> Result<Vec<WindowPair>> {
    if w == 0 || h == 0 || stride == 0 {
        return Err(Error::invalid(format!(
            "window size, horizon and stride must be >= 1 (got w={w}, h={h}, stride={stride})"
        )));
    }
    let t = series.len();
    if t < w + h {
        return Err(Error::SeriesTooShort {
            required: w + h,
            found: t,
        });
    }
    let v = series.values();
    let origin = series.origin_timestep();
    Ok((0..window_count(t, w, h, stride))
        .map(|i| {
            let off = i * stride;
            WindowPair {
                input: v.slice(s![off..off + w, ..]).to_owned(),
                target: v.slice(s![off + w..off + w + h, ..]).to_owned(),
                start_step: origin + off,
                end_step: origin + off + w + h - 1,
            }
        })
        .collect())
}

/// Chronological train/val/test split: `floor(n * train_frac)` windows to
/// train, `floor(n * val_frac)` to validation, the remainder to test.
pub fn split_chrono(
    mut windows: Vec<WindowPair>,
    train_frac: f64,
    val_frac: f64,
) -> Result<(Vec<WindowPair>, Vec<WindowPair>, Vec<WindowPair>)> {
    if !(train_frac > 0.0 && val_frac > 0.0 && train_frac + val_frac < 1.0) {
        return Err(Error::invalid(format!(
            "split fractions must satisfy 0 < train, 0 < val, train + val < 1 (got {train_frac}, {val_frac})"
        )));
    }
    windows.sort_by_key(|w| w.start_step);
    let n = windows.len() as f64;
    let n_train = (n * train_frac + 1e-9).floor() as usize;
    let n_val = (n * val_frac + 1e-9).floor() as usize;
    let test = windows.split_off(n_train + n_val);
    let val = windows.split_off(n_train);
    Ok((windows, val, test))
}
