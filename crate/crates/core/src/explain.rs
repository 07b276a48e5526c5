//! Per-feature attribution of reconstruction error and the JSON detection
//! record.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::de::{MapAccess, Visitor};
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;

use crate::dtc::{Category, WindowVerdict};
use crate::error::{Error, Result};
use crate::timeseries::{FeatureSchema, Matrix};

/// Number of features reported in a record.
pub const TOP_K: usize = 3;

/// JSON Schema every emitted record conforms to.
pub const RECORD_SCHEMA: &str = include_str!("../schema/detection_record.schema.json");

#[derive(Debug, Clone, PartialEq)]
pub struct Attribution {
    /// Per-feature RMSE between reconstruction and forecast, schema order.
    pub rmse: Vec<(String, f64)>,
    /// The largest `min(3, D)` entries, descending; ties keep schema order.
    pub top: Vec<(String, f64)>,
}

/// Feature-wise RMSE over the horizon between `recon` and `forecast`.
pub fn attribute(forecast: &Matrix, recon: &Matrix, schema: &FeatureSchema) -> Result<Attribution> {
    if forecast.dim() != recon.dim() {
        return Err(Error::shape(
            format!("{:?}", forecast.dim()),
            format!("{:?}", recon.dim()),
        ));
    }
    if forecast.ncols() != schema.len() {
        return Err(Error::shape(
            format!("{} features", schema.len()),
            format!("{} columns", forecast.ncols()),
        ));
    }
    let h = forecast.nrows() as f64;
    let rmse: Vec<(String, f64)> = schema
        .names()
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let ss: f64 = forecast
                .column(j)
                .iter()
                .zip(recon.column(j))
                .map(|(f, r)| (r - f).powi(2))
                .sum();
            (name.clone(), (ss / h).sqrt())
        })
        .collect();
    let mut order: Vec<usize> = (0..rmse.len()).collect();
    // stable sort keeps schema order among equal values
    order.sort_by(|&a, &b| rmse[b].1.total_cmp(&rmse[a].1));
    let top = order
        .into_iter()
        .take(TOP_K)
        .map(|i| rmse[i].clone())
        .collect();
    Ok(Attribution { rmse, top })
}

pub fn category_color(category: Category) -> &'static str {
    match category {
        Category::OodConfident => "red",
        Category::OodUncertain => "orange",
        Category::IndUncertain => "yellow",
        Category::IndConfident => "green",
    }
}

pub fn category_from_color(color: &str) -> Option<Category> {
    Category::ALL
        .into_iter()
        .find(|c| category_color(*c) == color)
}

/// Ordered feature -> value map, serialized as a JSON object.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StateAttribution(pub Vec<(String, f64)>);

impl Serialize for StateAttribution {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(self.0.len()))?;
        for (k, v) in &self.0 {
            map.serialize_entry(k, v)?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for StateAttribution {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = StateAttribution;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("an object of feature names to numbers")
            }
            fn visit_map<A: MapAccess<'de>>(
                self,
                mut m: A,
            ) -> std::result::Result<Self::Value, A::Error> {
                let mut out = Vec::new();
                while let Some((k, v)) = m.next_entry::<String, f64>()? {
                    out.push((k, v));
                }
                Ok(StateAttribution(out))
            }
        }
        d.deserialize_map(V)
    }
}

/// One forecast window in the emitted JSON array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    pub sequence_index: usize,
    pub start_time_step: usize,
    pub end_time_step: usize,
    #[serde(rename = "is_OOD")]
    pub is_ood: bool,
    pub reconstruction_error: f64,
    pub uncertainty_variance: f64,
    pub recon_exceeds_threshold: bool,
    pub uncertainty_exceeds_threshold: bool,
    pub category: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state_attribution: Option<StateAttribution>,
}

/// Builds the record for a verdict. The attribution is attached when the
/// window is flagged, or always when `force_attribution` is set.
pub fn to_record(
    verdict: &WindowVerdict,
    attribution: Option<&Attribution>,
    force_attribution: bool,
) -> DetectionRecord {
    let state_attribution = if verdict.recon_exceeds || force_attribution {
        attribution.map(|a| StateAttribution(a.top.clone()))
    } else {
        None
    };
    DetectionRecord {
        sequence_index: verdict.sequence_index,
        start_time_step: verdict.start_time_step,
        end_time_step: verdict.end_time_step,
        is_ood: verdict.is_ood,
        reconstruction_error: verdict.recon_error,
        uncertainty_variance: verdict.variance_score,
        recon_exceeds_threshold: verdict.recon_exceeds,
        uncertainty_exceeds_threshold: verdict.var_exceeds,
        category: category_color(verdict.category).to_string(),
        state_attribution,
    }
}

pub fn records_to_json(records: &[DetectionRecord]) -> String {
    serde_json::to_string_pretty(records).expect("records serialize")
}

/// Writes the records as a pretty-printed JSON array.
pub fn emit_json(records: &[DetectionRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, records_to_json(records) + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<DetectionRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Checks `value` against a JSON Schema using the keywords present in
/// [`RECORD_SCHEMA`]: `type`, `required`, `properties`,
/// `additionalProperties`, `enum`, `minimum`, `minProperties` and
/// `maxProperties`. Returns the first violation found.
pub fn validate_against(value: &Value, schema: &Value) -> std::result::Result<(), String> {
    validate_at(value, schema, "$")
}

/// Validates one record against [`RECORD_SCHEMA`].
pub fn validate_record(value: &Value) -> std::result::Result<(), String> {
    let schema: Value = serde_json::from_str(RECORD_SCHEMA).expect("bundled schema parses");
    validate_against(value, &schema)
}

fn type_matches(value: &Value, ty: &str) -> bool {
    match ty {
        "object" => value.is_object(),
        "array" => value.is_array(),
        "string" => value.is_string(),
        "boolean" => value.is_boolean(),
        "number" => value.is_number(),
        "integer" => value.is_u64() || value.is_i64(),
        "null" => value.is_null(),
        _ => false,
    }
}

fn validate_at(value: &Value, schema: &Value, at: &str) -> std::result::Result<(), String> {
    if let Some(ty) = schema.get("type").and_then(Value::as_str) {
        if !type_matches(value, ty) {
            return Err(format!("{at}: expected {ty}, found {value}"));
        }
    }
    if let Some(allowed) = schema.get("enum").and_then(Value::as_array) {
        if !allowed.contains(value) {
            return Err(format!("{at}: {value} is not one of {allowed:?}"));
        }
    }
    if let (Some(min), Some(x)) = (
        schema.get("minimum").and_then(Value::as_f64),
        value.as_f64(),
    ) {
        if x < min {
            return Err(format!("{at}: {x} is below the minimum {min}"));
        }
    }
    let Some(obj) = value.as_object() else {
        return Ok(());
    };
    if let Some(n) = schema.get("minProperties").and_then(Value::as_u64) {
        if (obj.len() as u64) < n {
            return Err(format!("{at}: fewer than {n} properties"));
        }
    }
    if let Some(n) = schema.get("maxProperties").and_then(Value::as_u64) {
        if obj.len() as u64 > n {
            return Err(format!("{at}: more than {n} properties"));
        }
    }
    if let Some(req) = schema.get("required").and_then(Value::as_array) {
        for key in req.iter().filter_map(Value::as_str) {
            if !obj.contains_key(key) {
                return Err(format!("{at}: missing required field {key:?}"));
            }
        }
    }
    let props = schema.get("properties").and_then(Value::as_object);
    for (key, v) in obj {
        let path = format!("{at}.{key}");
        match props.and_then(|p| p.get(key)) {
            Some(sub) => validate_at(v, sub, &path)?,
            None => match schema.get("additionalProperties") {
                Some(Value::Bool(false)) => return Err(format!("{at}: unexpected field {key:?}")),
                Some(sub @ Value::Object(_)) => validate_at(v, sub, &path)?,
                _ => {}
            },
        }
    }
    Ok(())
}
