//! Versioned JSON checkpoint holding the model config, feature schema,
//! normalizer and every parameter tensor with its shape.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::model::{DtModel, ModelConfig};
use crate::error::{Error, Result};
use crate::timeseries::{FeatureSchema, Normalizer};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    config: ModelConfig,
    schema: FeatureSchema,
    normalizer: Normalizer,
    tensors: Vec<TensorRecord>,
}

/// Everything needed to run detection with a trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: DtModel,
    pub schema: FeatureSchema,
    pub normalizer: Normalizer,
}

impl Checkpoint {
    pub fn config(&self) -> &ModelConfig {
        self.model.config()
    }
}

pub fn save_checkpoint(
    model: &DtModel,
    schema: &FeatureSchema,
    normalizer: &Normalizer,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    if schema.len() != model.config().d_features || normalizer.n_features() != schema.len() {
        return Err(Error::shape(
            format!("{} features", model.config().d_features),
            format!(
                "schema {} / normalizer {}",
                schema.len(),
                normalizer.n_features()
            ),
        ));
    }
    let tensors = model
        .named_tensors()
        .into_iter()
        .map(|(name, t)| TensorRecord {
            name,
            rows: t.nrows(),
            cols: t.ncols(),
            data: t.iter().copied().collect(),
        })
        .collect();
    let file = CheckpointFile {
        format_version: CHECKPOINT_FORMAT_VERSION,
        config: model.config().clone(),
        schema: schema.clone(),
        normalizer: normalizer.clone(),
        tensors,
    };
    let text = serde_json::to_string(&file).expect("checkpoint serializes");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |message: String| Error::CorruptCheckpoint {
        expected: CHECKPOINT_FORMAT_VERSION,
        message,
    };
    let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| corrupt(e.to_string()))?;
    match raw.get("format_version") {
        Some(v) if v.as_u64() == Some(CHECKPOINT_FORMAT_VERSION as u64) => {}
        Some(v) => {
            return Err(Error::CheckpointVersion {
                expected: CHECKPOINT_FORMAT_VERSION,
                found: v.to_string(),
            })
        }
        None => {
            return Err(Error::CheckpointVersion {
                expected: CHECKPOINT_FORMAT_VERSION,
                found: "<missing>".to_string(),
            })
        }
    }
    let file: CheckpointFile = serde_json::from_value(raw).map_err(|e| corrupt(e.to_string()))?;

    let mut model = DtModel::new(file.config, 0).map_err(|e| corrupt(e.to_string()))?;
    let expected: Vec<(String, (usize, usize))> = model
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.dim()))
        .collect();
    if expected.len() != file.tensors.len() {
        return Err(corrupt(format!(
            "expected {} tensors, found {}",
            expected.len(),
            file.tensors.len()
        )));
    }
    for ((slot, (name, dim)), rec) in model
        .tensors_mut()
        .into_iter()
        .zip(expected)
        .zip(file.tensors)
    {
        if rec.name != name || (rec.rows, rec.cols) != dim {
            return Err(corrupt(format!(
                "tensor {name} {}x{} does not match stored {} {}x{}",
                dim.0, dim.1, rec.name, rec.rows, rec.cols
            )));
        }
        *slot = Array2::from_shape_vec(dim, rec.data)
            .map_err(|e| corrupt(format!("tensor {name}: {e}")))?;
    }
    if file.schema.len() != model.config().d_features
        || file.normalizer.n_features() != model.config().d_features
    {
        return Err(corrupt(
            "schema/normalizer width disagrees with config".into(),
        ));
    }
    Ok(Checkpoint {
        model,
        schema: file.schema,
        normalizer: file.normalizer,
    })
}
