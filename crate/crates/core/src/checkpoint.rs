//! JSON checkpoints for trained noise predictors.
//!
//! Floats are written with round-trip precision, so a save/load cycle
//! reproduces every parameter bit for bit.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Activation, Dense, EpsModel, TimeEmbedding};
use crate::schedule::ScheduleParams;

pub const FORMAT: &str = "codelab-eps-mlp";
pub const VERSION: u64 = 1;

const LAYER_NAMES: [&str; 3] = ["layer0", "layer1", "layer2"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Row-major `(rows, cols)` weight matrix.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u64,
    pub hidden: usize,
    pub embed: usize,
    pub activation: Activation,
    pub embedding: TimeEmbedding,
    pub schedule: ScheduleParams,
    pub layers: Vec<LayerRecord>,
}

impl Checkpoint {
    pub fn from_model(model: &EpsModel, schedule: ScheduleParams) -> Result<Self> {
        if !model.all_finite() {
            return Err(Error::CheckpointMalformed(
                "refusing to save a model with non-finite parameters".into(),
            ));
        }
        let layers = model
            .layers
            .iter()
            .zip(LAYER_NAMES)
            .map(|(layer, name)| LayerRecord {
                name: name.to_string(),
                rows: layer.outputs(),
                cols: layer.inputs(),
                weight: layer.weight.iter().copied().collect(),
                bias: layer.bias.to_vec(),
            })
            .collect();
        Ok(Self {
            format: FORMAT.to_string(),
            version: VERSION,
            hidden: model.hidden(),
            embed: model.embed_width(),
            activation: model.activation,
            embedding: model.embedding,
            schedule,
            layers,
        })
    }

    /// Rebuilds the model, checking every layer against the declared widths.
    pub fn to_model(&self) -> Result<EpsModel> {
        if self.layers.len() != LAYER_NAMES.len() {
            return Err(Error::CheckpointMalformed(format!(
                "expected {} layers, found {}",
                LAYER_NAMES.len(),
                self.layers.len()
            )));
        }
        if self.embedding.width != self.embed {
            return Err(Error::CheckpointShape {
                layer: "embedding".into(),
                detail: format!("width {} but embed is {}", self.embedding.width, self.embed),
            });
        }
        let mut model = EpsModel::zeros(self.hidden, self.embed, self.activation)?;
        model.embedding = self.embedding;
        for ((slot, rec), name) in model.layers.iter_mut().zip(&self.layers).zip(LAYER_NAMES) {
            let shape_err = |detail: String| Error::CheckpointShape {
                layer: rec.name.clone(),
                detail,
            };
            if rec.name != name {
                return Err(shape_err(format!("expected layer named {name}")));
            }
            let (rows, cols) = (slot.outputs(), slot.inputs());
            if rec.rows != rows || rec.cols != cols {
                return Err(shape_err(format!(
                    "declared {}x{}, model needs {rows}x{cols}",
                    rec.rows, rec.cols
                )));
            }
            if rec.weight.len() != rows * cols {
                return Err(shape_err(format!(
                    "weight has {} entries, expected {}",
                    rec.weight.len(),
                    rows * cols
                )));
            }
            if rec.bias.len() != rows {
                return Err(shape_err(format!("bias has {} entries, expected {rows}", rec.bias.len())));
            }
            *slot = Dense {
                weight: Array2::from_shape_vec((rows, cols), rec.weight.clone())
                    .map_err(|e| shape_err(e.to_string()))?,
                bias: Array1::from_vec(rec.bias.clone()),
            };
        }
        Ok(model)
    }

    /// Parses checkpoint JSON. The format tag and version are checked before
    /// the rest of the document, so a newer layout reports a version error.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::CheckpointMalformed(e.to_string()))?;
        match value.get("format").and_then(|f| f.as_str()) {
            Some(FORMAT) => {}
            Some(other) => return Err(Error::CheckpointMalformed(format!("unknown format {other:?}"))),
            None => return Err(Error::CheckpointMalformed("missing format tag".into())),
        }
        let version = value
            .get("version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::CheckpointMalformed("missing version".into()))?;
        if version != VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: VERSION,
            });
        }
        serde_json::from_value(value).map_err(|e| Error::CheckpointMalformed(e.to_string()))
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::CheckpointMalformed(e.to_string()))
    }
}

pub fn save_checkpoint(path: &Path, model: &EpsModel, schedule: ScheduleParams) -> Result<()> {
    let text = Checkpoint::from_model(model, schedule)?.to_json()?;
    fs::write(path, text)?;
    Ok(())
}

/// Loads a model and the schedule parameters it was trained with.
pub fn load_checkpoint(path: &Path) -> Result<(EpsModel, ScheduleParams)> {
    let ckpt = Checkpoint::from_json(&fs::read_to_string(path)?)?;
    Ok((ckpt.to_model()?, ckpt.schedule))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> (EpsModel, ScheduleParams) {
        (EpsModel::init(16, 8, 3).unwrap(), ScheduleParams::default())
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (model, params) = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        save_checkpoint(&path, &model, params).unwrap();
        let (back, p) = load_checkpoint(&path).unwrap();
        assert_eq!(p, params);
        for (a, b) in model.param_slices().iter().zip(back.param_slices()) {
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(back, model);
    }

    #[test]
    fn version_mismatch_is_distinct() {
        let (model, params) = sample();
        let mut ckpt = Checkpoint::from_model(&model, params).unwrap();
        ckpt.version = 7;
        let err = Checkpoint::from_json(&ckpt.to_json().unwrap()).unwrap_err();
        assert!(matches!(err, Error::CheckpointVersion { found: 7, expected: 1 }));
    }

    #[test]
    fn malformed_inputs() {
        for text in ["", "{", "[1,2]", r#"{"format":"other","version":1}"#, r#"{"format":"codelab-eps-mlp"}"#] {
            assert!(
                matches!(Checkpoint::from_json(text), Err(Error::CheckpointMalformed(_))),
                "{text:?}"
            );
        }
        let missing_layers = r#"{"format":"codelab-eps-mlp","version":1,"hidden":4}"#;
        assert!(matches!(Checkpoint::from_json(missing_layers), Err(Error::CheckpointMalformed(_))));
    }

    #[test]
    fn shape_mismatch_names_layer() {
        let (model, params) = sample();
        let mut ckpt = Checkpoint::from_model(&model, params).unwrap();
        ckpt.layers[1].weight.pop();
        match ckpt.to_model() {
            Err(Error::CheckpointShape { layer, .. }) => assert_eq!(layer, "layer1"),
            other => panic!("unexpected {other:?}"),
        }
        let mut ckpt = Checkpoint::from_model(&model, params).unwrap();
        ckpt.layers[2].rows = 3;
        let err = ckpt.to_model().unwrap_err();
        assert!(err.to_string().contains("layer2"), "{err}");
    }

    #[test]
    fn non_finite_model_is_rejected() {
        let (mut model, params) = sample();
        model.layers[0].bias[0] = f64::NAN;
        assert!(Checkpoint::from_model(&model, params).is_err());
    }
}
