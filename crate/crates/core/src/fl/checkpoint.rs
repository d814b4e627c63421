//! Named-tensor parameter documents.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{MaskParams, ModelDims, ModelParams, TensorSet, TENSOR_NAMES};

const MASK_PREFIX: &str = "mask.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    /// Row-major values.
    pub values: Vec<f64>,
}

/// Parameters (and optionally the private mask) of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub round: usize,
    pub client_id: Option<usize>,
    pub tensors: Vec<NamedTensor>,
}

fn named<'a>(prefix: &'a str, p: &'a ModelParams) -> impl Iterator<Item = NamedTensor> + 'a {
    let shapes = p.dims().shapes();
    p.slices()
        .into_iter()
        .zip(shapes)
        .zip(TENSOR_NAMES)
        .map(move |((values, shape), name)| NamedTensor {
            name: format!("{prefix}{name}"),
            shape,
            values: values.to_vec(),
        })
}

impl Checkpoint {
    pub fn new(
        round: usize,
        client_id: Option<usize>,
        params: &ModelParams,
        masks: Option<&MaskParams>,
    ) -> Self {
        let mut tensors: Vec<NamedTensor> = named("", params).collect();
        if let Some(m) = masks {
            tensors.extend(named(MASK_PREFIX, m.values()));
        }
        Checkpoint {
            round,
            client_id,
            tensors,
        }
    }

    fn collect(&self, prefix: &str, dims: ModelDims) -> Result<Option<ModelParams>> {
        let mut found = Vec::with_capacity(TENSOR_NAMES.len());
        for (name, shape) in TENSOR_NAMES.iter().zip(dims.shapes()) {
            let full = format!("{prefix}{name}");
            match self.tensors.iter().find(|t| t.name == full) {
                Some(t) if t.shape != shape => {
                    return Err(Error::Format(format!(
                        "tensor {full} has shape {:?}, expected {shape:?}",
                        t.shape
                    )))
                }
                Some(t) => found.push(t.values.clone()),
                None => found.push(Vec::new()),
            }
        }
        if found.iter().all(Vec::is_empty) {
            return Ok(None);
        }
        ModelParams::from_tensors(dims, &found).map(Some)
    }

    pub fn params(&self, dims: ModelDims) -> Result<ModelParams> {
        self.collect("", dims)?
            .ok_or_else(|| Error::Format("checkpoint holds no model parameters".into()))
    }

    pub fn masks(&self, dims: ModelDims, classifier_masked: bool) -> Result<Option<MaskParams>> {
        Ok(self
            .collect(MASK_PREFIX, dims)?
            .map(|v| MaskParams::from_values(v, classifier_masked)))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::Internal(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
