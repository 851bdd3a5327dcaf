//! JSON model files.

use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::cell::CellParams;
use super::model::{ModelState, Params, Scaler, TENSOR_NAMES};
use super::{FeatureLayout, ForecastConfig, ForecastError};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format_version: u32,
    pub config: ForecastConfig,
    pub layout: FeatureLayout,
    pub scaler: Scaler,
    pub tensors: Vec<Tensor>,
    pub data_hash: String,
}

impl ModelFile {
    pub fn from_model(m: &ModelState) -> Self {
        let tensors = TENSOR_NAMES
            .iter()
            .zip(m.params.shapes())
            .zip(m.params.tensors())
            .map(|((n, shape), data)| Tensor {
                name: n.to_string(),
                shape,
                data: data.to_vec(),
            })
            .collect();
        Self {
            format_version: FORMAT_VERSION,
            config: m.config.clone(),
            layout: m.layout.clone(),
            scaler: m.scaler.clone(),
            tensors,
            data_hash: m.data_hash.clone(),
        }
    }

    pub fn into_model(self) -> Result<ModelState, ForecastError> {
        if self.format_version != FORMAT_VERSION {
            return Err(ForecastError::File(format!("unsupported format version {}", self.format_version)));
        }
        let get = |name: &str| -> Result<&Tensor, ForecastError> {
            let t = self
                .tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| ForecastError::File(format!("missing tensor {name}")))?;
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(ForecastError::File(format!("tensor {name} has {} values for shape {:?}", t.data.len(), t.shape)));
            }
            Ok(t)
        };
        let mat = |name: &str| -> Result<Array2<f64>, ForecastError> {
            let t = get(name)?;
            if t.shape.len() != 2 {
                return Err(ForecastError::File(format!("tensor {name} must be 2-d")));
            }
            Array2::from_shape_vec((t.shape[0], t.shape[1]), t.data.clone()).map_err(|e| ForecastError::File(e.to_string()))
        };
        let vec = |name: &str| -> Result<Array1<f64>, ForecastError> { Ok(Array1::from_vec(get(name)?.data.clone())) };
        let h = self.config.hidden_dim;
        let cell = |w: Array2<f64>, b: Array1<f64>, input_dim: usize, which: &str| -> Result<CellParams, ForecastError> {
            if w.shape() != [4 * h, input_dim + h] || b.len() != 4 * h {
                return Err(ForecastError::File(format!("{which} cell shape does not match the configuration")));
            }
            Ok(CellParams {
                input_dim,
                hidden_dim: h,
                w,
                b,
            })
        };
        let encoder = cell(mat("encoder.w")?, vec("encoder.b")?, self.layout.encoder_dim(), "encoder")?;
        let decoder = cell(mat("decoder.w")?, vec("decoder.b")?, self.layout.decoder_dim(), "decoder")?;
        let readout_w = mat("readout.w")?;
        let readout_b = vec("readout.b")?;
        let n = self.layout.targets.len();
        if readout_w.shape() != [n, h] || readout_b.len() != n {
            return Err(ForecastError::File("readout shape does not match the configuration".into()));
        }
        if self.scaler.encoder_mean.len() != self.layout.encoder_dim() || self.scaler.decoder_mean.len() != self.layout.decoder_dim() {
            return Err(ForecastError::File("scaler does not match the feature layout".into()));
        }
        Ok(ModelState {
            config: self.config,
            layout: self.layout,
            scaler: self.scaler,
            params: Params {
                encoder,
                decoder,
                readout_w,
                readout_b,
            },
            data_hash: self.data_hash,
        })
    }
}

pub fn save_model(model: &ModelState, path: impl AsRef<Path>) -> Result<(), ForecastError> {
    let text = serde_json::to_string_pretty(&ModelFile::from_model(model)).map_err(|e| ForecastError::File(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelState, ForecastError> {
    let text = std::fs::read_to_string(path)?;
    let file: ModelFile = serde_json::from_str(&text).map_err(|e| ForecastError::File(e.to_string()))?;
    file.into_model()
}
