//! Self-describing JSON model archive: configuration, encoder state and every
//! parameter tensor with batch-norm running statistics.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::preprocess::FeatureEncoder;
use crate::trainer::TrainConfig;
use crate::widedeep::{ModelConfig, WideDeep};

pub const CHECKPOINT_FORMAT: &str = "wdsurv-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub model: ModelConfig,
    pub wide_dim: usize,
    /// Fitted on the training split; absent for shape-only models.
    pub encoder: Option<FeatureEncoder>,
    pub train: TrainConfig,
    /// Point count clouds were resampled to; `None` kept the stored size.
    pub points_per_cloud: Option<usize>,
    pub params: ParamSet,
}

impl Checkpoint {
    pub fn new(
        model: &WideDeep,
        encoder: Option<&FeatureEncoder>,
        train: &TrainConfig,
        points_per_cloud: Option<usize>,
    ) -> Result<Self> {
        if model.variant().has_wide() {
            let encoder = encoder
                .filter(|e| e.is_fitted())
                .ok_or_else(|| Error::Checkpoint("wide models need a fitted encoder".into()))?;
            if encoder.width() != model.wide_dim() {
                return Err(Error::Checkpoint(format!(
                    "encoder width {} differs from model input width {}",
                    encoder.width(),
                    model.wide_dim()
                )));
            }
        }
        Ok(Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            model: model.config().clone(),
            wide_dim: model.wide_dim(),
            encoder: encoder.filter(|_| model.variant().has_wide()).cloned(),
            train: train.clone(),
            points_per_cloud,
            params: model.params().clone(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            format: String,
            version: u32,
        }
        let header: Header = serde_json::from_str(s)
            .map_err(|e| Error::Checkpoint(format!("not a checkpoint: {e}")))?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!(
                "unexpected format '{}'",
                header.format
            )));
        }
        if header.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {} (expected {CHECKPOINT_VERSION})",
                header.version
            )));
        }
        serde_json::from_str(s).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Rebuilds the model and overwrites its freshly initialized parameters.
    pub fn model(&self) -> Result<WideDeep> {
        let mut model = WideDeep::new(&self.model, self.wide_dim, 0)?;
        model.params_mut().load_from(&self.params)?;
        Ok(model)
    }

    /// Wide coefficients paired with their feature column names.
    pub fn coefficients(&self) -> Result<Vec<(String, f64)>> {
        let encoder = self
            .encoder
            .as_ref()
            .filter(|_| self.model.variant.has_wide());
        let Some(encoder) = encoder else {
            return Err(Error::InvalidArgument(
                "checkpoint holds a shape-only model without wide coefficients".into(),
            ));
        };
        let model = self.model()?;
        let weights = model.wide_weights().expect("wide variant");
        let names = encoder.column_names()?;
        Ok(names.iter().cloned().zip(weights.iter().copied()).collect())
    }
}
