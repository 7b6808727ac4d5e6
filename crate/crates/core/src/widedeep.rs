//! Wide-and-deep risk model: a linear term on engineered tabular features plus
//! a learned head on the PointNet shape descriptor.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mode, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Forward, Mlp, ParamId, ParamKind, ParamSet};
use crate::pointnet::{PointCloud, PointNet, PointNetConfig};

/// Which pathways contribute to the risk score.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Linear Cox model on tabular features.
    Wide,
    /// Shape only.
    Deep,
    WideDeep,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Wide, Variant::Deep, Variant::WideDeep];

    pub fn has_wide(self) -> bool {
        matches!(self, Variant::Wide | Variant::WideDeep)
    }

    pub fn has_deep(self) -> bool {
        matches!(self, Variant::Deep | Variant::WideDeep)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Wide => "wide",
            Variant::Deep => "deep",
            Variant::WideDeep => "widedeep",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown model variant '{s}' (expected wide, deep or widedeep)"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub pointnet: PointNetConfig,
    /// Global MLP on the descriptor; the last width is the size of `w_deep`.
    pub global_widths: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::WideDeep,
            pointnet: PointNetConfig::default(),
            global_widths: vec![200, 100, 100],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.variant.has_deep() {
            self.pointnet.validate()?;
            if self.global_widths.is_empty() || self.global_widths.contains(&0) {
                return Err(Error::Config(
                    "global MLP widths must be non-empty and positive".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Graph nodes of one pass, each of shape `[n]`.
#[derive(Clone, Copy, Debug)]
pub struct ScoreVars {
    pub wide: Option<Var>,
    pub deep: Option<Var>,
    pub total: Var,
}

/// Evaluated score of one subject. Absent pathways contribute zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreParts {
    pub wide: f64,
    pub deep: f64,
    pub total: f64,
}

/// Inputs for a batch of `n` subjects.
#[derive(Clone, Copy, Debug)]
pub struct Batch<'a> {
    /// Row-major `n × wide_dim` features; required by wide variants.
    pub features: Option<&'a [f64]>,
    /// One equally sized cloud per subject; required by deep variants.
    pub clouds: Option<&'a [&'a PointCloud]>,
}

impl Batch<'_> {
    fn len(&self, wide_dim: usize) -> Result<usize> {
        if let Some(x) = self.features {
            if wide_dim > 0 && x.len() % wide_dim != 0 {
                return Err(Error::Shape {
                    op: "risk_score",
                    lhs: vec![x.len()],
                    rhs: vec![wide_dim],
                });
            }
        }
        let from_x = self.features.map(|x| x.len() / wide_dim.max(1));
        let from_c = self.clouds.map(<[_]>::len);
        match (from_x, from_c) {
            (Some(a), Some(b)) if a != b => Err(Error::Shape {
                op: "risk_score",
                lhs: vec![a, wide_dim],
                rhs: vec![b],
            }),
            (Some(a), _) => Ok(a),
            (None, Some(b)) => Ok(b),
            (None, None) => Err(Error::InvalidArgument("empty model input".into())),
        }
    }
}

/// Parameters and layer layout of a wide-and-deep model.
#[derive(Clone, Debug)]
pub struct WideDeep {
    config: ModelConfig,
    wide_dim: usize,
    params: ParamSet,
    w_wide: Option<ParamId>,
    deep: Option<DeepPath>,
}

#[derive(Clone, Debug)]
struct DeepPath {
    pointnet: PointNet,
    global: Mlp,
    w_deep: ParamId,
}

/// Rows evaluated per graph when scoring many subjects.
const PREDICT_CHUNK: usize = 64;

impl WideDeep {
    /// Fan-in uniform weights for the MLPs from `seed`; `w_wide` and `w_deep`
    /// start at zero.
    pub fn new(config: &ModelConfig, wide_dim: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let w_wide = if config.variant.has_wide() {
            if wide_dim == 0 {
                return Err(Error::Config(
                    "wide variants need at least one tabular feature".into(),
                ));
            }
            Some(params.add(
                "w_wide",
                ParamKind::Weight,
                Tensor::zeros(vec![wide_dim, 1]),
            ))
        } else {
            None
        };
        let deep = if config.variant.has_deep() {
            let pointnet = PointNet::new(&mut params, "pointnet", &config.pointnet, &mut rng)?;
            let global = Mlp::new(
                &mut params,
                "global",
                pointnet.descriptor_width(),
                &config.global_widths,
                &mut rng,
            );
            let h = global.out_dim().expect("validated");
            let w_deep = params.add("w_deep", ParamKind::Weight, Tensor::zeros(vec![h, 1]));
            Some(DeepPath {
                pointnet,
                global,
                w_deep,
            })
        } else {
            None
        };
        Ok(WideDeep {
            config: config.clone(),
            wide_dim: if w_wide.is_some() { wide_dim } else { 0 },
            params,
            w_wide,
            deep,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    /// Width of the tabular input; 0 for shape-only models.
    pub fn wide_dim(&self) -> usize {
        self.wide_dim
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn pointnet(&self) -> Option<&PointNet> {
        self.deep.as_ref().map(|d| &d.pointnet)
    }

    pub fn w_wide_id(&self) -> Option<ParamId> {
        self.w_wide
    }

    pub fn w_deep_id(&self) -> Option<ParamId> {
        self.deep.as_ref().map(|d| d.w_deep)
    }

    /// Wide coefficients (log-hazard ratios per feature column).
    pub fn wide_weights(&self) -> Option<&[f64]> {
        self.w_wide.map(|id| self.params.get(id).data())
    }

    /// Builds the score nodes on a pass over [`Self::params`].
    pub fn forward(&self, f: &mut Forward<'_>, batch: Batch<'_>) -> Result<ScoreVars> {
        let n = batch.len(self.wide_dim)?;
        let wide = match self.w_wide {
            Some(id) => {
                let x = batch.features.ok_or_else(|| {
                    Error::InvalidArgument(format!(
                        "{} model needs tabular features",
                        self.variant()
                    ))
                })?;
                if x.len() != n * self.wide_dim {
                    return Err(Error::Shape {
                        op: "risk_score",
                        lhs: vec![x.len()],
                        rhs: vec![n, self.wide_dim],
                    });
                }
                let xv = f
                    .graph
                    .constant(Tensor::matrix(n, self.wide_dim, x.to_vec())?);
                let w = f.param(id);
                let s = f.graph.matmul(xv, w)?;
                Some(f.graph.reshape(s, vec![n])?)
            }
            None => None,
        };
        let deep = match &self.deep {
            Some(d) => {
                let clouds = batch.clouds.ok_or_else(|| {
                    Error::InvalidArgument(format!("{} model needs point clouds", self.variant()))
                })?;
                let desc = d.pointnet.encode_batch(f, clouds)?;
                let h = d.global.forward(f, desc, None)?;
                let w = f.param(d.w_deep);
                let s = f.graph.matmul(h, w)?;
                Some(f.graph.reshape(s, vec![n])?)
            }
            None => None,
        };
        let total = match (wide, deep) {
            (Some(a), Some(b)) => f.graph.add(a, b)?,
            (Some(a), None) => a,
            (None, Some(b)) => b,
            (None, None) => unreachable!("validated variant has a pathway"),
        };
        Ok(ScoreVars { wide, deep, total })
    }

    /// Eval-mode scores, evaluated in chunks.
    pub fn predict(&self, batch: Batch<'_>) -> Result<Vec<ScoreParts>> {
        let n = batch.len(self.wide_dim)?;
        let mut out = Vec::with_capacity(n);
        let mut start = 0;
        while start < n {
            let end = (start + PREDICT_CHUNK).min(n);
            let chunk = Batch {
                features: batch
                    .features
                    .map(|x| &x[start * self.wide_dim..end * self.wide_dim]),
                clouds: batch.clouds.map(|c| &c[start..end]),
            };
            let mut f = Forward::new(&self.params, Mode::Eval);
            let s = self.forward(&mut f, chunk)?;
            let get = |v: Option<Var>| {
                v.map(|v| f.graph.value(v).data().to_vec())
                    .unwrap_or_else(|| vec![0.0; end - start])
            };
            let (wide, deep) = (get(s.wide), get(s.deep));
            let total = f.graph.value(s.total).data();
            for i in 0..end - start {
                out.push(ScoreParts {
                    wide: wide[i],
                    deep: deep[i],
                    total: total[i],
                });
            }
            start = end;
        }
        Ok(out)
    }

    /// Eval-mode risk score of one subject.
    pub fn risk_score(&self, x: Option<&[f64]>, cloud: Option<&PointCloud>) -> Result<ScoreParts> {
        let clouds = cloud.map(|c| [c]);
        let parts = self.predict(Batch {
            features: x,
            clouds: clouds.as_ref().map(|c| c.as_slice()),
        })?;
        Ok(parts[0])
    }

    /// The linear predictor `w_wideᵀ·x` alone.
    pub fn wide_only_model(&self, x: &[f64]) -> Result<f64> {
        let w = self
            .wide_weights()
            .ok_or_else(|| Error::InvalidArgument("model has no wide component".into()))?;
        if x.len() != w.len() {
            return Err(Error::Shape {
                op: "wide_only_model",
                lhs: vec![x.len()],
                rhs: vec![w.len()],
            });
        }
        Ok(x.iter().zip(w).map(|(a, b)| a * b).sum())
    }
}
