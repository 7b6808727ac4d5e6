//! Permutation-invariant point-cloud encoder with a learned 3×3 input
//! transform.
//!
//! A batch of `B` clouds with `K` points each is processed as one
//! `(B·K)×3` matrix. Shared point MLPs normalize over the `K` points of each
//! cloud; the fully connected layers of the transform net normalize over the
//! batch of clouds.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{CustomOp, Graph, Mode, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Forward, Init, Linear, Mlp, ParamSet};

/// `K` points in 3-D, stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    points: Vec<f64>,
}

impl PointCloud {
    /// `points` holds `x y z` triples back to back.
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidArgument("point cloud has no points".into()));
        }
        if !points.len().is_multiple_of(3) {
            return Err(Error::InvalidArgument(format!(
                "point cloud needs a multiple of 3 coordinates, got {}",
                points.len()
            )));
        }
        if let Some(i) = points.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("point {} of cloud", i / 3)));
        }
        Ok(PointCloud { points })
    }

    pub fn from_rows(rows: &[[f64; 3]]) -> Result<Self> {
        Self::new(rows.iter().flatten().copied().collect())
    }

    pub fn len(&self) -> usize {
        self.points.len() / 3
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn coords(&self) -> &[f64] {
        &self.points
    }

    pub fn point(&self, k: usize) -> [f64; 3] {
        [
            self.points[3 * k],
            self.points[3 * k + 1],
            self.points[3 * k + 2],
        ]
    }

    pub fn rows(&self) -> impl Iterator<Item = [f64; 3]> + '_ {
        (0..self.len()).map(|k| self.point(k))
    }

    pub fn centroid(&self) -> [f64; 3] {
        let mut c = [0.0; 3];
        for p in self.rows() {
            (0..3).for_each(|j| c[j] += p[j]);
        }
        c.map(|v| v / self.len() as f64)
    }

    /// Reorders points so that row `k` of the result is row `order[k]`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        if order.len() != self.len() {
            return Err(Error::InvalidArgument(format!(
                "permutation of length {} for a cloud of {} points",
                order.len(),
                self.len()
            )));
        }
        Self::new(order.iter().flat_map(|&k| self.point(k)).collect())
    }

    pub fn translated(&self, offset: [f64; 3]) -> Self {
        PointCloud {
            points: self
                .points
                .chunks_exact(3)
                .flat_map(|p| [p[0] + offset[0], p[1] + offset[1], p[2] + offset[2]])
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PointNetConfig {
    /// Shared point MLP widths; the last one is the descriptor width `G`.
    pub point_widths: Vec<usize>,
    /// Point MLP widths inside the transform net.
    pub transform_point_widths: Vec<usize>,
    /// Fully connected widths of the transform net before its 9-unit output.
    pub transform_fc_widths: Vec<usize>,
}

impl Default for PointNetConfig {
    fn default() -> Self {
        PointNetConfig {
            point_widths: vec![64, 128, 400],
            transform_point_widths: vec![64, 128, 400],
            transform_fc_widths: vec![200, 100],
        }
    }
}

impl PointNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.point_widths.is_empty() || self.transform_point_widths.is_empty() {
            return Err(Error::Config("point MLP widths must be non-empty".into()));
        }
        let all = self
            .point_widths
            .iter()
            .chain(&self.transform_point_widths)
            .chain(&self.transform_fc_widths);
        if all.clone().any(|&w| w == 0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(())
    }

    pub fn descriptor_width(&self) -> usize {
        *self.point_widths.last().expect("validated")
    }
}

/// `φ_k = T_b · p_k` for every point `k` of cloud `b`.
#[derive(Debug)]
struct PointTransform {
    points_per_cloud: usize,
}

fn apply_transform(points: &[f64], transforms: &[f64], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; points.len()];
    for (row, (p, o)) in points
        .chunks_exact(3)
        .zip(out.chunks_exact_mut(3))
        .enumerate()
    {
        let t = &transforms[9 * (row / k)..9 * (row / k) + 9];
        for i in 0..3 {
            o[i] = t[3 * i] * p[0] + t[3 * i + 1] * p[1] + t[3 * i + 2] * p[2];
        }
    }
    out
}

impl CustomOp for PointTransform {
    fn name(&self) -> &'static str {
        "point_transform"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_output: &[f64]) -> Vec<Vec<f64>> {
        let (points, transforms) = (inputs[0].data(), inputs[1].data());
        let k = self.points_per_cloud;
        let mut gp = vec![0.0; points.len()];
        let mut gt = vec![0.0; transforms.len()];
        for (row, (p, g)) in points
            .chunks_exact(3)
            .zip(grad_output.chunks_exact(3))
            .enumerate()
        {
            let b = row / k;
            let t = &transforms[9 * b..9 * b + 9];
            let dt = &mut gt[9 * b..9 * b + 9];
            let dp = &mut gp[3 * row..3 * row + 3];
            for i in 0..3 {
                for j in 0..3 {
                    dp[j] += t[3 * i + j] * g[i];
                    dt[3 * i + j] += g[i] * p[j];
                }
            }
        }
        vec![gp, gt]
    }
}

/// `φ = T_b · p` for `(B·k)×3` points and `B×9` row-major transforms.
pub fn point_transform(graph: &mut Graph, points: Var, transforms: Var, k: usize) -> Result<Var> {
    let (pv, tv) = (graph.value(points), graph.value(transforms));
    let (rows, cols) = pv.dims2("point_transform")?;
    let (b, nine) = tv.dims2("point_transform")?;
    if cols != 3 || nine != 9 || rows != b * k {
        return Err(Error::Shape {
            op: "point_transform",
            lhs: pv.shape().to_vec(),
            rhs: tv.shape().to_vec(),
        });
    }
    let out = Tensor::new(vec![rows, 3], apply_transform(pv.data(), tv.data(), k))?;
    Ok(graph.custom(
        &[points, transforms],
        out,
        Box::new(PointTransform {
            points_per_cloud: k,
        }),
    ))
}

#[derive(Clone, Debug)]
pub struct PointNet {
    config: PointNetConfig,
    transform_point: Mlp,
    transform_fc: Mlp,
    transform_out: Linear,
    point: Mlp,
}

const IDENTITY: [f64; 9] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];

impl PointNet {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        config: &PointNetConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let transform_point = Mlp::new(
            params,
            &format!("{name}.tnet.point"),
            3,
            &config.transform_point_widths,
            rng,
        );
        let pooled = transform_point.out_dim().expect("validated");
        let transform_fc = Mlp::new(
            params,
            &format!("{name}.tnet.fc"),
            pooled,
            &config.transform_fc_widths,
            rng,
        );
        let fc_out = transform_fc.out_dim().unwrap_or(pooled);
        let transform_out = Linear::new(
            params,
            &format!("{name}.tnet.out"),
            fc_out,
            9,
            true,
            Init::Zeros,
            rng,
        );
        let point = Mlp::new(
            params,
            &format!("{name}.point"),
            3,
            &config.point_widths,
            rng,
        );
        Ok(PointNet {
            config: config.clone(),
            transform_point,
            transform_fc,
            transform_out,
            point,
        })
    }

    pub fn config(&self) -> &PointNetConfig {
        &self.config
    }

    pub fn descriptor_width(&self) -> usize {
        self.config.descriptor_width()
    }

    pub fn transform_output_layer(&self) -> &Linear {
        &self.transform_out
    }

    /// Stacks equally sized clouds into a `(B·K)×3` constant.
    pub fn stack(f: &mut Forward<'_>, clouds: &[&PointCloud]) -> Result<(Var, usize)> {
        let first = clouds
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty batch of point clouds".into()))?;
        let k = first.len();
        if let Some(c) = clouds.iter().find(|c| c.len() != k) {
            return Err(Error::InvalidArgument(format!(
                "clouds in one batch must share a point count: {k} vs {}",
                c.len()
            )));
        }
        let mut data = Vec::with_capacity(clouds.len() * k * 3);
        for c in clouds {
            data.extend_from_slice(c.coords());
        }
        let t = Tensor::new(vec![clouds.len() * k, 3], data)?;
        Ok((f.graph.constant(t), k))
    }

    /// Shared per-point MLP on `(B·K)×d` rows, batch norm over all points of
    /// the batch.
    pub fn shared_point_mlp(&self, f: &mut Forward<'_>, points: Var, _k: usize) -> Result<Var> {
        self.point.forward(f, points, None)
    }

    /// Per-cloud `T` as a `B×9` row-major matrix (identity plus the
    /// transform-net output).
    pub fn input_transform(&self, f: &mut Forward<'_>, points: Var, k: usize) -> Result<Var> {
        let h = self.transform_point.forward(f, points, None)?;
        let pooled = f.graph.segment_max_pool(h, k)?;
        let z = self.transform_fc.forward(f, pooled, None)?;
        let delta = self.transform_out.forward(f, z)?;
        let b = f.graph.value(delta).shape()[0];
        let eye = Tensor::new(vec![b, 9], IDENTITY.repeat(b))?;
        let eye = f.graph.constant(eye);
        f.graph.add(delta, eye)
    }

    /// Applies each cloud's `T` to its points.
    pub fn transform_points(
        &self,
        f: &mut Forward<'_>,
        points: Var,
        transforms: Var,
        k: usize,
    ) -> Result<Var> {
        point_transform(&mut f.graph, points, transforms, k)
    }

    /// Global descriptors, `B×G`.
    pub fn encode_batch(&self, f: &mut Forward<'_>, clouds: &[&PointCloud]) -> Result<Var> {
        let (x, k) = Self::stack(f, clouds)?;
        let t = self.input_transform(f, x, k)?;
        let phi = self.transform_points(f, x, t, k)?;
        let h = self.shared_point_mlp(f, phi, k)?;
        f.graph.segment_max_pool(h, k)
    }

    /// Eval-mode descriptor of a single cloud.
    pub fn encode(&self, params: &ParamSet, cloud: &PointCloud) -> Result<Vec<f64>> {
        let mut f = Forward::new(params, Mode::Eval);
        let d = self.encode_batch(&mut f, &[cloud])?;
        Ok(f.graph.value(d).data().to_vec())
    }
}
