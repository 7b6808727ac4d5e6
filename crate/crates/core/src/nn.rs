//! Named parameter storage and the small set of layers the models use.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchNormState, Graph, Mode, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    /// Weight matrices and linear-head vectors; the only kind penalized by
    /// weight decay.
    Weight,
    Bias,
    BnScale,
    BnShift,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BnId(usize);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedBatchNorm {
    pub name: String,
    pub state: BatchNormState,
}

/// Every trainable tensor of a model plus the batch-norm running statistics,
/// in creation order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    params: Vec<Param>,
    batch_norms: Vec<NamedBatchNorm>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            kind,
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_batch_norm(&mut self, name: impl Into<String>, features: usize) -> BnId {
        self.batch_norms.push(NamedBatchNorm {
            name: name.into(),
            state: BatchNormState::new(features),
        });
        BnId(self.batch_norms.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn batch_norms(&self) -> &[NamedBatchNorm] {
        &self.batch_norms
    }

    pub fn batch_norms_mut(&mut self) -> &mut [NamedBatchNorm] {
        &mut self.batch_norms
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn bn_state(&self, id: BnId) -> &BatchNormState {
        &self.batch_norms[id.0].state
    }

    pub fn bn_state_mut(&mut self, id: BnId) -> &mut BatchNormState {
        &mut self.batch_norms[id.0].state
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Overwrites values from `other`, matching entries by name and shape.
    pub fn load_from(&mut self, other: &ParamSet) -> Result<()> {
        if other.params.len() != self.params.len()
            || other.batch_norms.len() != self.batch_norms.len()
        {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters and {} batch norms, found {} and {}",
                self.params.len(),
                self.batch_norms.len(),
                other.params.len(),
                other.batch_norms.len()
            )));
        }
        for (mine, theirs) in self.params.iter_mut().zip(&other.params) {
            if mine.name != theirs.name || mine.value.shape() != theirs.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter '{}' {:?} does not match stored '{}' {:?}",
                    mine.name,
                    mine.value.shape(),
                    theirs.name,
                    theirs.value.shape()
                )));
            }
            mine.value = theirs.value.clone();
            mine.kind = theirs.kind;
        }
        for (mine, theirs) in self.batch_norms.iter_mut().zip(&other.batch_norms) {
            if mine.name != theirs.name || mine.state.features() != theirs.state.features() {
                return Err(Error::Checkpoint(format!(
                    "batch norm '{}' does not match stored '{}'",
                    mine.name, theirs.name
                )));
            }
            mine.state = theirs.state.clone();
        }
        Ok(())
    }
}

/// One forward pass: a fresh graph over a borrowed parameter set.
///
/// Parameters enter the graph lazily as gradient-tracking leaves. Batch-norm
/// statistics observed in train mode are collected and applied afterwards by
/// [`ParamSet`] owners through [`Forward::finish`].
pub struct Forward<'p> {
    pub graph: Graph,
    params: &'p ParamSet,
    vars: Vec<Option<Var>>,
    mode: Mode,
    bn_updates: Vec<(BnId, crate::autodiff::BatchStats)>,
}

/// Gradients and batch-norm statistics produced by one forward/backward pass.
#[derive(Debug, Default)]
pub struct PassOutput {
    /// One entry per parameter; `None` when the parameter did not take part.
    pub grads: Vec<Option<Vec<f64>>>,
    bn_updates: Vec<(BnId, crate::autodiff::BatchStats)>,
}

impl PassOutput {
    pub fn apply_bn_updates(&self, params: &mut ParamSet) {
        for (id, stats) in &self.bn_updates {
            params.bn_state_mut(*id).update(stats);
        }
    }
}

/// Batch-norm statistics pooled over several train-mode passes, each pass
/// weighted by its number of subjects. Replaces running averages with exact
/// statistics of a whole dataset.
#[derive(Debug, Default)]
pub struct BnStatistics {
    /// `(layer, total weight, Σ w·mean, Σ w·(var + mean²))`.
    entries: Vec<(BnId, f64, Vec<f64>, Vec<f64>)>,
}

impl BnStatistics {
    pub fn add(&mut self, pass: &PassOutput, weight: f64) {
        for (id, stats) in &pass.bn_updates {
            let pos = match self.entries.iter().position(|e| e.0 == *id) {
                Some(p) => p,
                None => {
                    let d = stats.mean.len();
                    self.entries.push((*id, 0.0, vec![0.0; d], vec![0.0; d]));
                    self.entries.len() - 1
                }
            };
            let e = &mut self.entries[pos];
            e.1 += weight;
            for (k, (m, v)) in stats.mean.iter().zip(&stats.var).enumerate() {
                e.2[k] += weight * m;
                e.3[k] += weight * (v + m * m);
            }
        }
    }

    /// Overwrites the running mean and variance of every observed layer.
    pub fn apply(&self, params: &mut ParamSet) {
        for (id, w, m, sq) in &self.entries {
            let state = params.bn_state_mut(*id);
            for k in 0..m.len() {
                let mean = m[k] / w;
                state.running_mean[k] = mean;
                state.running_var[k] = (sq[k] / w - mean * mean).max(0.0);
            }
        }
    }
}

impl<'p> Forward<'p> {
    pub fn new(params: &'p ParamSet, mode: Mode) -> Self {
        Forward {
            graph: Graph::new(),
            params,
            vars: vec![None; params.len()],
            mode,
            bn_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn params(&self) -> &ParamSet {
        self.params
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let v = self.graph.param(self.params.get(id).clone());
        self.vars[id.0] = Some(v);
        v
    }

    pub fn batch_norm(&mut self, x: Var, bn: &BatchNorm, group: Option<usize>) -> Result<Var> {
        let scale = self.param(bn.scale);
        let shift = self.param(bn.shift);
        let state = self.params.bn_state(bn.stats);
        let (y, stats) = self
            .graph
            .batch_norm(x, scale, shift, state, self.mode, group)?;
        if let Some(stats) = stats {
            self.bn_updates.push((bn.stats, stats));
        }
        Ok(y)
    }

    /// Weighted sum of squared entries of every `Weight` parameter that took
    /// part in this pass.
    pub fn weight_penalty(&mut self, decay: f64) -> Result<Option<Var>> {
        let mut total: Option<Var> = None;
        for (i, slot) in self.vars.clone().iter().enumerate() {
            let Some(v) = slot else { continue };
            if self.params.params[i].kind != ParamKind::Weight {
                continue;
            }
            let sq = self.graph.mul(*v, *v)?;
            let s = self.graph.sum(sq);
            total = Some(match total {
                Some(t) => self.graph.add(t, s)?,
                None => s,
            });
        }
        Ok(total.map(|t| self.graph.scale(t, decay)))
    }

    /// Runs backward from `loss` and hands back parameter gradients.
    pub fn finish(mut self, loss: Var) -> Result<PassOutput> {
        self.graph.backward(loss)?;
        let grads = self
            .vars
            .iter()
            .map(|v| v.and_then(|v| self.graph.grad(v).map(<[f64]>::to_vec)))
            .collect();
        Ok(PassOutput {
            grads,
            bn_updates: self.bn_updates,
        })
    }

    /// Ends a pass without backward, keeping only batch-norm statistics.
    pub fn finish_without_grad(self) -> PassOutput {
        PassOutput {
            grads: vec![None; self.vars.len()],
            bn_updates: self.bn_updates,
        }
    }
}

/// Fully connected layer `y = x·W + b`, `W` stored `in×out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`
    FanInUniform,
    Zeros,
}

impl Linear {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let data = match init {
            Init::FanInUniform => {
                let bound = 1.0 / (in_dim as f64).sqrt();
                (0..in_dim * out_dim)
                    .map(|_| rng.random_range(-bound..bound))
                    .collect()
            }
            Init::Zeros => vec![0.0; in_dim * out_dim],
        };
        let weight = params.add(
            format!("{name}.weight"),
            ParamKind::Weight,
            Tensor::from_parts(vec![in_dim, out_dim], data),
        );
        let bias = bias.then(|| {
            params.add(
                format!("{name}.bias"),
                ParamKind::Bias,
                Tensor::zeros(vec![out_dim]),
            )
        });
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let w = f.param(self.weight);
        let y = f.graph.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = f.param(b);
                f.graph.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub scale: ParamId,
    pub shift: ParamId,
    pub stats: BnId,
}

impl BatchNorm {
    pub fn new(params: &mut ParamSet, name: &str, features: usize) -> Self {
        BatchNorm {
            scale: params.add(
                format!("{name}.scale"),
                ParamKind::BnScale,
                Tensor::filled(vec![features], 1.0),
            ),
            shift: params.add(
                format!("{name}.shift"),
                ParamKind::BnShift,
                Tensor::zeros(vec![features]),
            ),
            stats: params.add_batch_norm(name, features),
        }
    }
}

/// Stack of `linear → batch norm → ReLU` blocks.
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<(Linear, BatchNorm)>,
}

impl Mlp {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        in_dim: usize,
        widths: &[usize],
        rng: &mut impl Rng,
    ) -> Self {
        let mut layers = Vec::with_capacity(widths.len());
        let mut prev = in_dim;
        for (i, &w) in widths.iter().enumerate() {
            let lin = Linear::new(
                params,
                &format!("{name}.{i}"),
                prev,
                w,
                true,
                Init::FanInUniform,
                rng,
            );
            let bn = BatchNorm::new(params, &format!("{name}.{i}.bn"), w);
            layers.push((lin, bn));
            prev = w;
        }
        Mlp { layers }
    }

    pub fn out_dim(&self) -> Option<usize> {
        self.layers.last().map(|(l, _)| l.out_dim)
    }

    pub fn layers(&self) -> &[(Linear, BatchNorm)] {
        &self.layers
    }

    /// `group` selects the batch-norm normalization blocks (see
    /// [`Graph::batch_norm`]).
    pub fn forward(&self, f: &mut Forward<'_>, mut x: Var, group: Option<usize>) -> Result<Var> {
        for (lin, bn) in &self.layers {
            let z = lin.forward(f, x)?;
            let z = f.batch_norm(z, bn, group)?;
            x = f.graph.relu(z);
        }
        Ok(x)
    }
}

/// Largest `|analytic - central| / max(1, |central|)` over parameter entries,
/// for the scalar built by `f`, with central differences of step `h`.
///
/// At most `per_param` evenly spaced entries of each tensor are probed.
/// Batch-norm running statistics are never updated here, so train-mode passes
/// are deterministic functions of the parameters.
pub fn gradient_check(
    params: &ParamSet,
    mode: Mode,
    h: f64,
    per_param: usize,
    f: impl Fn(&mut Forward<'_>) -> Result<Var>,
) -> Result<f64> {
    let eval = |ps: &ParamSet| -> Result<f64> {
        let mut fw = Forward::new(ps, mode);
        let loss = f(&mut fw)?;
        Ok(fw.graph.value(loss).item())
    };
    let mut fw = Forward::new(params, mode);
    let loss = f(&mut fw)?;
    let analytic = fw.finish(loss)?.grads;
    let mut worst = 0.0f64;
    let mut probe = params.clone();
    for (i, p) in params.params.iter().enumerate() {
        let n = p.value.numel();
        let stride = n.div_ceil(per_param.max(1)).max(1);
        for j in (0..n).step_by(stride) {
            let orig = p.value.data()[j];
            probe.params[i].value.data_mut()[j] = orig + h;
            let plus = eval(&probe)?;
            probe.params[i].value.data_mut()[j] = orig - h;
            let minus = eval(&probe)?;
            probe.params[i].value.data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[i].as_ref().map_or(0.0, |g| g[j]);
            worst = worst.max((a - numeric).abs() / numeric.abs().max(1.0));
        }
    }
    Ok(worst)
}
