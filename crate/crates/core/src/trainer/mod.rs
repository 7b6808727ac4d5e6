//! Optimization of the Cox objective: Adam, learning-rate schedules, data
//! splits, the epoch loop with best-validation selection, and a small
//! hyperparameter search harness.

mod adam;
mod search;
mod split;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamHyper, AdamState};
pub use search::{hyperparameter_search, Candidate, SearchResult, SearchSpace, SearchStrategy};
pub use split::{split_dataset, split_sizes, Split, MAX_SPLIT_ATTEMPTS};

use crate::autodiff::Mode;
use crate::error::{Error, Result};
use crate::loss::{cox_loss_with, regularized_loss, LossNormalization, SurvivalRecord};
use crate::metrics::{concordance_index_fast, EvaluationResult};
use crate::nn::{BnStatistics, Forward};
use crate::pointnet::PointCloud;
use crate::widedeep::{Batch, ScoreParts, WideDeep};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    Constant,
    /// Multiply by `factor` every `every_n_epochs` epochs.
    Step {
        factor: f64,
        every_n_epochs: usize,
    },
}

impl LrSchedule {
    /// Learning rate for 0-based `epoch`.
    pub fn rate(&self, base: f64, epoch: usize) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::Step {
                factor,
                every_n_epochs,
            } => base * factor.powi((epoch / every_n_epochs) as i32),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BatchMode {
    Full,
    /// Shuffled batches of `size`; risk sets are formed within each batch and
    /// batches without an event are skipped.
    Minibatch {
        size: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub batch_mode: BatchMode,
    pub split_fractions: [f64; 3],
    pub n_repeats: usize,
    pub rng_seed: u64,
    pub loss_normalization: LossNormalization,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 120,
            learning_rate: 1e-3,
            lr_schedule: LrSchedule::Step {
                factor: 0.5,
                every_n_epochs: 40,
            },
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 1e-4,
            batch_mode: BatchMode::Full,
            split_fractions: [0.8, 0.1, 0.1],
            n_repeats: 10,
            rng_seed: 0,
            loss_normalization: LossNormalization::Events,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if let LrSchedule::Step {
            factor,
            every_n_epochs,
        } = self.lr_schedule
        {
            if !(factor > 0.0 && factor.is_finite()) || every_n_epochs == 0 {
                return bad("step schedule needs a positive factor and every_n_epochs >= 1");
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return bad("epsilon must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be non-negative");
        }
        if let BatchMode::Minibatch { size } = self.batch_mode {
            if size < 2 {
                return bad("minibatch size must be at least 2");
            }
        }
        let f = self.split_fractions;
        if f.iter().any(|v| v.is_nan() || *v <= 0.0) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("split_fractions must be positive and sum to 1");
        }
        if self.n_repeats == 0 {
            return bad("n_repeats must be at least 1");
        }
        Ok(())
    }

    fn hyper(&self, epoch: usize) -> AdamHyper {
        AdamHyper {
            learning_rate: self.lr_schedule.rate(self.learning_rate, epoch),
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

/// Encoded inputs and outcomes of one split.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Prepared {
    /// Row-major `n × wide_dim`, empty for shape-only models.
    pub features: Vec<f64>,
    pub wide_dim: usize,
    /// Empty for tabular-only models.
    pub clouds: Vec<PointCloud>,
    pub records: Vec<SurvivalRecord>,
}

impl Prepared {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn rows(&self, idx: &[usize]) -> (Vec<f64>, Vec<&PointCloud>, Vec<SurvivalRecord>) {
        let d = self.wide_dim;
        let mut x = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            x.extend_from_slice(&self.features[i * d..(i + 1) * d]);
        }
        let clouds = if self.clouds.is_empty() {
            Vec::new()
        } else {
            idx.iter().map(|&i| &self.clouds[i]).collect()
        };
        let records = idx.iter().map(|&i| self.records[i].clone()).collect();
        (x, clouds, records)
    }

    fn batch<'a>(&'a self, clouds: &'a [&'a PointCloud]) -> Batch<'a> {
        Batch {
            features: (self.wide_dim > 0).then_some(self.features.as_slice()),
            clouds: (!clouds.is_empty()).then_some(clouds),
        }
    }

    /// Eval-mode scores of every subject.
    pub fn predict(&self, model: &WideDeep) -> Result<Vec<ScoreParts>> {
        let refs: Vec<&PointCloud> = self.clouds.iter().collect();
        model.predict(self.batch(&refs))
    }
}

/// Harrell's c-index of the model's eval-mode scores on `data`.
pub fn evaluate(model: &WideDeep, data: &Prepared) -> Result<EvaluationResult> {
    let scores: Vec<f64> = data.predict(model)?.iter().map(|s| s.total).collect();
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("predicted risk scores".into()));
    }
    concordance_index_fast(&scores, &data.records)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean regularized training objective per epoch, measured before each
    /// batch's update.
    pub train_loss: Vec<f64>,
    /// Validation c-index after each epoch; empty without a validation split.
    pub val_c_index: Vec<f64>,
    /// 1-based epoch whose parameters were kept.
    pub selected_epoch: usize,
    pub best_val_c_index: Option<f64>,
    /// Filled in by the caller after a separate test evaluation.
    pub test_c_index: Option<f64>,
    pub seconds: f64,
}

impl TrainReport {
    /// One row per epoch: `epoch,train_loss,val_c_index`.
    pub fn epochs_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_c_index\n");
        for (e, loss) in self.train_loss.iter().enumerate() {
            let val = self
                .val_c_index
                .get(e)
                .map(|v| v.to_string())
                .unwrap_or_default();
            s.push_str(&format!("{},{},{}\n", e + 1, loss, val));
        }
        s
    }
}

fn epoch_batches(n: usize, mode: BatchMode, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    match mode {
        BatchMode::Full => vec![(0..n).collect()],
        BatchMode::Minibatch { size } => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(rng);
            let mut batches: Vec<Vec<usize>> = order.chunks(size).map(<[usize]>::to_vec).collect();
            // a trailing single subject cannot form a risk set or batch statistics
            if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < 2) {
                let tail = batches.pop().expect("non-empty");
                batches.last_mut().expect("non-empty").extend(tail);
            }
            batches
        }
    }
}

/// Sets every batch-norm layer's running statistics to the train-mode
/// statistics of the whole training split under the current weights, pooled
/// over batches of the training batch size.
fn recalibrate_batch_norm(model: &mut WideDeep, train: &Prepared, mode: BatchMode) -> Result<()> {
    if model.params().batch_norms().is_empty() {
        return Ok(());
    }
    let n = train.len();
    let size = match mode {
        BatchMode::Full => n,
        BatchMode::Minibatch { size } => size,
    };
    let order: Vec<usize> = (0..n).collect();
    let mut chunks: Vec<&[usize]> = order.chunks(size).collect();
    if chunks.len() > 1 && chunks.last().is_some_and(|c| c.len() < 2) {
        let tail = chunks.pop().expect("non-empty").len();
        let last = chunks.pop().expect("non-empty");
        chunks.push(&order[n - last.len() - tail..]);
    }
    let mut pooled = BnStatistics::default();
    for idx in chunks {
        let (x, clouds, _) = train.rows(idx);
        let batch = Batch {
            features: (train.wide_dim > 0).then_some(x.as_slice()),
            clouds: (!clouds.is_empty()).then_some(clouds.as_slice()),
        };
        let mut f = Forward::new(model.params(), Mode::Train);
        model.forward(&mut f, batch)?;
        pooled.add(&f.finish_without_grad(), idx.len() as f64);
    }
    pooled.apply(model.params_mut());
    Ok(())
}

/// Trains by minimizing the regularized Cox loss and returns the parameters of
/// the epoch with the highest validation c-index (earliest on ties). Without a
/// validation split the final parameters are returned.
pub fn fit(
    mut model: WideDeep,
    train: &Prepared,
    val: Option<&Prepared>,
    config: &TrainConfig,
) -> Result<(WideDeep, TrainReport)> {
    config.validate()?;
    if !train.records.iter().any(|r| r.event) {
        return Err(Error::NoEvents);
    }
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let mut adam = AdamState::new(model.params());
    let mut report = TrainReport {
        train_loss: Vec::with_capacity(config.epochs),
        val_c_index: Vec::new(),
        selected_epoch: config.epochs,
        best_val_c_index: None,
        test_c_index: None,
        seconds: 0.0,
    };
    let mut best = None;
    for epoch in 0..config.epochs {
        let hyper = config.hyper(epoch);
        let mut loss_sum = 0.0;
        let mut used = 0usize;
        for idx in epoch_batches(train.len(), config.batch_mode, &mut rng) {
            let (x, clouds, records) = train.rows(&idx);
            if !records.iter().any(|r| r.event) {
                continue;
            }
            let batch = Batch {
                features: (train.wide_dim > 0).then_some(x.as_slice()),
                clouds: (!clouds.is_empty()).then_some(clouds.as_slice()),
            };
            let mut f = Forward::new(model.params(), Mode::Train);
            let scores = model.forward(&mut f, batch)?;
            let loss = cox_loss_with(
                &mut f.graph,
                scores.total,
                &records,
                config.loss_normalization,
            )?;
            let objective = regularized_loss(&mut f, loss, config.weight_decay)?;
            let value = f.graph.value(objective).item();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss at epoch {}",
                    epoch + 1
                )));
            }
            let out = f.finish(objective)?;
            adam_step(model.params_mut(), &out.grads, &mut adam, &hyper)?;
            loss_sum += value;
            used += 1;
        }
        report.train_loss.push(loss_sum / used.max(1) as f64);
        recalibrate_batch_norm(&mut model, train, config.batch_mode)?;
        if let Some(val) = val {
            let c = evaluate(&model, val)?.c_index;
            report.val_c_index.push(c);
            if report.best_val_c_index.is_none_or(|b| c > b) {
                report.best_val_c_index = Some(c);
                report.selected_epoch = epoch + 1;
                best = Some(model.params().clone());
            }
        }
        log::debug!(
            "epoch {}: loss {:.6} val {:?}",
            epoch + 1,
            report.train_loss[epoch],
            report.val_c_index.last()
        );
    }
    if let Some(best) = best {
        model.params_mut().load_from(&best)?;
    }
    report.seconds = started.elapsed().as_secs_f64();
    Ok((model, report))
}

/// [`fit`] without model selection: all epochs on `train`, final parameters.
pub fn optimize(
    model: WideDeep,
    train: &Prepared,
    config: &TrainConfig,
) -> Result<(WideDeep, TrainReport)> {
    fit(model, train, None, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::widedeep::{ModelConfig, Variant};
    use rand::Rng;

    fn linear_data(n: usize, beta: &[f64], seed: u64) -> Prepared {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = beta.len();
        let mut features = Vec::with_capacity(n * d);
        let mut records = Vec::new();
        for i in 0..n {
            let x: Vec<f64> = (0..d).map(|_| rng.random_range(-1.5..1.5)).collect();
            let eta: f64 = x.iter().zip(beta).map(|(a, b)| a * b).sum();
            let u = 1.0 - rng.random::<f64>();
            let t = (1e-9 - u.ln()) / eta.exp();
            features.extend(x);
            records.push(SurvivalRecord::new(i.to_string(), t, rng.random_bool(0.8)).unwrap());
        }
        Prepared {
            features,
            wide_dim: d,
            clouds: Vec::new(),
            records,
        }
    }

    fn wide_model(d: usize) -> WideDeep {
        let cfg = ModelConfig {
            variant: Variant::Wide,
            ..ModelConfig::default()
        };
        WideDeep::new(&cfg, d, 0).unwrap()
    }

    #[test]
    fn schedules() {
        let s = LrSchedule::Step {
            factor: 0.5,
            every_n_epochs: 40,
        };
        assert_eq!(s.rate(1e-3, 0), 1e-3);
        assert_eq!(s.rate(1e-3, 39), 1e-3);
        assert_eq!(s.rate(1e-3, 40), 5e-4);
        assert_eq!(s.rate(1e-3, 119), 2.5e-4);
        assert_eq!(LrSchedule::Constant.rate(0.1, 1000), 0.1);
    }

    #[test]
    fn config_validation_and_toml() {
        TrainConfig::default().validate().unwrap();
        let bad = TrainConfig {
            split_fractions: [0.8, 0.1, 0.2],
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let text = r#"
            epochs = 5
            learning_rate = 0.01
            lr_schedule = { kind = "constant" }
            batch_mode = { kind = "minibatch", size = 16 }
        "#;
        let c: TrainConfig = toml::from_str(text).unwrap();
        assert_eq!(c.epochs, 5);
        assert_eq!(c.batch_mode, BatchMode::Minibatch { size: 16 });
        assert_eq!(c.beta1, 0.9);
        assert!(toml::from_str::<TrainConfig>("epoch = 3").is_err());
        let round: TrainConfig =
            toml::from_str(&toml::to_string(&TrainConfig::default()).unwrap()).unwrap();
        assert_eq!(round, TrainConfig::default());
    }

    #[test]
    fn full_batch_loss_is_nearly_monotone() {
        let data = linear_data(200, &[0.8, -0.5, 0.3], 1);
        let cfg = TrainConfig {
            epochs: 200,
            learning_rate: 0.005,
            lr_schedule: LrSchedule::Constant,
            weight_decay: 0.01,
            ..TrainConfig::default()
        };
        let (_, report) = optimize(wide_model(3), &data, &cfg).unwrap();
        let increases = report.train_loss.windows(2).filter(|w| w[1] > w[0]).count();
        assert!(increases * 20 <= cfg.epochs, "{increases} increases");
        assert!(report.train_loss.last() < report.train_loss.first());
    }

    #[test]
    fn selected_epoch_is_first_argmax() {
        let data = linear_data(150, &[1.0, -1.0], 2);
        let val = linear_data(60, &[1.0, -1.0], 3);
        let cfg = TrainConfig {
            epochs: 30,
            learning_rate: 0.05,
            ..TrainConfig::default()
        };
        let (model, report) = fit(wide_model(2), &data, Some(&val), &cfg).unwrap();
        let best = report.val_c_index.iter().cloned().fold(f64::MIN, f64::max);
        let first = report.val_c_index.iter().position(|&c| c == best).unwrap();
        assert_eq!(report.selected_epoch, first + 1);
        assert_eq!(report.best_val_c_index, Some(best));
        assert_eq!(evaluate(&model, &val).unwrap().c_index, best);
        assert!(report.test_c_index.is_none());
    }

    #[test]
    fn training_is_deterministic() {
        let data = linear_data(80, &[0.5, 0.5], 4);
        let cfg = TrainConfig {
            epochs: 10,
            batch_mode: BatchMode::Minibatch { size: 16 },
            ..TrainConfig::default()
        };
        let (a, ra) = optimize(wide_model(2), &data, &cfg).unwrap();
        let (b, rb) = optimize(wide_model(2), &data, &cfg).unwrap();
        assert_eq!(a.params(), b.params());
        assert_eq!(ra.train_loss, rb.train_loss);
    }

    #[test]
    fn minibatches_cover_every_subject() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = epoch_batches(33, BatchMode::Minibatch { size: 8 }, &mut rng);
        assert_eq!(b.len(), 4);
        assert_eq!(b.last().unwrap().len(), 9);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..33).collect::<Vec<_>>());
    }

    #[test]
    fn no_events_is_an_error() {
        let mut data = linear_data(20, &[0.5], 5);
        data.records.iter_mut().for_each(|r| r.event = false);
        assert!(matches!(
            optimize(wide_model(1), &data, &TrainConfig::default()),
            Err(Error::NoEvents)
        ));
    }

    #[test]
    fn running_statistics_match_the_training_split() {
        use crate::pointnet::PointNetConfig;
        use crate::synth::{generate_cohort, CohortSpec};
        let cohort = generate_cohort(&CohortSpec {
            n_subjects: 30,
            points_per_cloud: 12,
            ..CohortSpec::default()
        })
        .unwrap();
        let train = Prepared {
            features: Vec::new(),
            wide_dim: 0,
            clouds: cohort.iter().map(|s| s.cloud.clone()).collect(),
            records: cohort.iter().map(|s| s.record.clone()).collect(),
        };
        let cfg = ModelConfig {
            variant: Variant::Deep,
            pointnet: PointNetConfig {
                point_widths: vec![4, 6],
                transform_point_widths: vec![4, 5],
                transform_fc_widths: vec![4],
            },
            global_widths: vec![5, 3],
        };
        let config = TrainConfig {
            epochs: 3,
            learning_rate: 0.05,
            ..TrainConfig::default()
        };
        let model = WideDeep::new(&cfg, 0, 1).unwrap();
        let (model, _) = optimize(model, &train, &config).unwrap();
        let eval: Vec<f64> = train
            .predict(&model)
            .unwrap()
            .iter()
            .map(|s| s.total)
            .collect();
        let refs: Vec<&PointCloud> = train.clouds.iter().collect();
        let mut f = Forward::new(model.params(), Mode::Train);
        let scores = model.forward(&mut f, train.batch(&refs)).unwrap();
        let batch_mode = f.graph.value(scores.total).data().to_vec();
        for (a, b) in eval.iter().zip(&batch_mode) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }
}
