//! The evaluation protocol: split, fit the encoder on the training part,
//! train with validation-based selection, then score the held-out test part.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dataio::{load_clouds, CohortManifest, Dataset};
use crate::error::{Error, Result};
use crate::loss::SurvivalRecord;
use crate::metrics::{concordance_index_fast, EvaluationResult};
use crate::pointnet::PointCloud;
use crate::preprocess::{FeatureEncoder, FeatureSchema};
use crate::trainer::{
    evaluate, fit, hyperparameter_search, split_dataset, Prepared, SearchResult, SearchSpace,
    Split, TrainConfig, TrainReport,
};
use crate::widedeep::{Batch, ModelConfig, ScoreParts, Variant, WideDeep};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Resample every cloud to this many points; unset requires equal sizes.
    pub points_per_cloud: Option<usize>,
}

/// Everything a run needs besides the data, read from one TOML file with
/// `[train]`, `[model]`, `[features]`, `[data]` and `[search]` tables.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub features: FeatureSchema,
    pub data: DataConfig,
    pub search: SearchSpace,
}

impl RunConfig {
    pub fn from_toml(s: &str) -> Result<Self> {
        let c: RunConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&s).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.model.validate()?;
        if self.data.points_per_cloud == Some(0) {
            return Err(Error::Config("points_per_cloud must be positive".into()));
        }
        Ok(())
    }

    /// Copy with the variant replaced.
    pub fn with_variant(&self, variant: Variant) -> Self {
        let mut c = self.clone();
        c.model.variant = variant;
        c
    }
}

/// Model inputs for the subjects `idx`, encoded with `encoder` for wide
/// variants.
pub fn prepare(
    data: &Dataset,
    idx: &[usize],
    encoder: Option<&FeatureEncoder>,
    variant: Variant,
) -> Result<Prepared> {
    let (features, wide_dim) = if variant.has_wide() {
        let enc = encoder.ok_or(Error::NotFitted)?;
        let raw: Vec<_> = idx.iter().map(|&i| data.raw[i].clone()).collect();
        (enc.transform_matrix(&raw)?, enc.width())
    } else {
        (Vec::new(), 0)
    };
    let clouds = if variant.has_deep() {
        idx.iter().map(|&i| data.clouds[i].clone()).collect()
    } else {
        Vec::new()
    };
    Ok(Prepared {
        features,
        wide_dim,
        clouds,
        records: idx.iter().map(|&i| data.records[i].clone()).collect(),
    })
}

/// Summary of the wide and deep contributions on a set of scores.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreDecomposition {
    pub wide_mean: f64,
    pub wide_sd: f64,
    pub deep_mean: f64,
    pub deep_sd: f64,
    /// Pearson correlation of the two parts; 0 when either is constant.
    pub correlation: f64,
    /// c-index of each part on its own.
    pub wide_c_index: f64,
    pub deep_c_index: f64,
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

impl ScoreDecomposition {
    pub fn new(scores: &[ScoreParts], records: &[SurvivalRecord]) -> Result<Self> {
        let wide: Vec<f64> = scores.iter().map(|s| s.wide).collect();
        let deep: Vec<f64> = scores.iter().map(|s| s.deep).collect();
        let (wm, ws) = mean_sd(&wide);
        let (dm, ds) = mean_sd(&deep);
        let cov = wide
            .iter()
            .zip(&deep)
            .map(|(w, d)| (w - wm) * (d - dm))
            .sum::<f64>()
            / wide.len() as f64;
        Ok(ScoreDecomposition {
            wide_mean: wm,
            wide_sd: ws,
            deep_mean: dm,
            deep_sd: ds,
            correlation: if ws > 0.0 && ds > 0.0 {
                cov / (ws * ds)
            } else {
                0.0
            },
            wide_c_index: concordance_index_fast(&wide, records)?.c_index,
            deep_c_index: concordance_index_fast(&deep, records)?.c_index,
        })
    }
}

/// Result of one split of the protocol.
#[derive(Clone, Debug)]
pub struct SplitRun {
    pub split: Split,
    pub model: WideDeep,
    pub encoder: Option<FeatureEncoder>,
    /// Includes the test c-index.
    pub report: TrainReport,
    pub test: EvaluationResult,
    pub test_scores: Vec<ScoreParts>,
    pub test_records: Vec<SurvivalRecord>,
}

impl SplitRun {
    pub fn checkpoint(&self, config: &RunConfig) -> Result<Checkpoint> {
        Checkpoint::new(
            &self.model,
            self.encoder.as_ref(),
            &config.train,
            config.data.points_per_cloud,
        )
    }

    /// Wide and deep contributions on the test split; `None` unless both
    /// pathways are present.
    pub fn decomposition(&self) -> Result<Option<ScoreDecomposition>> {
        if self.model.variant() != Variant::WideDeep {
            return Ok(None);
        }
        ScoreDecomposition::new(&self.test_scores, &self.test_records).map(Some)
    }
}

struct Parts {
    encoder: Option<FeatureEncoder>,
    train: Prepared,
    val: Prepared,
}

fn prepare_split(data: &Dataset, split: &Split, config: &RunConfig) -> Result<Parts> {
    let variant = config.model.variant;
    let encoder = if variant.has_wide() {
        let mut enc = FeatureEncoder::new(config.features.clone());
        let raw: Vec<_> = split.train.iter().map(|&i| data.raw[i].clone()).collect();
        enc.fit(&raw)?;
        Some(enc)
    } else {
        None
    };
    Ok(Parts {
        train: prepare(data, &split.train, encoder.as_ref(), variant)?,
        val: prepare(data, &split.val, encoder.as_ref(), variant)?,
        encoder,
    })
}

/// Splits with `seed`, trains with validation-based epoch selection, and only
/// then scores the test part. `seed` also drives initialization and batching.
pub fn run_split(data: &Dataset, config: &RunConfig, seed: u64) -> Result<SplitRun> {
    config.validate()?;
    let split = split_dataset(&data.records, config.train.split_fractions, seed)?;
    let parts = prepare_split(data, &split, config)?;
    let model = WideDeep::new(&config.model, parts.train.wide_dim, seed)?;
    let train_config = TrainConfig {
        rng_seed: seed,
        ..config.train.clone()
    };
    let (model, mut report) = fit(model, &parts.train, Some(&parts.val), &train_config)?;
    let test_data = prepare(
        data,
        &split.test,
        parts.encoder.as_ref(),
        config.model.variant,
    )?;
    let test = evaluate(&model, &test_data)?;
    let test_scores = test_data.predict(&model)?;
    report.test_c_index = Some(test.c_index);
    log::info!(
        "{} seed {seed}: selected epoch {}, test c-index {:.4}",
        config.model.variant,
        report.selected_epoch,
        test.c_index
    );
    Ok(SplitRun {
        split,
        model,
        encoder: parts.encoder,
        report,
        test,
        test_scores,
        test_records: test_data.records,
    })
}

/// Seed of repeat `r` under a master seed.
pub fn repeat_seed(master: u64, r: usize) -> u64 {
    master.wrapping_add(r as u64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepeatRow {
    pub variant: Variant,
    pub repeat: usize,
    pub seed: u64,
    pub test_c_index: f64,
    pub best_val_c_index: f64,
    pub selected_epoch: usize,
}

/// Runs every variant on the same `n_repeats` splits.
pub fn run_repeats(
    data: &Dataset,
    config: &RunConfig,
    variants: &[Variant],
    n_repeats: usize,
    master_seed: u64,
) -> Result<Vec<RepeatRow>> {
    if n_repeats == 0 || variants.is_empty() {
        return Err(Error::InvalidArgument(
            "need at least one repeat and one variant".into(),
        ));
    }
    let mut rows = Vec::with_capacity(n_repeats * variants.len());
    for &variant in variants {
        let cfg = config.with_variant(variant);
        for r in 0..n_repeats {
            let seed = repeat_seed(master_seed, r);
            let run = run_split(data, &cfg, seed)?;
            rows.push(RepeatRow {
                variant,
                repeat: r + 1,
                seed,
                test_c_index: run.test.c_index,
                best_val_c_index: run.report.best_val_c_index.unwrap_or(f64::NAN),
                selected_epoch: run.report.selected_epoch,
            });
        }
    }
    Ok(rows)
}

/// `variant,repeat,seed,test_c_index,best_val_c_index,selected_epoch`.
pub fn repeat_csv(rows: &[RepeatRow]) -> String {
    let mut s = String::from("variant,repeat,seed,test_c_index,best_val_c_index,selected_epoch\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.variant, r.repeat, r.seed, r.test_c_index, r.best_val_c_index, r.selected_epoch
        ));
    }
    s
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Median test c-index per variant, in first-seen order.
pub fn medians(rows: &[RepeatRow]) -> Vec<(Variant, f64)> {
    let mut order: Vec<Variant> = Vec::new();
    for r in rows {
        if !order.contains(&r.variant) {
            order.push(r.variant);
        }
    }
    order
        .into_iter()
        .filter_map(|v| {
            let vals: Vec<f64> = rows
                .iter()
                .filter(|r| r.variant == v)
                .map(|r| r.test_c_index)
                .collect();
            median(&vals).map(|m| (v, m))
        })
        .collect()
}

/// Scores every candidate of `config.search` by its best validation c-index
/// on one split drawn with `seed`.
pub fn run_search(data: &Dataset, config: &RunConfig, seed: u64) -> Result<SearchResult> {
    config.validate()?;
    let split = split_dataset(&data.records, config.train.split_fractions, seed)?;
    let parts = prepare_split(data, &split, config)?;
    hyperparameter_search(&config.search, |candidate| {
        let mut train = TrainConfig {
            rng_seed: seed,
            ..config.train.clone()
        };
        let mut model_config = config.model.clone();
        candidate.apply(&mut train, &mut model_config);
        let model = WideDeep::new(&model_config, parts.train.wide_dim, seed)?;
        let (_, report) = fit(model, &parts.train, Some(&parts.val), &train)?;
        Ok(report.best_val_c_index.unwrap_or(f64::NAN))
    })
}

/// Scores of every manifest row under a checkpoint.
pub fn predict_manifest(
    checkpoint: &Checkpoint,
    manifest: &CohortManifest,
    seed: u64,
) -> Result<Vec<ScoreParts>> {
    let model = checkpoint.model()?;
    let variant = model.variant();
    let features = match (&checkpoint.encoder, variant.has_wide()) {
        (Some(enc), true) => {
            let raw: Vec<_> = manifest.rows.iter().map(|r| r.raw.clone()).collect();
            Some(enc.transform_matrix(&raw)?)
        }
        (None, true) => return Err(Error::Checkpoint("wide model without encoder".into())),
        _ => None,
    };
    let clouds = if variant.has_deep() {
        load_clouds(manifest, checkpoint.points_per_cloud, seed)?
    } else {
        Vec::new()
    };
    let refs: Vec<&PointCloud> = clouds.iter().collect();
    model.predict(Batch {
        features: features.as_deref(),
        clouds: variant.has_deep().then_some(refs.as_slice()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pointnet::PointNetConfig;
    use crate::synth::{generate_cohort, CohortSpec};
    use crate::trainer::LrSchedule;

    fn dataset(n: usize) -> Dataset {
        let spec = CohortSpec {
            n_subjects: n,
            points_per_cloud: 16,
            rng_seed: 4,
            ..CohortSpec::default()
        };
        let s = generate_cohort(&spec).unwrap();
        Dataset {
            raw: s.iter().map(|s| s.raw.clone()).collect(),
            records: s.iter().map(|s| s.record.clone()).collect(),
            clouds: s.into_iter().map(|s| s.cloud).collect(),
        }
    }

    fn small() -> RunConfig {
        let mut c = RunConfig::default();
        c.train.epochs = 4;
        c.train.learning_rate = 0.01;
        c.train.lr_schedule = LrSchedule::Constant;
        c.model.pointnet = PointNetConfig {
            point_widths: vec![4, 6],
            transform_point_widths: vec![4, 5],
            transform_fc_widths: vec![4],
        };
        c.model.global_widths = vec![5, 3];
        c
    }

    #[test]
    fn toml_sections_parse() {
        let c = RunConfig::from_toml(
            r#"
            [train]
            epochs = 7
            lr_schedule = { kind = "constant" }
            [model]
            variant = "deep"
            global_widths = [8, 4]
            [features]
            include_volume = true
            [data]
            points_per_cloud = 256
            [search]
            learning_rate = [0.001, 0.01]
            "#,
        )
        .unwrap();
        assert_eq!(c.train.epochs, 7);
        assert_eq!(c.model.variant, Variant::Deep);
        assert!(c.features.include_volume);
        assert_eq!(c.data.points_per_cloud, Some(256));
        assert_eq!(c.search.learning_rate.len(), 2);
        assert!(RunConfig::from_toml("[train]\nepoch = 3").is_err());
        assert!(RunConfig::from_toml("[train]\nepochs = 0").is_err());
    }

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn prepare_drops_unused_inputs() {
        let data = dataset(20);
        let mut enc = FeatureEncoder::new(FeatureSchema::default());
        enc.fit(&data.raw).unwrap();
        let idx = [0, 3, 5];
        let wide = prepare(&data, &idx, Some(&enc), Variant::Wide).unwrap();
        assert!(wide.clouds.is_empty());
        assert_eq!(wide.features.len(), 3 * enc.width());
        let deep = prepare(&data, &idx, None, Variant::Deep).unwrap();
        assert_eq!((deep.wide_dim, deep.clouds.len()), (0, 3));
        assert!(prepare(&data, &idx, None, Variant::Wide).is_err());
    }

    #[test]
    fn split_run_reports_test_and_decomposition() {
        let data = dataset(60);
        let run = run_split(&data, &small(), 1).unwrap();
        assert_eq!(run.report.test_c_index, Some(run.test.c_index));
        assert_eq!(run.test_scores.len(), run.split.test.len());
        let d = run.decomposition().unwrap().unwrap();
        assert!(d.wide_sd > 0.0 && d.deep_sd > 0.0);
        let ck = run.checkpoint(&small()).unwrap();
        assert_eq!(ck.model().unwrap().params(), run.model.params());
        let wide = run_split(&data, &small().with_variant(Variant::Wide), 1).unwrap();
        assert!(wide.decomposition().unwrap().is_none());
    }

    #[test]
    fn repeats_are_reproducible() {
        let data = dataset(60);
        let variants = [Variant::Wide, Variant::Deep];
        let a = run_repeats(&data, &small(), &variants, 2, 11).unwrap();
        let b = run_repeats(&data, &small(), &variants, 2, 11).unwrap();
        assert_eq!(repeat_csv(&a), repeat_csv(&b));
        assert_eq!(a.len(), 4);
        let m = medians(&a);
        assert_eq!(m.iter().map(|(v, _)| *v).collect::<Vec<_>>(), variants);
    }

    #[test]
    fn search_covers_the_space() {
        let data = dataset(60);
        let mut c = small().with_variant(Variant::Wide);
        c.search.weight_decay = vec![0.0, 0.1];
        let r = run_search(&data, &c, 2).unwrap();
        assert_eq!(r.rows.len(), 2);
    }
}
