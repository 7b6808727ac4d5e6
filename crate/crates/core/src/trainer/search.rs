use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{LrSchedule, TrainConfig};
use crate::error::{Error, Result};
use crate::widedeep::ModelConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SearchStrategy {
    /// Every combination.
    #[default]
    Grid,
    /// `n_samples` distinct combinations drawn uniformly.
    Random { n_samples: usize, seed: u64 },
}

/// Values to try per hyperparameter; an empty list keeps the base value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSpace {
    pub strategy: SearchStrategy,
    pub learning_rate: Vec<f64>,
    pub weight_decay: Vec<f64>,
    pub beta1: Vec<f64>,
    /// Step-decay factor; selecting one switches the schedule to step decay.
    pub lr_step_factor: Vec<f64>,
    /// PointNet global descriptor width.
    pub descriptor_width: Vec<usize>,
    /// Global MLP output width, the size of `w_deep`.
    pub deep_width: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub learning_rate: Option<f64>,
    pub weight_decay: Option<f64>,
    pub beta1: Option<f64>,
    pub lr_step_factor: Option<f64>,
    pub descriptor_width: Option<usize>,
    pub deep_width: Option<usize>,
}

impl Candidate {
    pub fn apply(&self, train: &mut TrainConfig, model: &mut ModelConfig) {
        if let Some(v) = self.learning_rate {
            train.learning_rate = v;
        }
        if let Some(v) = self.weight_decay {
            train.weight_decay = v;
        }
        if let Some(v) = self.beta1 {
            train.beta1 = v;
        }
        if let Some(factor) = self.lr_step_factor {
            let every_n_epochs = match train.lr_schedule {
                LrSchedule::Step { every_n_epochs, .. } => every_n_epochs,
                LrSchedule::Constant => (train.epochs / 3).max(1),
            };
            train.lr_schedule = LrSchedule::Step {
                factor,
                every_n_epochs,
            };
        }
        if let Some(w) = self.descriptor_width {
            if let Some(last) = model.pointnet.point_widths.last_mut() {
                *last = w;
            }
        }
        if let Some(w) = self.deep_width {
            if let Some(last) = model.global_widths.last_mut() {
                *last = w;
            }
        }
    }

    fn csv_fields(&self) -> [String; 6] {
        let f = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        let u = |v: Option<usize>| v.map(|v| v.to_string()).unwrap_or_default();
        [
            f(self.learning_rate),
            f(self.weight_decay),
            f(self.beta1),
            f(self.lr_step_factor),
            u(self.descriptor_width),
            u(self.deep_width),
        ]
    }
}

fn axis<T: Copy>(values: &[T]) -> Vec<Option<T>> {
    if values.is_empty() {
        vec![None]
    } else {
        values.iter().copied().map(Some).collect()
    }
}

impl SearchSpace {
    pub fn candidates(&self) -> Result<Vec<Candidate>> {
        let mut all = Vec::new();
        for &learning_rate in &axis(&self.learning_rate) {
            for &weight_decay in &axis(&self.weight_decay) {
                for &beta1 in &axis(&self.beta1) {
                    for &lr_step_factor in &axis(&self.lr_step_factor) {
                        for &descriptor_width in &axis(&self.descriptor_width) {
                            for &deep_width in &axis(&self.deep_width) {
                                all.push(Candidate {
                                    learning_rate,
                                    weight_decay,
                                    beta1,
                                    lr_step_factor,
                                    descriptor_width,
                                    deep_width,
                                });
                            }
                        }
                    }
                }
            }
        }
        match self.strategy {
            SearchStrategy::Grid => Ok(all),
            SearchStrategy::Random { n_samples, seed } => {
                if n_samples == 0 {
                    return Err(Error::Config("random search needs n_samples >= 1".into()));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let picks = index::sample(&mut rng, all.len(), n_samples.min(all.len()));
                Ok(picks.into_iter().map(|i| all[i].clone()).collect())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    /// Every evaluated candidate with its validation c-index.
    pub rows: Vec<(Candidate, f64)>,
    /// Row with the highest validation c-index (earliest on ties).
    pub best: usize,
}

impl SearchResult {
    pub fn best_candidate(&self) -> &Candidate {
        &self.rows[self.best].0
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "learning_rate,weight_decay,beta1,lr_step_factor,descriptor_width,deep_width,val_c_index\n",
        );
        for (c, v) in &self.rows {
            s.push_str(&c.csv_fields().join(","));
            s.push_str(&format!(",{v}\n"));
        }
        s
    }
}

/// Scores every candidate with `evaluate` (a validation c-index) and picks
/// the best.
pub fn hyperparameter_search(
    space: &SearchSpace,
    mut evaluate: impl FnMut(&Candidate) -> Result<f64>,
) -> Result<SearchResult> {
    let candidates = space.candidates()?;
    let mut rows: Vec<(Candidate, f64)> = Vec::with_capacity(candidates.len());
    let mut best = 0;
    for c in candidates {
        let v = evaluate(&c)?;
        log::info!("search candidate {:?}: validation c-index {v:.4}", c);
        if !rows.is_empty() && v > rows[best].1 {
            best = rows.len();
        }
        rows.push((c, v));
    }
    Ok(SearchResult { rows, best })
}
