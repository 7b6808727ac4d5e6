use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::SurvivalRecord;

/// Disjoint index sets covering `0..n`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Reshuffles at most this many times looking for non-degenerate splits.
pub const MAX_SPLIT_ATTEMPTS: usize = 1000;

fn has_comparable_pair(records: &[SurvivalRecord], idx: &[usize]) -> bool {
    let max_time = idx
        .iter()
        .map(|&i| records[i].time)
        .fold(f64::MIN, f64::max);
    idx.iter()
        .any(|&i| records[i].event && records[i].time < max_time)
}

/// Sizes `round(f_train·n)`, `round(f_val·n)` and the remainder.
pub fn split_sizes(n: usize, fractions: [f64; 3]) -> Result<[usize; 3]> {
    let train = (fractions[0] * n as f64).round() as usize;
    let val = (fractions[1] * n as f64).round() as usize;
    let sizes = [train, val, n.saturating_sub(train + val)];
    if sizes[0] < 2 || sizes[1] < 2 || sizes[2] < 2 || train + val > n {
        return Err(Error::InvalidArgument(format!(
            "{n} subjects cannot be split {fractions:?} with at least 2 per part"
        )));
    }
    Ok(sizes)
}

/// Random train/validation/test split. Every part must contain an event, and
/// the validation and test parts a comparable pair for the c-index; the
/// shuffle is redrawn until they do.
pub fn split_dataset(records: &[SurvivalRecord], fractions: [f64; 3], seed: u64) -> Result<Split> {
    let [n_train, n_val, _] = split_sizes(records.len(), fractions)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..records.len()).collect();
    for _ in 0..MAX_SPLIT_ATTEMPTS {
        order.shuffle(&mut rng);
        let split = Split {
            train: order[..n_train].to_vec(),
            val: order[n_train..n_train + n_val].to_vec(),
            test: order[n_train + n_val..].to_vec(),
        };
        let ok = split.train.iter().any(|&i| records[i].event)
            && has_comparable_pair(records, &split.val)
            && has_comparable_pair(records, &split.test);
        if ok {
            return Ok(split);
        }
    }
    Err(Error::InvalidArgument(format!(
        "no split with events in every part after {MAX_SPLIT_ATTEMPTS} attempts"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn recs(n: usize, every: usize) -> Vec<SurvivalRecord> {
        (0..n)
            .map(|i| SurvivalRecord::new(i.to_string(), 1.0 + i as f64, i % every == 0).unwrap())
            .collect()
    }

    #[test]
    fn default_fractions_on_100() {
        let s = split_dataset(&recs(100, 2), [0.8, 0.1, 0.1], 0).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (80, 10, 10));
    }

    #[test]
    fn same_seed_same_split() {
        let r = recs(50, 3);
        assert_eq!(
            split_dataset(&r, [0.6, 0.2, 0.2], 9).unwrap(),
            split_dataset(&r, [0.6, 0.2, 0.2], 9).unwrap()
        );
        assert_ne!(
            split_dataset(&r, [0.6, 0.2, 0.2], 9).unwrap(),
            split_dataset(&r, [0.6, 0.2, 0.2], 10).unwrap()
        );
    }

    #[test]
    fn impossible_constraints_error() {
        // one event cannot be in all three parts
        assert!(split_dataset(&recs(30, 100), [0.8, 0.1, 0.1], 0).is_err());
        assert!(split_dataset(&recs(5, 1), [0.8, 0.1, 0.1], 0).is_err());
    }

    proptest! {
        #[test]
        fn splits_partition_the_data(n in 20usize..200, seed in any::<u64>()) {
            let r = recs(n, 2);
            let s = split_dataset(&r, [0.7, 0.15, 0.15], seed).unwrap();
            let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            for part in [&s.train, &s.val, &s.test] {
                prop_assert!(part.iter().any(|&i| r[i].event));
            }
        }
    }
}
