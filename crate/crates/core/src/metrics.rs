//! Harrell's concordance index for right-censored outcomes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::SurvivalRecord;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationResult {
    pub c_index: f64,
    pub num_comparable_pairs: u64,
    pub num_concordant: u64,
    pub num_tied_scores: u64,
}

impl EvaluationResult {
    fn from_counts(comparable: u64, concordant: u64, tied: u64) -> Result<Self> {
        if comparable == 0 {
            return Err(Error::NoComparablePairs);
        }
        Ok(EvaluationResult {
            c_index: (concordant as f64 + 0.5 * tied as f64) / comparable as f64,
            num_comparable_pairs: comparable,
            num_concordant: concordant,
            num_tied_scores: tied,
        })
    }
}

fn check_inputs(scores: &[f64], records: &[SurvivalRecord]) -> Result<()> {
    if scores.len() != records.len() {
        return Err(Error::Shape {
            op: "concordance_index",
            lhs: vec![scores.len()],
            rhs: vec![records.len()],
        });
    }
    if records.len() < 2 {
        return Err(Error::InvalidArgument(
            "concordance index needs at least 2 subjects".into(),
        ));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("concordance_index scores".into()));
    }
    Ok(())
}

/// Harrell's c-index by scanning every pair.
///
/// A pair `(i, j)` is comparable when `y_i < y_j` and subject `i` had the
/// event; it is concordant when `score_i > score_j`. Equal scores count one
/// half. Pairs with equal times are never comparable.
pub fn concordance_index(scores: &[f64], records: &[SurvivalRecord]) -> Result<EvaluationResult> {
    check_inputs(scores, records)?;
    let (mut comparable, mut concordant, mut tied) = (0u64, 0u64, 0u64);
    for (i, ri) in records.iter().enumerate() {
        if !ri.event {
            continue;
        }
        for (j, rj) in records.iter().enumerate() {
            if ri.time < rj.time {
                comparable += 1;
                if scores[i] > scores[j] {
                    concordant += 1;
                } else if scores[i] == scores[j] {
                    tied += 1;
                }
            }
        }
    }
    EvaluationResult::from_counts(comparable, concordant, tied)
}

/// Same counts as [`concordance_index`] in `O(n log n)` using a Fenwick tree
/// over score ranks.
pub fn concordance_index_fast(
    scores: &[f64],
    records: &[SurvivalRecord],
) -> Result<EvaluationResult> {
    check_inputs(scores, records)?;
    let n = records.len();
    let mut sorted_scores: Vec<f64> = scores.to_vec();
    sorted_scores.sort_by(f64::total_cmp);
    sorted_scores.dedup();
    let rank = |s: f64| sorted_scores.partition_point(|&x| x < s);

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| records[b].time.total_cmp(&records[a].time));

    let mut tree = Fenwick::new(sorted_scores.len());
    let mut inserted = 0u64;
    let (mut comparable, mut concordant, mut tied) = (0u64, 0u64, 0u64);
    let mut start = 0;
    while start < n {
        let t = records[order[start]].time;
        let mut end = start;
        while end < n && records[order[end]].time == t {
            end += 1;
        }
        // the tree holds exactly the subjects with strictly later times
        for &i in &order[start..end] {
            if records[i].event {
                let r = rank(scores[i]);
                let below = tree.prefix(r);
                let equal = tree.prefix(r + 1) - below;
                comparable += inserted;
                concordant += below;
                tied += equal;
            }
        }
        for &i in &order[start..end] {
            tree.add(rank(scores[i]));
            inserted += 1;
        }
        start = end;
    }
    EvaluationResult::from_counts(comparable, concordant, tied)
}

struct Fenwick {
    counts: Vec<u64>,
}

impl Fenwick {
    fn new(n: usize) -> Self {
        Fenwick {
            counts: vec![0; n + 1],
        }
    }

    fn add(&mut self, idx: usize) {
        let mut i = idx + 1;
        while i < self.counts.len() {
            self.counts[i] += 1;
            i += i & i.wrapping_neg();
        }
    }

    /// Number of inserted ranks `< idx`.
    fn prefix(&self, idx: usize) -> u64 {
        let mut i = idx;
        let mut s = 0;
        while i > 0 {
            s += self.counts[i];
            i -= i & i.wrapping_neg();
        }
        s
    }
}

/// Area under the ROC curve by the Mann–Whitney rank-sum statistic with
/// mid-ranks for tied scores. `labels[i]` is the positive class indicator.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape {
            op: "roc_auc",
            lhs: vec![scores.len()],
            rhs: vec![labels.len()],
        });
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidArgument("roc_auc needs both classes".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut start = 0;
    while start < idx.len() {
        let mut end = start;
        while end < idx.len() && scores[idx[end]] == scores[idx[start]] {
            end += 1;
        }
        let mid_rank = (start + end + 1) as f64 / 2.0;
        rank_sum += mid_rank * idx[start..end].iter().filter(|&&i| labels[i]).count() as f64;
        start = end;
    }
    let (p, q) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * q))
}

/// c-index of a binary outcome encoded as uncensored survival data: positives
/// have their event at time 1, negatives at time 2. Equals the ROC AUC.
pub fn auc_equivalence_check(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let records: Vec<SurvivalRecord> = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| SurvivalRecord::new(i.to_string(), if l { 1.0 } else { 2.0 }, true))
        .collect::<Result<_>>()?;
    Ok(concordance_index(scores, &records)?.c_index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn recs(times: &[f64], events: &[bool]) -> Vec<SurvivalRecord> {
        times
            .iter()
            .zip(events)
            .enumerate()
            .map(|(i, (&t, &e))| SurvivalRecord::new(i.to_string(), t, e).unwrap())
            .collect()
    }

    fn random_dataset(rng: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<SurvivalRecord>) {
        let times: Vec<f64> = (0..n).map(|_| rng.random_range(1..=20) as f64).collect();
        let mut events: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        events[0] = true;
        // coarse scores so ties occur
        let scores = (0..n)
            .map(|_| (rng.random_range(-5.0..5.0f64) * 2.0).round() / 2.0)
            .collect();
        (scores, recs(&times, &events))
    }

    #[test]
    fn perfect_and_inverted_rankings() {
        let r = recs(&[1.0, 2.0, 3.0], &[true, true, true]);
        assert_eq!(
            concordance_index(&[3.0, 2.0, 1.0], &r).unwrap().c_index,
            1.0
        );
        assert_eq!(
            concordance_index(&[1.0, 2.0, 3.0], &r).unwrap().c_index,
            0.0
        );
    }

    #[test]
    fn censored_example() {
        let r = recs(&[2.0, 4.0, 6.0, 8.0], &[true, false, true, false]);
        let e = concordance_index(&[5.0, 1.0, 2.0, 4.0], &r).unwrap();
        assert_eq!(e.num_comparable_pairs, 4);
        assert_eq!(e.num_concordant, 3);
        assert_eq!(e.num_tied_scores, 0);
        assert_eq!(e.c_index, 0.75);
    }

    #[test]
    fn no_comparable_pairs_is_an_error() {
        let r = recs(&[1.0, 2.0], &[false, false]);
        let err = concordance_index(&[0.0, 1.0], &r).unwrap_err();
        assert_eq!(err.to_string(), "no comparable pairs");
        // equal times with both events are not comparable
        let r = recs(&[2.0, 2.0], &[true, true]);
        assert!(concordance_index(&[0.0, 1.0], &r).is_err());
        assert!(concordance_index_fast(&[0.0, 1.0], &r).is_err());
    }

    #[test]
    fn fast_matches_pair_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let n = rng.random_range(2..=200);
            let (s, r) = random_dataset(&mut rng, n);
            let a = concordance_index(&s, &r);
            let b = concordance_index_fast(&s, &r);
            match (a, b) {
                (Ok(a), Ok(b)) => assert_eq!(a, b),
                (Err(_), Err(_)) => {}
                other => panic!("disagreement: {other:?}"),
            }
        }
    }

    #[test]
    fn auc_examples() {
        assert_eq!(
            auc_equivalence_check(&[0.3, 0.3], &[false, true]).unwrap(),
            0.5
        );
        let scores = [0.1, 0.9, 0.4, 0.8, 0.2];
        let labels: Vec<bool> = scores.iter().map(|&s| s > 0.5).collect();
        assert_eq!(auc_equivalence_check(&scores, &labels).unwrap(), 1.0);
        assert_eq!(roc_auc(&scores, &labels).unwrap(), 1.0);
    }

    #[test]
    fn c_index_equals_auc_on_binary_outcomes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let n = rng.random_range(4..40);
            let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
            labels[0] = true;
            labels[1] = false;
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..6) as f64).collect();
            let c = auc_equivalence_check(&scores, &labels).unwrap();
            let auc = roc_auc(&scores, &labels).unwrap();
            assert!((c - auc).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn negated_scores_complement(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(3..30);
            let times: Vec<f64> = (0..n).map(|i| i as f64 + 1.0).collect();
            let events: Vec<bool> = (0..n).map(|i| i == 0 || rng.random_bool(0.5)).collect();
            let r = recs(&times, &events);
            // continuous scores: ties have probability zero
            let s: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let neg: Vec<f64> = s.iter().map(|x| -x).collect();
            let a = concordance_index(&s, &r).unwrap().c_index;
            let b = concordance_index(&neg, &r).unwrap().c_index;
            prop_assert!((a + b - 1.0).abs() < 1e-12);
        }

        #[test]
        fn invariant_under_monotone_transform(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (s, r) = random_dataset(&mut rng, 25);
            let t: Vec<f64> = s.iter().map(|x| (x * 0.7).exp() + 3.0).collect();
            let a = concordance_index(&s, &r);
            let b = concordance_index(&t, &r);
            if let (Ok(a), Ok(b)) = (a, b) {
                prop_assert_eq!(a, b);
            }
        }
    }
}
