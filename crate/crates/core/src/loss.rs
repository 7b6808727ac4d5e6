//! Negative Cox log partial likelihood for right-censored data.
//!
//! For event subjects `i` with risk set `R_i = { j : y_j >= y_i }`:
//!
//! ```text
//! loss = -1/E * sum_{i: event} [ mu_i - log sum_{j in R_i} exp(mu_j) ]
//! ```
//!
//! Ties share a risk set (Breslow). Risk sets are nested prefixes of the
//! subjects sorted by decreasing time, so both passes are a single sweep.

use serde::{Deserialize, Serialize};

use crate::autodiff::{CustomOp, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::Forward;

/// Observed outcome of one subject: `time = min(event time, censoring time)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurvivalRecord {
    pub subject_id: String,
    /// Months; strictly positive.
    pub time: f64,
    /// `true` when the event was observed, `false` when right censored.
    pub event: bool,
}

impl SurvivalRecord {
    pub fn new(subject_id: impl Into<String>, time: f64, event: bool) -> Result<Self> {
        let subject_id = subject_id.into();
        if !(time.is_finite() && time > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "subject {subject_id}: observed time must be positive, got {time}"
            )));
        }
        Ok(SurvivalRecord {
            subject_id,
            time,
            event,
        })
    }
}

/// How the summed partial log-likelihood is scaled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossNormalization {
    /// Divide by the number of events.
    #[default]
    Events,
    None,
}

/// Risk sets of all event subjects, stored as prefixes of one ordering.
#[derive(Clone, Debug)]
pub struct RiskSetIndex {
    /// Subjects by decreasing time (ties by increasing index).
    order: Vec<usize>,
    /// `(event subject, size of its risk-set prefix in order)`, in `order`.
    events: Vec<(usize, usize)>,
}

impl RiskSetIndex {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &[usize])> + '_ {
        self.events.iter().map(|&(i, len)| (i, &self.order[..len]))
    }

    pub fn risk_set(&self, subject: usize) -> Option<&[usize]> {
        self.events
            .iter()
            .find(|(i, _)| *i == subject)
            .map(|&(_, len)| &self.order[..len])
    }
}

fn descending_order(records: &[SurvivalRecord]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| records[b].time.total_cmp(&records[a].time).then(a.cmp(&b)));
    order
}

/// Ends (exclusive) of runs of equal time within `order`.
fn tie_group_ends(order: &[usize], records: &[SurvivalRecord]) -> Vec<usize> {
    let mut ends = Vec::new();
    for pos in 1..=order.len() {
        if pos == order.len() || records[order[pos]].time != records[order[pos - 1]].time {
            ends.push(pos);
        }
    }
    ends
}

pub fn build_risk_sets(records: &[SurvivalRecord]) -> RiskSetIndex {
    let order = descending_order(records);
    let mut events = Vec::new();
    let mut start = 0;
    for end in tie_group_ends(&order, records) {
        for &i in &order[start..end] {
            if records[i].event {
                events.push((i, end));
            }
        }
        start = end;
    }
    RiskSetIndex { order, events }
}

#[derive(Debug)]
struct LogSumExp {
    max: f64,
    sum: f64,
}

impl LogSumExp {
    fn new() -> Self {
        LogSumExp {
            max: f64::NEG_INFINITY,
            sum: 0.0,
        }
    }

    fn push(&mut self, x: f64) {
        if x > self.max {
            self.sum = self.sum * (self.max - x).exp() + 1.0;
            self.max = x;
        } else {
            self.sum += (x - self.max).exp();
        }
    }

    fn value(&self) -> f64 {
        self.max + self.sum.ln()
    }
}

#[derive(Debug)]
struct CoxPartialLikelihood {
    order: Vec<usize>,
    group_ends: Vec<usize>,
    events: Vec<bool>,
    /// `log sum_{j in R_i} exp(mu_j)` per subject; unused for censored ones.
    log_denominator: Vec<f64>,
    scale: f64,
}

impl CustomOp for CoxPartialLikelihood {
    fn name(&self) -> &'static str {
        "cox_loss"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_output: &[f64]) -> Vec<Vec<f64>> {
        let mu = inputs[0].data();
        let mut grad = vec![0.0; mu.len()];
        // Ascending time: subject k collects exp(mu_k - lse_i) from every event
        // i with y_i <= y_k, accumulated in the log domain.
        let mut acc = LogSumExp::new();
        let mut end = self.order.len();
        for &start in self
            .group_ends
            .iter()
            .rev()
            .skip(1)
            .chain(std::iter::once(&0))
        {
            let group = &self.order[start..end];
            for &i in group {
                if self.events[i] {
                    acc.push(-self.log_denominator[i]);
                }
            }
            let log_acc = acc.value();
            for &k in group {
                let mut g = if log_acc.is_finite() {
                    (mu[k] + log_acc).exp()
                } else {
                    0.0
                };
                if self.events[k] {
                    g -= 1.0;
                }
                grad[k] = g * self.scale * grad_output[0];
            }
            end = start;
        }
        vec![grad]
    }
}

/// Events-normalized negative log partial likelihood of `scores` (shape `[n]`).
pub fn cox_loss(graph: &mut Graph, scores: Var, records: &[SurvivalRecord]) -> Result<Var> {
    cox_loss_with(graph, scores, records, LossNormalization::Events)
}

pub fn cox_loss_with(
    graph: &mut Graph,
    scores: Var,
    records: &[SurvivalRecord],
    normalization: LossNormalization,
) -> Result<Var> {
    let mu = graph.value(scores);
    if mu.numel() != records.len() || mu.ndim() != 1 {
        return Err(Error::Shape {
            op: "cox_loss",
            lhs: mu.shape().to_vec(),
            rhs: vec![records.len()],
        });
    }
    if records.len() < 2 {
        return Err(Error::InvalidArgument(
            "cox_loss needs at least 2 subjects".into(),
        ));
    }
    if !mu.is_finite() {
        return Err(Error::NonFinite("cox_loss scores".into()));
    }
    let n_events = records.iter().filter(|r| r.event).count();
    if n_events == 0 {
        return Err(Error::NoEvents);
    }
    let mu = mu.data();
    let order = descending_order(records);
    let group_ends = tie_group_ends(&order, records);
    let mut log_denominator = vec![f64::NAN; records.len()];
    let mut acc = LogSumExp::new();
    let mut total = 0.0;
    let mut start = 0;
    for &end in &group_ends {
        for &j in &order[start..end] {
            acc.push(mu[j]);
        }
        let lse = acc.value();
        for &i in &order[start..end] {
            if records[i].event {
                log_denominator[i] = lse;
                total += mu[i] - lse;
            }
        }
        start = end;
    }
    let scale = match normalization {
        LossNormalization::Events => 1.0 / n_events as f64,
        LossNormalization::None => 1.0,
    };
    let op = CoxPartialLikelihood {
        order,
        group_ends,
        events: records.iter().map(|r| r.event).collect(),
        log_denominator,
        scale,
    };
    Ok(graph.custom(&[scores], Tensor::scalar(-total * scale), Box::new(op)))
}

/// Loss value without building a differentiable graph around it.
pub fn cox_loss_value(scores: &[f64], records: &[SurvivalRecord]) -> Result<f64> {
    let mut g = Graph::new();
    let s = g.constant(Tensor::vector(scores.to_vec())?);
    let l = cox_loss(&mut g, s, records)?;
    Ok(g.value(l).item())
}

/// `loss + weight_decay * sum ||W||^2` over the weight parameters used in the
/// pass (biases and batch-norm scale/shift excluded).
pub fn regularized_loss(f: &mut Forward<'_>, loss: Var, weight_decay: f64) -> Result<Var> {
    if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "weight decay must be non-negative, got {weight_decay}"
        )));
    }
    if weight_decay == 0.0 {
        return Ok(loss);
    }
    match f.weight_penalty(weight_decay)? {
        Some(p) => f.graph.add(loss, p),
        None => Ok(loss),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::max_rel_error;
    use crate::autodiff::Mode;
    use crate::nn::{ParamKind, ParamSet};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn recs(times: &[f64], events: &[bool]) -> Vec<SurvivalRecord> {
        times
            .iter()
            .zip(events)
            .enumerate()
            .map(|(i, (&t, &e))| SurvivalRecord::new(format!("s{i}"), t, e).unwrap())
            .collect()
    }

    /// Risk sets enumerated straight from the definition.
    fn brute_force_loss(mu: &[f64], r: &[SurvivalRecord]) -> f64 {
        let mut total = 0.0;
        let mut events = 0;
        for i in 0..r.len() {
            if !r[i].event {
                continue;
            }
            events += 1;
            let denom: f64 = (0..r.len())
                .filter(|&j| r[j].time >= r[i].time)
                .map(|j| mu[j].exp())
                .sum();
            total += mu[i] - denom.ln();
        }
        -total / events as f64
    }

    fn random_dataset(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<SurvivalRecord>) {
        let n = rng.random_range(2..=12);
        let mut times: Vec<f64> = (0..n).map(|_| rng.random_range(1..=6) as f64).collect();
        let mut events: Vec<bool> = (0..n).map(|_| rng.random_bool(0.6)).collect();
        events[0] = true;
        times.iter_mut().for_each(|t| *t *= 1.5);
        let mu = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        (mu, recs(&times, &events))
    }

    #[test]
    fn hand_computed_values() {
        let r = recs(&[1.0, 2.0], &[true, true]);
        let v = cox_loss_value(&[0.0, 0.0], &r).unwrap();
        assert!((v - 2f64.ln() / 2.0).abs() < 1e-15);
        assert_eq!(format!("{v:.4}"), "0.3466");

        let r = recs(&[1.0, 2.0, 3.0], &[true, true, false]);
        let v = cox_loss_value(&[0.0, 0.0, 0.0], &r).unwrap();
        assert!((v - (3f64.ln() + 2f64.ln()) / 2.0).abs() < 1e-15);
        assert_eq!(format!("{v:.4}"), "0.8959");
    }

    #[test]
    fn errors() {
        let r = recs(&[1.0, 2.0], &[false, false]);
        let err = cox_loss_value(&[0.0, 0.0], &r).unwrap_err();
        assert_eq!(err.to_string(), "no events in risk computation");
        let r = recs(&[1.0, 2.0], &[true, false]);
        assert!(matches!(
            cox_loss_value(&[0.0, f64::NAN], &r),
            Err(Error::NonFinite(_))
        ));
        assert!(cox_loss_value(&[0.0], &r[..1]).is_err());
        assert!(cox_loss_value(&[0.0, 1.0, 2.0], &r).is_err());
    }

    #[test]
    fn matches_brute_force_on_random_datasets() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..50 {
            let (mu, r) = random_dataset(&mut rng);
            let fast = cox_loss_value(&mu, &r).unwrap();
            let slow = brute_force_loss(&mu, &r);
            assert!((fast - slow).abs() < 1e-10, "{fast} vs {slow}");
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..30 {
            let (mu, r) = random_dataset(&mut rng);
            let err = max_rel_error(&[Tensor::vector(mu).unwrap()], 1e-5, |g, v| {
                cox_loss(g, v[0], &r)
            });
            assert!(err < 1e-6, "{err}");
        }
    }

    #[test]
    fn unnormalized_loss_scales_by_event_count() {
        let r = recs(&[1.0, 2.0, 3.0], &[true, true, false]);
        let mut g = Graph::new();
        let s = g.param(Tensor::vector(vec![0.3, -0.2, 0.1]).unwrap());
        let a = cox_loss(&mut g, s, &r).unwrap();
        let b = cox_loss_with(&mut g, s, &r, LossNormalization::None).unwrap();
        assert!((g.value(a).item() * 2.0 - g.value(b).item()).abs() < 1e-14);
    }

    #[test]
    fn extreme_scores_stay_finite() {
        let r = recs(&[1.0, 2.0, 3.0], &[true, true, true]);
        let mut g = Graph::new();
        let s = g.param(Tensor::vector(vec![900.0, -900.0, 0.0]).unwrap());
        let l = cox_loss(&mut g, s, &r).unwrap();
        assert!(g.value(l).item().is_finite());
        g.backward(l).unwrap();
        assert!(g.grad(s).unwrap().iter().all(|x| x.is_finite()));
    }

    #[test]
    fn monotone_in_first_score() {
        let r = recs(&[1.0, 2.0], &[true, true]);
        let mut prev = f64::INFINITY;
        for step in 0..20 {
            let v = cox_loss_value(&[-2.0 + 0.25 * step as f64, 0.5], &r).unwrap();
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn risk_set_examples() {
        let idx = build_risk_sets(&recs(&[1.0, 2.0, 3.0], &[true, true, false]));
        let mut r0 = idx.risk_set(0).unwrap().to_vec();
        r0.sort();
        assert_eq!(r0, vec![0, 1, 2]);
        let mut r1 = idx.risk_set(1).unwrap().to_vec();
        r1.sort();
        assert_eq!(r1, vec![1, 2]);
        assert!(idx.risk_set(2).is_none());

        assert!(build_risk_sets(&recs(&[1.0, 2.0], &[false, false])).is_empty());

        let ties = build_risk_sets(&recs(&[2.0, 2.0], &[true, true]));
        for (i, set) in ties.iter() {
            let mut s = set.to_vec();
            s.sort();
            assert_eq!(s, vec![0, 1], "subject {i}");
        }
    }

    #[test]
    fn risk_sets_match_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let (_, r) = random_dataset(&mut rng);
            let idx = build_risk_sets(&r);
            assert_eq!(idx.len(), r.iter().filter(|x| x.event).count());
            for (i, set) in idx.iter() {
                let mut got = set.to_vec();
                got.sort();
                let want: Vec<usize> = (0..r.len()).filter(|&j| r[j].time >= r[i].time).collect();
                assert_eq!(got, want);
                assert!(got.contains(&i));
            }
        }
    }

    #[test]
    fn penalty_examples() {
        let mut ps = ParamSet::new();
        let w = ps.add("w", ParamKind::Weight, Tensor::vector(vec![3.0]).unwrap());
        let mut f = Forward::new(&ps, Mode::Train);
        let wv = f.param(w);
        let base = f.graph.sum(wv);
        let same = regularized_loss(&mut f, base, 0.0).unwrap();
        assert_eq!(same, base);
        let reg = regularized_loss(&mut f, base, 0.1).unwrap();
        assert!((f.graph.value(reg).item() - 3.9).abs() < 1e-12);
        assert!(regularized_loss(&mut f, base, -1.0).is_err());

        // d/dW (decay * W^2) = 2 * decay * W
        let err = max_rel_error(&[Tensor::vector(vec![1.5, -0.7]).unwrap()], 1e-5, |g, v| {
            let sq = g.mul(v[0], v[0])?;
            let s = g.sum(sq);
            Ok(g.scale(s, 0.3))
        });
        assert!(err < 1e-8);
        let out = f.finish(reg).unwrap();
        assert!((out.grads[0].as_ref().unwrap()[0] - (1.0 + 2.0 * 0.1 * 3.0)).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn shift_invariant(shift in -50.0f64..50.0, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (mu, r) = random_dataset(&mut rng);
            let shifted: Vec<f64> = mu.iter().map(|m| m + shift).collect();
            let a = cox_loss_value(&mu, &r).unwrap();
            let b = cox_loss_value(&shifted, &r).unwrap();
            prop_assert!((a - b).abs() < 1e-10);
        }
    }
}
