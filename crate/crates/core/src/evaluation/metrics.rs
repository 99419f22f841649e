use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{Cohort, Dataset};
use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r > 0.0 {
            2.0 * p * r / (p + r)
        } else {
            0.0
        }
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn check_lengths(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::InvalidInput(format!("score {s} is not a number")));
    }
    Ok(())
}

/// A record is predicted positive when its score is at least `threshold`.
pub fn confusion(scores: &[f64], labels: &[u8], threshold: f64) -> Result<Confusion> {
    check_lengths(scores, labels)?;
    if scores.is_empty() {
        return Err(Error::InvalidInput("confusion matrix of no records".into()));
    }
    let mut c = Confusion::default();
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= threshold, y == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Indices sorted by score with equal-score blocks as `(start, end)` ranges.
fn tie_blocks(scores: &[f64], descending: bool) -> (Vec<usize>, Vec<(usize, usize)>) {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        let o = scores[a].total_cmp(&scores[b]);
        if descending {
            o.reverse()
        } else {
            o
        }
    });
    let mut blocks = Vec::new();
    let mut s = 0;
    for e in 1..=order.len() {
        if e == order.len() || scores[order[e]] != scores[order[s]] {
            blocks.push((s, e));
            s = e;
        }
    }
    (order, blocks)
}

/// Area under the ROC curve as the Mann-Whitney statistic with half credit
/// for ties.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let n_pos = labels.iter().filter(|&&y| y == 1).count() as u128;
    let n_neg = labels.len() as u128 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidInput("ROC-AUC needs both classes".into()));
    }
    let (order, blocks) = tie_blocks(scores, false);
    // twice the rank sum of positives, with midranks for ties
    let mut r2: u128 = 0;
    for (s, e) in blocks {
        let pos = order[s..e].iter().filter(|&&i| labels[i] == 1).count() as u128;
        r2 += pos * (s + e + 1) as u128;
    }
    let u2 = r2 - n_pos * (n_pos + 1);
    let d = 2 * n_pos * n_neg;
    Ok(if 2 * u2 > d { 1.0 - (d - u2) as f64 / d as f64 } else { u2 as f64 / d as f64 })
}

/// Average precision; records with equal scores enter as one block.
pub fn pr_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    if n_pos == 0 {
        return Err(Error::InvalidInput("PR-AUC needs at least one positive".into()));
    }
    let (order, blocks) = tie_blocks(scores, true);
    let mut tp = 0usize;
    let mut total = 0.0;
    for (s, e) in blocks {
        let pos = order[s..e].iter().filter(|&&i| labels[i] == 1).count();
        tp += pos;
        total += pos as f64 * (tp as f64 / e as f64);
    }
    Ok(total / n_pos as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n: usize,
    pub n_pos: usize,
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Absent when only one class is present.
    pub roc_auc: Option<f64>,
    pub pr_auc: Option<f64>,
}

pub fn metric_report(scores: &[f64], labels: &[u8], threshold: f64) -> Result<MetricReport> {
    let c = confusion(scores, labels, threshold)?;
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let both = n_pos > 0 && n_pos < labels.len();
    Ok(MetricReport {
        n: labels.len(),
        n_pos,
        threshold,
        precision: c.precision(),
        recall: c.recall(),
        f1: c.f1(),
        roc_auc: if both { Some(roc_auc(scores, labels)?) } else { None },
        pr_auc: if n_pos > 0 { Some(pr_auc(scores, labels)?) } else { None },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub overall: MetricReport,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_cohort: BTreeMap<Cohort, MetricReport>,
}

/// Metrics for `predictions[j]` against record `indices[j]`.
pub fn evaluate(predictions: &[f64], dataset: &Dataset, indices: &[usize], per_cohort: bool) -> Result<EvaluationReport> {
    if predictions.len() != indices.len() {
        return Err(Error::Shape(format!("{} predictions for {} records", predictions.len(), indices.len())));
    }
    let labels = dataset.outcomes(indices);
    let overall = metric_report(predictions, &labels, DEFAULT_THRESHOLD)?;
    let mut cohorts = BTreeMap::new();
    if per_cohort {
        let mut groups: BTreeMap<Cohort, (Vec<f64>, Vec<u8>)> = BTreeMap::new();
        for (j, &i) in indices.iter().enumerate() {
            let g = groups.entry(dataset.records[i].cohort).or_default();
            g.0.push(predictions[j]);
            g.1.push(labels[j]);
        }
        for (cohort, (s, y)) in groups {
            cohorts.insert(cohort, metric_report(&s, &y, DEFAULT_THRESHOLD)?);
        }
    }
    Ok(EvaluationReport { overall, per_cohort: cohorts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_auc(s: &[f64], y: &[u8]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..s.len() {
            for j in 0..s.len() {
                if y[i] == 1 && y[j] == 0 {
                    den += 1.0;
                    num += if s[i] > s[j] { 1.0 } else if s[i] == s[j] { 0.5 } else { 0.0 };
                }
            }
        }
        num / den
    }

    fn brute_ap(s: &[f64], y: &[u8]) -> f64 {
        // precision at each positive, counting every record scored >= it
        let n_pos = y.iter().filter(|&&v| v == 1).count() as f64;
        let mut total = 0.0;
        for i in 0..s.len() {
            if y[i] == 1 {
                let above = (0..s.len()).filter(|&j| s[j] >= s[i]).count() as f64;
                let pos_above = (0..s.len()).filter(|&j| s[j] >= s[i] && y[j] == 1).count() as f64;
                total += pos_above / above;
            }
        }
        total / n_pos
    }

    #[test]
    fn confusion_examples() {
        let c = confusion(&[0.9, 0.1], &[1, 0], 0.5).unwrap();
        assert_eq!((c.precision(), c.recall(), c.f1()), (1.0, 1.0, 1.0));
        let c = confusion(&[0.9, 0.9], &[1, 0], 0.5).unwrap();
        assert_eq!(c.precision(), 0.5);
        assert_eq!(c.recall(), 1.0);
        assert!((c.f1() - 2.0 / 3.0).abs() < 1e-15);
        let c = confusion(&[0.2, 0.3, 0.1], &[1, 0, 1], 0.5).unwrap();
        assert_eq!((c.precision(), c.recall(), c.f1()), (0.0, 0.0, 0.0));
        let c = confusion(&[0.5], &[1], 0.5).unwrap();
        assert_eq!(c.tp, 1);
        assert!(confusion(&[0.5], &[1, 0], 0.5).is_err());
    }

    #[test]
    fn auc_examples() {
        let s = [0.1, 0.4, 0.35, 0.8];
        let y = [0, 0, 1, 1];
        assert_eq!(roc_auc(&s, &y).unwrap(), 0.75);
        assert!((pr_auc(&s, &y).unwrap() - 5.0 / 6.0).abs() < 1e-15);
        assert!(roc_auc(&s, &[1, 1, 1, 1]).is_err());
        assert!(pr_auc(&s, &[0, 0, 0, 0]).is_err());
        assert_eq!(roc_auc(&[0.13; 10], &[1, 0, 0, 1, 0, 0, 0, 0, 1, 0]).unwrap(), 0.5);
        assert!((pr_auc(&[0.13; 10], &[1, 0, 0, 1, 0, 0, 0, 0, 1, 0]).unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(pr_auc(&[0.9, 0.8, 0.1, 0.05], &[1, 1, 0, 0]).unwrap(), 1.0);
        // a reversed ranking can fall below prevalence
        assert!((pr_auc(&[0.9, 0.5, 0.1], &[0, 1, 1]).unwrap() - 7.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn null_auc_near_half() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let s: Vec<f64> = (0..10_000).map(|_| rng.random()).collect();
        let y: Vec<u8> = (0..10_000).map(|_| rng.random_bool(0.5) as u8).collect();
        assert!((roc_auc(&s, &y).unwrap() - 0.5).abs() < 0.02);
    }

    #[test]
    fn labels_as_scores_give_perfect_metrics() {
        let y = [1u8, 0, 0, 1, 0];
        let s: Vec<f64> = y.iter().map(|&v| v as f64).collect();
        let r = metric_report(&s, &y, 0.5).unwrap();
        assert_eq!((r.precision, r.recall, r.f1, r.roc_auc, r.pr_auc), (1.0, 1.0, 1.0, Some(1.0), Some(1.0)));
        let r = metric_report(&[0.2, 0.7], &[0, 0], 0.5).unwrap();
        assert_eq!((r.roc_auc, r.pr_auc), (None, None));
    }

    fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
        (2usize..200).prop_flat_map(|n| {
            (
                proptest::collection::vec(prop_oneof![(0u8..8).prop_map(|k| k as f64 / 8.0), 0.0f64..1.0], n),
                proptest::collection::vec(0u8..2, n),
            )
        })
    }

    proptest! {
        #[test]
        fn auc_matches_pairwise_oracle((s, y) in instance()) {
            let pos = y.iter().filter(|&&v| v == 1).count();
            prop_assume!(pos > 0 && pos < y.len());
            let auc = roc_auc(&s, &y).unwrap();
            prop_assert!((auc - brute_auc(&s, &y)).abs() < 1e-9);
            let flipped: Vec<u8> = y.iter().map(|&v| 1 - v).collect();
            prop_assert_eq!(auc + roc_auc(&s, &flipped).unwrap(), 1.0);
            let transformed: Vec<f64> = s.iter().map(|&v| (3.0 * v - 1.0).exp()).collect();
            prop_assert_eq!(auc.to_bits(), roc_auc(&transformed, &y).unwrap().to_bits());
        }

        #[test]
        fn ap_matches_oracle_and_bounds((s, y) in instance()) {
            let pos = y.iter().filter(|&&v| v == 1).count();
            prop_assume!(pos > 0);
            let ap = pr_auc(&s, &y).unwrap();
            prop_assert!((ap - brute_ap(&s, &y)).abs() < 1e-9);
            // worst case: every positive ranked below every negative
            let neg = y.len() - pos;
            let worst = (1..=pos).map(|k| k as f64 / (neg + k) as f64).sum::<f64>() / pos as f64;
            prop_assert!(ap >= worst - 1e-12 && ap <= 1.0 + 1e-12);
        }

        #[test]
        fn metrics_ignore_record_order((s, y) in instance(), seed in 0u64..1000) {
            use rand::{seq::SliceRandom, SeedableRng};
            let pos = y.iter().filter(|&&v| v == 1).count();
            prop_assume!(pos > 0 && pos < y.len());
            let mut idx: Vec<usize> = (0..s.len()).collect();
            idx.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let s2: Vec<f64> = idx.iter().map(|&i| s[i]).collect();
            let y2: Vec<u8> = idx.iter().map(|&i| y[i]).collect();
            prop_assert_eq!(metric_report(&s, &y, 0.5).unwrap(), metric_report(&s2, &y2, 0.5).unwrap());
        }
    }
}
