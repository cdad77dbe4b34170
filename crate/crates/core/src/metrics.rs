//! Evaluation metrics: accuracy, AUC, macro-F1 for classification and the
//! concordance index for survival.

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub auc: f64,
    pub macro_f1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SurvivalMetrics {
    pub c_index: f64,
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.is_empty() || preds.len() != labels.len() {
        return Err(Error::Metric("accuracy needs matched, nonempty inputs".into()));
    }
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Binary AUC via the rank statistic (Mann-Whitney), tied scores counted
/// half. Undefined when only one class is present.
pub fn auc_binary(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::Metric("auc needs matched, nonempty inputs".into()));
    }
    let pos = labels.iter().filter(|l| **l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Metric("auc undefined: evaluation set has a single class".into()));
    }
    // Average ranks, ties shared.
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap().then(a.cmp(&b)));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j + 2) as f64 / 2.0; // 1-based ranks
        for &idx in &order[i..=j] {
            ranks[idx] = avg_rank;
        }
        i = j + 1;
    }
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, l)| **l).map(|(r, _)| r).sum();
    let auc = (rank_sum - (pos * (pos + 1)) as f64 / 2.0) / (pos as f64 * neg as f64);
    Ok(auc)
}

/// Macro one-vs-rest AUC over per-class scores (`scores[i]` has one entry
/// per class). Classes absent from the labels are skipped; at least one
/// class pair must be scorable.
pub fn auc_macro(scores: &[Vec<f64>], labels: &[usize], num_classes: usize) -> Result<f64> {
    if num_classes == 2 {
        let s: Vec<f64> = scores.iter().map(|row| row[1]).collect();
        let l: Vec<bool> = labels.iter().map(|&c| c == 1).collect();
        return auc_binary(&s, &l);
    }
    let mut total = 0.0;
    let mut counted = 0;
    for c in 0..num_classes {
        let l: Vec<bool> = labels.iter().map(|&x| x == c).collect();
        if l.iter().all(|v| !v) || l.iter().all(|v| *v) {
            continue;
        }
        let s: Vec<f64> = scores.iter().map(|row| row[c]).collect();
        total += auc_binary(&s, &l)?;
        counted += 1;
    }
    if counted == 0 {
        return Err(Error::Metric("auc undefined: evaluation set has a single class".into()));
    }
    Ok(total / counted as f64)
}

/// F1 averaged over classes; a class absent from both predictions and
/// labels contributes 0 to the average only if it appears in labels.
pub fn macro_f1(preds: &[usize], labels: &[usize], num_classes: usize) -> Result<f64> {
    if preds.is_empty() || preds.len() != labels.len() {
        return Err(Error::Metric("f1 needs matched, nonempty inputs".into()));
    }
    let mut total = 0.0;
    for c in 0..num_classes {
        let tp = preds.iter().zip(labels).filter(|(p, l)| **p == c && **l == c).count() as f64;
        let fp = preds.iter().zip(labels).filter(|(p, l)| **p == c && **l != c).count() as f64;
        let fe = preds.iter().zip(labels).filter(|(p, l)| **p != c && **l == c).count() as f64;
        let denom = 2.0 * tp + fp + fe;
        total += if denom > 0.0 { 2.0 * tp / denom } else { 0.0 };
    }
    Ok(total / num_classes as f64)
}

/// Harrell's concordance index: over pairs with `t_i < t_j` and an observed
/// event at `t_i`, the fraction where the predicted risk orders the pair
/// correctly, risk ties counted half.
pub fn c_index(risks: &[f64], times: &[f64], events: &[bool]) -> Result<f64> {
    let n = risks.len();
    if n != times.len() || n != events.len() || n == 0 {
        return Err(Error::Metric("c-index needs matched, nonempty inputs".into()));
    }
    let mut concordant = 0.0;
    let mut comparable = 0u64;
    for i in 0..n {
        if !events[i] {
            continue;
        }
        for j in 0..n {
            if times[i] < times[j] {
                comparable += 1;
                if risks[i] > risks[j] {
                    concordant += 1.0;
                } else if risks[i] == risks[j] {
                    concordant += 0.5;
                }
            }
        }
    }
    if comparable == 0 {
        return Err(Error::Metric("c-index undefined: no comparable pairs".into()));
    }
    Ok(concordant / comparable as f64)
}

/// Metrics for a classification evaluation set from per-class scores.
pub fn classification_metrics(
    scores: &[Vec<f64>],
    labels: &[usize],
    num_classes: usize,
) -> Result<ClassificationMetrics> {
    let preds: Vec<usize> = scores
        .iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap_or(0)
        })
        .collect();
    Ok(ClassificationMetrics {
        accuracy: accuracy(&preds, labels)?,
        auc: auc_macro(scores, labels, num_classes)?,
        macro_f1: macro_f1(&preds, labels, num_classes)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Brute-force pair-counting AUC, written independently of the rank
    /// statistic above.
    fn auc_pairs(scores: &[f64], labels: &[bool]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..scores.len() {
            if !labels[i] {
                continue;
            }
            for j in 0..scores.len() {
                if labels[j] {
                    continue;
                }
                den += 1.0;
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
        num / den
    }

    /// Brute-force concordance, independent loop structure.
    fn c_index_pairs(risks: &[f64], times: &[f64], events: &[bool]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..risks.len() {
            for j in 0..risks.len() {
                if i == j || !events[i] || times[i] >= times[j] {
                    continue;
                }
                den += 1.0;
                num += if risks[i] > risks[j] {
                    1.0
                } else if risks[i] == risks[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
        num / den
    }

    #[test]
    fn auc_four_point_toy() {
        let scores = [0.1, 0.4, 0.35, 0.8];
        let labels = [false, false, true, true];
        let got = auc_binary(&scores, &labels).unwrap();
        assert!((got - auc_pairs(&scores, &labels)).abs() < 1e-12);
        assert!((got - 0.75).abs() < 1e-12);
    }

    #[test]
    fn auc_matches_pair_oracle_on_random_sets_with_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for n in [3usize, 7, 20, 50] {
            for _ in 0..20 {
                // Quantized scores force ties.
                let scores: Vec<f64> =
                    (0..n).map(|_| (rng.gen_range(0..8) as f64) / 8.0).collect();
                let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
                if labels.iter().all(|l| *l) || labels.iter().all(|l| !*l) {
                    continue;
                }
                let got = auc_binary(&scores, &labels).unwrap();
                let want = auc_pairs(&scores, &labels);
                assert!((got - want).abs() < 1e-12, "n={n}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn auc_single_class_is_undefined() {
        assert!(auc_binary(&[0.3, 0.6], &[true, true]).is_err());
    }

    #[test]
    fn c_index_perfect_ordering() {
        // Risk strictly decreasing in time: every comparable pair concordant.
        let risks = [3.0, 2.0, 1.0, 0.5];
        let times = [1.0, 2.0, 3.0, 4.0];
        let events = [true, true, true, false];
        assert_eq!(c_index(&risks, &times, &events).unwrap(), 1.0);
    }

    #[test]
    fn c_index_null_expectation_near_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let n = 4000;
        let risks: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let times: Vec<f64> = (0..n).map(|_| rng.gen_range(1.0..100.0)).collect();
        let events: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.7)).collect();
        let c = c_index(&risks, &times, &events).unwrap();
        assert!((c - 0.5).abs() < 0.02, "null c-index {c}");
    }

    #[test]
    fn c_index_matches_pair_oracle_on_random_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for n in [2usize, 5, 17, 50] {
            for _ in 0..20 {
                let risks: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..6) as f64) / 3.0).collect();
                let times: Vec<f64> = (0..n).map(|_| rng.gen_range(0..10) as f64).collect();
                let events: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.6)).collect();
                match c_index(&risks, &times, &events) {
                    Ok(got) => {
                        let want = c_index_pairs(&risks, &times, &events);
                        assert!((got - want).abs() < 1e-12, "n={n}: {got} vs {want}");
                    }
                    Err(_) => {
                        // No comparable pairs; oracle would divide by zero.
                        assert_eq!(c_index_pairs(&risks, &times, &events).is_nan(), true);
                    }
                }
            }
        }
    }

    #[test]
    fn macro_f1_toy() {
        let preds = [0, 1, 1, 0];
        let labels = [0, 1, 0, 0];
        // class 0: tp=2 fp=0 fn=1 -> f1 = 4/5; class 1: tp=1 fp=1 fn=0 -> f1 = 2/3.
        let got = macro_f1(&preds, &labels, 2).unwrap();
        assert!((got - (0.8 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn accuracy_counts_hits() {
        assert_eq!(accuracy(&[1, 0, 1], &[1, 1, 1]).unwrap(), 2.0 / 3.0);
    }
}
